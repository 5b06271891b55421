//! Word-sized modular arithmetic for the RNS primes.
//!
//! All moduli are odd primes below 2^62, so a product of two residues fits
//! in a `u128` and Barrett reduction with a single `u64` constant is exact.

/// An odd prime modulus below 2^62 with its Barrett constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modulus {
    value: u64,
    bits: u32,
    mu: u64,
}

impl Modulus {
    pub fn new(value: u64) -> Self {
        assert!(value > 2 && value < (1 << 62), "modulus out of range: {value}");
        let bits = 64 - value.leading_zeros();
        let mu = ((1u128 << (2 * bits)) / value as u128) as u64;
        Self { value, bits, mu }
    }

    #[inline]
    pub fn value(&self) -> u64 {
        self.value
    }

    #[inline]
    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Reduces `x < value^2`.
    #[inline]
    pub fn reduce_u128(&self, x: u128) -> u64 {
        let q1 = (x >> (self.bits - 1)) as u64;
        let q3 = ((q1 as u128 * self.mu as u128) >> (self.bits + 1)) as u64;
        // r < 3q; two branchless corrections
        let r = (x as u64).wrapping_sub(q3.wrapping_mul(self.value));
        let r = r.min(r.wrapping_sub(self.value));
        r.min(r.wrapping_sub(self.value))
    }

    #[inline]
    pub fn reduce(&self, x: u64) -> u64 {
        if x < self.value {
            x
        } else {
            x % self.value
        }
    }

    /// Reduces a signed value into `[0, value)`.
    #[inline]
    pub fn reduce_i64(&self, x: i64) -> u64 {
        let a = x.unsigned_abs();
        let r =
            if (a as u128) < (self.value as u128) * (self.value as u128) { self.reduce_u128(a as u128) } else { a % self.value };
        if x < 0 {
            self.neg(r)
        } else {
            r
        }
    }

    #[inline]
    pub fn reduce_i128(&self, x: i128) -> u64 {
        x.rem_euclid(self.value as i128) as u64
    }

    // Conditional subtraction via `min`: if `x < q` then `x - q` wraps above
    // `x`. Branch-free, which matters inside the NTT butterflies.
    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        s.min(s.wrapping_sub(self.value))
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        let d = a.wrapping_sub(b);
        d.min(d.wrapping_add(self.value))
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.value - a
        }
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        self.reduce_u128(a as u128 * b as u128)
    }

    /// Precomputes `floor(w * 2^64 / q)` for repeated multiplication by `w`.
    #[inline]
    pub fn shoup(&self, w: u64) -> u64 {
        (((w as u128) << 64) / self.value as u128) as u64
    }

    #[inline]
    pub fn mul_shoup(&self, a: u64, w: u64, w_shoup: u64) -> u64 {
        let hi = ((a as u128 * w_shoup as u128) >> 64) as u64;
        let r = a.wrapping_mul(w).wrapping_sub(hi.wrapping_mul(self.value));
        r.min(r.wrapping_sub(self.value))
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base = self.reduce(base);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Inverse by Fermat's little theorem; `a` must be nonzero mod the prime.
    pub fn inv(&self, a: u64) -> u64 {
        debug_assert!(self.reduce(a) != 0);
        self.pow(a, self.value - 2)
    }

    /// Maps a residue to its centered representative in `(-q/2, q/2]`.
    #[inline]
    pub fn center(&self, a: u64) -> i64 {
        if a > self.value / 2 {
            a as i64 - self.value as i64
        } else {
            a as i64
        }
    }
}

fn mul_mod_u64(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod_u64(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod_u64(acc, base, m);
        }
        base = mul_mod_u64(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &p in &BASES {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &BASES {
        let mut x = pow_mod_u64(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod_u64(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Finds a primitive `order`-th root of unity modulo the prime `q`
/// (`order` a power of two dividing `q - 1`).
pub fn primitive_root_of_unity(q: &Modulus, order: u64) -> Option<u64> {
    let qv = q.value();
    if !(qv - 1).is_multiple_of(order) {
        return None;
    }
    let cofactor = (qv - 1) / order;
    for x in 2..qv {
        let g = q.pow(x, cofactor);
        // order is a power of two, so g has exact order `order` iff g^(order/2) = -1.
        if q.pow(g, order / 2) == qv - 1 {
            return Some(g);
        }
    }
    None
}

/// Largest primes strictly below `2^bits` that are congruent to 1 modulo
/// `2n`, skipping anything in `exclude`.
pub fn ntt_primes(bits: u32, n: usize, count: usize, exclude: &[u64]) -> Vec<u64> {
    let m = 2 * n as u64;
    let upper = if bits >= 64 { u64::MAX } else { (1u64 << bits) - 1 };
    let lower = 1u64 << (bits - 1);
    let mut k = upper / m;
    let mut out = Vec::with_capacity(count);
    while out.len() < count && k > 0 {
        let cand = k * m + 1;
        if cand <= lower {
            break;
        }
        if !exclude.contains(&cand) && !out.contains(&cand) && is_prime(cand) {
            out.push(cand);
        }
        k -= 1;
    }
    out
}
