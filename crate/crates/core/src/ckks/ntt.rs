//! Negacyclic number-theoretic transform over `Z_q[X]/(X^N + 1)`.
//!
//! Forward transform is Cooley-Tukey with bit-reversed twiddles (output in
//! bit-reversed order), inverse is Gentleman-Sande. Pointwise products in
//! the transformed domain correspond to negacyclic convolution.

use super::modarith::{primitive_root_of_unity, Modulus};

#[derive(Clone, Debug)]
pub struct NttTable {
    modulus: Modulus,
    n: usize,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    psi_inv_rev: Vec<u64>,
    psi_inv_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

impl NttTable {
    /// Returns `None` when `q` is not congruent to 1 modulo `2n`.
    pub fn new(q: u64, n: usize) -> Option<Self> {
        assert!(n.is_power_of_two());
        let modulus = Modulus::new(q);
        let psi = primitive_root_of_unity(&modulus, 2 * n as u64)?;
        let psi_inv = modulus.inv(psi);
        let log_n = n.trailing_zeros();
        let mut psi_rev = vec![0u64; n];
        let mut psi_inv_rev = vec![0u64; n];
        let mut pow = 1u64;
        let mut pow_inv = 1u64;
        for i in 0..n {
            let r = bit_reverse(i, log_n);
            psi_rev[r] = pow;
            psi_inv_rev[r] = pow_inv;
            pow = modulus.mul(pow, psi);
            pow_inv = modulus.mul(pow_inv, psi_inv);
        }
        let psi_rev_shoup = psi_rev.iter().map(|&w| modulus.shoup(w)).collect();
        let psi_inv_rev_shoup = psi_inv_rev.iter().map(|&w| modulus.shoup(w)).collect();
        let n_inv = modulus.inv(n as u64);
        Some(Self {
            modulus,
            n,
            psi_rev,
            psi_rev_shoup,
            psi_inv_rev,
            psi_inv_rev_shoup,
            n_inv,
            n_inv_shoup: modulus.shoup(n_inv),
        })
    }

    #[inline]
    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = &self.modulus;
        let mut t = self.n;
        let mut m = 1;
        while m < self.n {
            t >>= 1;
            for i in 0..m {
                let w = self.psi_rev[m + i];
                let ws = self.psi_rev_shoup[m + i];
                let j1 = 2 * i * t;
                let (lo, hi) = a[j1..j1 + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = q.mul_shoup(*y, w, ws);
                    *x = q.add(u, v);
                    *y = q.sub(u, v);
                }
            }
            m <<= 1;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = &self.modulus;
        let mut t = 1;
        let mut m = self.n >> 1;
        while m >= 1 {
            let mut j1 = 0;
            for i in 0..m {
                let w = self.psi_inv_rev[m + i];
                let ws = self.psi_inv_rev_shoup[m + i];
                let (lo, hi) = a[j1..j1 + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = *y;
                    *x = q.add(u, v);
                    *y = q.mul_shoup(q.sub(u, v), w, ws);
                }
                j1 += 2 * t;
            }
            t <<= 1;
            m >>= 1;
        }
        for x in a.iter_mut() {
            *x = q.mul_shoup(*x, self.n_inv, self.n_inv_shoup);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // schoolbook negacyclic product, independent of the transform
    fn negacyclic_mul(a: &[u64], b: &[u64], q: u64) -> Vec<u64> {
        let n = a.len();
        let mut out = vec![0i128; n];
        for i in 0..n {
            for j in 0..n {
                let prod = (a[i] as i128 * b[j] as i128) % q as i128;
                if i + j < n {
                    out[i + j] += prod;
                } else {
                    out[i + j - n] -= prod;
                }
            }
        }
        out.into_iter().map(|x| x.rem_euclid(q as i128) as u64).collect()
    }

    #[test]
    fn roundtrip_and_convolution_match_schoolbook() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(q, n) in &[(65537u64, 16usize), (114689, 16), (1785857, 64), (1152921504606830593, 32)] {
            let table = NttTable::new(q, n).unwrap();
            let a: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
            let b: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
            let mut fa = a.clone();
            table.forward(&mut fa);
            let mut back = fa.clone();
            table.inverse(&mut back);
            assert_eq!(back, a);

            let mut fb = b.clone();
            table.forward(&mut fb);
            let m = table.modulus();
            let mut prod: Vec<u64> = fa.iter().zip(&fb).map(|(&x, &y)| m.mul(x, y)).collect();
            table.inverse(&mut prod);
            assert_eq!(prod, negacyclic_mul(&a, &b, q));
        }
    }

    #[test]
    fn rejects_non_ntt_prime() {
        // 65537 - 1 = 2^16, fine for n = 16; 7 - 1 = 6 is not divisible by 32
        assert!(NttTable::new(7, 16).is_none());
    }
}
