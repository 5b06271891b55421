use std::sync::Arc;

use super::encoding::Encoder;
use super::modarith::{ntt_primes, Modulus};
use super::ntt::NttTable;
use super::params::CkksParams;
use super::poly::RnsPoly;
use super::CkksError;
use crate::par;

/// Immutable, cheaply clonable CKKS context: parameters, NTT tables for every
/// chain prime plus the key-switching prime, and the slot encoder.
#[derive(Clone, Debug)]
pub struct CkksContext {
    inner: Arc<Inner>,
}

#[derive(Debug)]
struct Inner {
    params: CkksParams,
    special_prime: u64,
    tables: Vec<NttTable>,
    // inv[d][j] = q_d^{-1} mod q_j
    inv: Vec<Vec<u64>>,
    encoder: Encoder,
    fingerprint: u64,
}

fn fnv1a(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl CkksContext {
    pub fn new(params: CkksParams) -> Result<Self, CkksError> {
        params.validate()?;
        let n = params.ring_degree;
        // Largest 60-bit NTT prime not in the chain.
        let special_prime = *ntt_primes(60, n, 1, &params.prime_chain)
            .first()
            .ok_or_else(|| CkksError::Params("no key-switching prime available".into()))?;
        let mut all = params.prime_chain.clone();
        all.push(special_prime);
        let tables = all
            .iter()
            .map(|&q| NttTable::new(q, n).ok_or_else(|| CkksError::Params(format!("{q} is not NTT-friendly"))))
            .collect::<Result<Vec<_>, _>>()?;
        let inv = all
            .iter()
            .map(|&qd| {
                tables
                    .iter()
                    .map(|t| {
                        let m = t.modulus();
                        if m.value() == qd {
                            0
                        } else {
                            m.inv(m.reduce(qd))
                        }
                    })
                    .collect()
            })
            .collect();
        let fingerprint = fnv1a([n as u64, params.scale, special_prime].into_iter().chain(params.prime_chain.iter().copied()));
        Ok(Self { inner: Arc::new(Inner { encoder: Encoder::new(n), params, special_prime, tables, inv, fingerprint }) })
    }

    #[inline]
    pub fn params(&self) -> &CkksParams {
        &self.inner.params
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.inner.params.ring_degree
    }

    #[inline]
    pub fn slots(&self) -> usize {
        self.n() / 2
    }

    #[inline]
    pub fn chain_len(&self) -> usize {
        self.inner.params.prime_chain.len()
    }

    pub fn max_level(&self) -> usize {
        self.chain_len() - 1
    }

    pub fn scale(&self) -> f64 {
        self.inner.params.scale as f64
    }

    pub fn special_prime(&self) -> u64 {
        self.inner.special_prime
    }

    /// Prime-table index of the key-switching prime.
    #[inline]
    pub fn special_id(&self) -> usize {
        self.chain_len()
    }

    /// Hash of the parameters; keys and contexts must agree on it.
    pub fn fingerprint(&self) -> u64 {
        self.inner.fingerprint
    }

    #[inline]
    pub fn modulus(&self, id: usize) -> &Modulus {
        self.inner.tables[id].modulus()
    }

    #[inline]
    pub(crate) fn table(&self, id: usize) -> &NttTable {
        &self.inner.tables[id]
    }

    pub(crate) fn encoder(&self) -> &Encoder {
        &self.inner.encoder
    }

    /// Chain indices of the primes a level-`level` ciphertext lives on.
    ///
    /// Middle primes are consumed from the top down; the last chain prime is
    /// kept until only it remains, so decryption always has a 40-bit anchor.
    pub fn active_primes(&self, level: usize) -> Vec<usize> {
        let l = self.chain_len();
        assert!(level < l, "level {level} beyond chain of {l}");
        let mut ids: Vec<usize> = (0..l - 1 - level).collect();
        ids.push(l - 1);
        ids
    }

    /// Chain index removed when moving from `level` to `level + 1`.
    pub fn dropped_prime(&self, level: usize) -> usize {
        let l = self.chain_len();
        assert!(level + 1 < l);
        l - 2 - level
    }

    pub fn check_level(&self, level: usize) -> Result<(), CkksError> {
        if level > self.max_level() {
            return Err(CkksError::Level { requested: level, max: self.max_level() });
        }
        Ok(())
    }

    pub(crate) fn ntt_forward(&self, poly: &mut RnsPoly) {
        let n = poly.n();
        let ids = poly.prime_ids().to_vec();
        let tables = &self.inner.tables;
        par::for_each_chunk_mut(poly.data_mut(), n, |k, c| tables[ids[k]].forward(c));
    }

    pub(crate) fn ntt_inverse(&self, poly: &mut RnsPoly) {
        let n = poly.n();
        let ids = poly.prime_ids().to_vec();
        let tables = &self.inner.tables;
        par::for_each_chunk_mut(poly.data_mut(), n, |k, c| tables[ids[k]].inverse(c));
    }

    pub(crate) fn add_assign(&self, a: &mut RnsPoly, b: &RnsPoly) {
        debug_assert_eq!(a.prime_ids(), b.prime_ids());
        let n = a.n();
        let ids = a.prime_ids().to_vec();
        par::for_each_chunk_mut(a.data_mut(), n, |k, c| {
            let m = self.modulus(ids[k]);
            for (x, &y) in c.iter_mut().zip(b.component(k)) {
                *x = m.add(*x, y);
            }
        });
    }

    pub(crate) fn sub_assign(&self, a: &mut RnsPoly, b: &RnsPoly) {
        debug_assert_eq!(a.prime_ids(), b.prime_ids());
        let n = a.n();
        let ids = a.prime_ids().to_vec();
        par::for_each_chunk_mut(a.data_mut(), n, |k, c| {
            let m = self.modulus(ids[k]);
            for (x, &y) in c.iter_mut().zip(b.component(k)) {
                *x = m.sub(*x, y);
            }
        });
    }

    pub(crate) fn neg_assign(&self, a: &mut RnsPoly) {
        let n = a.n();
        let ids = a.prime_ids().to_vec();
        par::for_each_chunk_mut(a.data_mut(), n, |k, c| {
            let m = self.modulus(ids[k]);
            for x in c.iter_mut() {
                *x = m.neg(*x);
            }
        });
    }

    /// Pointwise product; both operands in NTT form over the same primes.
    pub(crate) fn mul_ntt(&self, a: &RnsPoly, b: &RnsPoly) -> RnsPoly {
        debug_assert_eq!(a.prime_ids(), b.prime_ids());
        let mut out = a.clone();
        self.mul_ntt_assign(&mut out, b);
        out
    }

    pub(crate) fn mul_ntt_assign(&self, a: &mut RnsPoly, b: &RnsPoly) {
        let n = a.n();
        let ids = a.prime_ids().to_vec();
        par::for_each_chunk_mut(a.data_mut(), n, |k, c| {
            let m = self.modulus(ids[k]);
            for (x, &y) in c.iter_mut().zip(b.component(k)) {
                *x = m.mul(*x, y);
            }
        });
    }

    /// Multiplies every coefficient by the integer `k` (given modulo each prime).
    pub(crate) fn mul_scalar_assign(&self, a: &mut RnsPoly, k: i128) {
        let n = a.n();
        let ids = a.prime_ids().to_vec();
        par::for_each_chunk_mut(a.data_mut(), n, |j, c| {
            let m = self.modulus(ids[j]);
            let w = m.reduce_i128(k);
            let ws = m.shoup(w);
            for x in c.iter_mut() {
                *x = m.mul_shoup(*x, w, ws);
            }
        });
    }

    /// Lifts small signed coefficients into RNS form over `ids`.
    pub(crate) fn lift_signed(&self, coeffs: &[i64], ids: &[usize]) -> RnsPoly {
        let n = self.n();
        let mut p = RnsPoly::zero(n, ids);
        for (k, &id) in ids.iter().enumerate() {
            let m = self.modulus(id);
            for (d, &c) in p.component_mut(k).iter_mut().zip(coeffs) {
                *d = m.reduce_i64(c);
            }
        }
        p
    }

    /// Lifts wide signed coefficients into RNS form over `ids`.
    pub(crate) fn lift_signed_wide(&self, coeffs: &[i128], ids: &[usize]) -> RnsPoly {
        let n = self.n();
        let mut p = RnsPoly::zero(n, ids);
        for (k, &id) in ids.iter().enumerate() {
            let m = self.modulus(id);
            for (d, &c) in p.component_mut(k).iter_mut().zip(coeffs) {
                *d = m.reduce_i128(c);
            }
        }
        p
    }

    /// Divides by prime `drop` with centered rounding and removes that
    /// component. Input and output are in coefficient form.
    pub(crate) fn drop_and_round(&self, poly: &RnsPoly, drop: usize) -> RnsPoly {
        let n = poly.n();
        let qd = *self.modulus(drop);
        let last: Vec<i64> = poly.component_for(drop).iter().map(|&c| qd.center(c)).collect();
        let ids: Vec<usize> = poly.prime_ids().iter().copied().filter(|&i| i != drop).collect();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in &ids {
            data.extend_from_slice(poly.component_for(id));
        }
        let mut out = RnsPoly::from_parts(n, ids.clone(), data);
        let inv = &self.inner.inv[drop];
        par::for_each_chunk_mut(out.data_mut(), n, |k, c| {
            let m = self.modulus(ids[k]);
            let w = inv[ids[k]];
            let ws = m.shoup(w);
            for (x, &r) in c.iter_mut().zip(&last) {
                *x = m.mul_shoup(m.sub(*x, m.reduce_i64(r)), w, ws);
            }
        });
        out
    }

    /// Applies `X -> X^g` to a coefficient-form polynomial.
    pub(crate) fn automorphism(&self, poly: &RnsPoly, g: usize) -> RnsPoly {
        let n = poly.n();
        let two_n = 2 * n;
        let ids = poly.prime_ids().to_vec();
        let mut out = RnsPoly::zero(n, &ids);
        par::for_each_chunk_mut(out.data_mut(), n, |k, dst| {
            let m = self.modulus(ids[k]);
            let src = poly.component(k);
            for (i, &c) in src.iter().enumerate() {
                let j = i * g % two_n;
                if j < n {
                    dst[j] = c;
                } else {
                    dst[j - n] = m.neg(c);
                }
            }
        });
        out
    }

    /// Centered integer coefficients recovered by CRT from the first and last
    /// components. Exact whenever the true coefficients are below half the
    /// product of those two primes.
    pub(crate) fn crt_centered(&self, poly: &RnsPoly) -> Vec<i128> {
        let ids = poly.prime_ids();
        let first = ids[0];
        let m1 = *self.modulus(first);
        if ids.len() == 1 {
            return poly.component(0).iter().map(|&c| m1.center(c) as i128).collect();
        }
        let last = *ids.last().unwrap();
        let m2 = *self.modulus(last);
        let p1 = m1.value() as i128;
        let p2 = m2.value() as i128;
        let big = p1 * p2;
        let inv = m2.inv(m2.reduce(m1.value()));
        let r1s = poly.component(0);
        let r2s = poly.component(ids.len() - 1);
        r1s.iter()
            .zip(r2s)
            .map(|(&r1, &r2)| {
                let t = m2.mul(m2.sub(r2, m2.reduce(r1)), inv);
                let x = r1 as i128 + p1 * t as i128;
                if x > big / 2 {
                    x - big
                } else {
                    x
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn active_primes_drop_middle_from_top() {
        let ctx = CkksContext::new(CkksParams::toy()).unwrap();
        assert_eq!(ctx.active_primes(0), vec![0, 1, 2, 3, 4]);
        assert_eq!(ctx.active_primes(1), vec![0, 1, 2, 4]);
        assert_eq!(ctx.active_primes(3), vec![0, 4]);
        assert_eq!(ctx.active_primes(4), vec![4]);
        assert_eq!(ctx.dropped_prime(0), 3);
        assert_eq!(ctx.dropped_prime(3), 0);
    }

    #[test]
    fn special_prime_is_outside_chain() {
        let ctx = CkksContext::new(CkksParams::s1()).unwrap();
        let p = ctx.special_prime();
        assert!(!ctx.params().prime_chain.contains(&p));
        assert_eq!(p % (2 * 8192), 1);
        assert_eq!(64 - p.leading_zeros(), 60);
    }

    #[test]
    fn drop_and_round_divides() {
        let ctx = CkksContext::new(CkksParams::tiny()).unwrap();
        let q0 = 65537i128;
        let coeffs: Vec<i128> = (0..16).map(|i| (i as i128 - 8) * q0 * 3 + (i as i128 * 1000 - 7000)).collect();
        let p = ctx.lift_signed_wide(&coeffs, &[0, 1]);
        let r = ctx.drop_and_round(&p, 0);
        assert_eq!(r.prime_ids(), &[1]);
        let m = ctx.modulus(1);
        for (i, &c) in coeffs.iter().enumerate() {
            let expect = (c as f64 / q0 as f64).round() as i64;
            assert_eq!(m.center(r.component(0)[i]), expect);
        }
    }

    #[test]
    fn crt_recovers_wide_values() {
        let ctx = CkksContext::new(CkksParams::toy()).unwrap();
        let coeffs: Vec<i128> = (0..256).map(|i| (i as i128 - 128) << 60).collect();
        let p = ctx.lift_signed_wide(&coeffs, &ctx.active_primes(0));
        assert_eq!(ctx.crt_centered(&p), coeffs);
    }
}
