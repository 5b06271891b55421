//! Encoding, encryption and the homomorphic operations used by the protocol.
//!
//! Ciphertexts are kept in coefficient form. Levels count consumed primes:
//! a level-`l` object lives on `ctx.active_primes(l)`.

use rand::Rng;

use super::context::CkksContext;
use super::keys::{sample_gaussian, sample_ternary, sample_uniform, PublicKey, RotationKey, RotationKeySet, SecretKey};
use super::poly::RnsPoly;
use super::CkksError;
use crate::par;

/// Relative tolerance for comparing scales of operands.
pub const SCALE_TOLERANCE: f64 = 1e-9;

const SLOT_SUM_TARGET_LOG2: f64 = 31.0;

/// An encoded plaintext ring element.
#[derive(Clone, Debug, PartialEq)]
pub struct Plaintext {
    pub(crate) coeffs: RnsPoly,
    pub(crate) ntt: RnsPoly,
    pub(crate) level: usize,
    pub(crate) scale: f64,
    /// Set when every slot holds the same value: the polynomial is this
    /// constant, and multiplication reduces to a scalar product.
    pub(crate) constant: Option<i128>,
}

impl Plaintext {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    pub fn poly(&self) -> &RnsPoly {
        &self.coeffs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ciphertext {
    pub(crate) c0: RnsPoly,
    pub(crate) c1: RnsPoly,
    pub(crate) level: usize,
    pub(crate) scale: f64,
}

impl Ciphertext {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn num_primes(&self) -> usize {
        self.c0.num_components()
    }

    pub fn c0(&self) -> &RnsPoly {
        &self.c0
    }

    pub fn c1(&self) -> &RnsPoly {
        &self.c1
    }
}

fn scales_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCALE_TOLERANCE * a.abs().max(b.abs())
}

impl CkksContext {
    fn check_fingerprint(&self, fp: u64, what: &str) -> Result<(), CkksError> {
        if fp != self.fingerprint() {
            return Err(CkksError::Context(format!("{what} was generated for different parameters")));
        }
        Ok(())
    }

    fn check_ct(&self, ct: &Ciphertext) -> Result<(), CkksError> {
        self.check_level(ct.level)?;
        let ids = self.active_primes(ct.level);
        if ct.c0.n() != self.n() || ct.c0.prime_ids() != ids.as_slice() || ct.c1.prime_ids() != ids.as_slice() {
            return Err(CkksError::Context("ciphertext does not match this context".into()));
        }
        Ok(())
    }

    fn finish_plaintext(&self, coeffs: RnsPoly, level: usize, scale: f64, constant: Option<i128>) -> Plaintext {
        let mut ntt = coeffs.clone();
        self.ntt_forward(&mut ntt);
        Plaintext { coeffs, ntt, level, scale, constant }
    }

    /// Encodes up to `N/2` reals at the given level and scale.
    pub fn encode(&self, values: &[f64], level: usize, scale: f64) -> Result<Plaintext, CkksError> {
        if values.len() > self.slots() {
            return Err(CkksError::Capacity { len: values.len(), slots: self.slots() });
        }
        if values.len() == self.slots() && values.iter().all(|&v| v == values[0]) {
            return self.encode_constant(values[0], level, scale);
        }
        self.check_level(level)?;
        check_scale(scale)?;
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(CkksError::InvalidValue(format!("cannot encode {bad}")));
        }
        let real = self.encoder().embed_inverse(values, scale);
        let ints = round_coeffs(&real)?;
        let coeffs = self.lift_signed_wide(&ints, &self.active_primes(level));
        Ok(self.finish_plaintext(coeffs, level, scale, None))
    }

    /// Encodes `value` replicated in every slot.
    pub fn encode_constant(&self, value: f64, level: usize, scale: f64) -> Result<Plaintext, CkksError> {
        self.check_level(level)?;
        check_scale(scale)?;
        let k = round_coeffs(&[value * scale])?[0];
        let mut ints = vec![0i128; self.n()];
        ints[0] = k;
        let coeffs = self.lift_signed_wide(&ints, &self.active_primes(level));
        Ok(self.finish_plaintext(coeffs, level, scale, Some(k)))
    }

    /// Decodes all `N/2` slots.
    pub fn decode(&self, pt: &Plaintext) -> Vec<f64> {
        self.decode_poly(&pt.coeffs, pt.scale)
    }

    fn decode_poly(&self, poly: &RnsPoly, scale: f64) -> Vec<f64> {
        let ints = self.crt_centered(poly);
        let real: Vec<f64> = ints.iter().map(|&c| c as f64).collect();
        self.encoder().embed(&real, scale)
    }

    /// Public-key encryption. The randomness is drawn over the chain and the
    /// key-switching prime `P`, the message is scaled by `P`, and the result is
    /// divided by `P`; this shrinks the `u*e` term to a rounding error.
    pub fn encrypt<R: Rng + ?Sized>(&self, pk: &PublicKey, pt: &Plaintext, rng: &mut R) -> Result<Ciphertext, CkksError> {
        self.check_fingerprint(pk.fingerprint, "public key")?;
        let level = pt.level;
        let mut ids = self.active_primes(level);
        let sp = self.special_id();
        ids.push(sp);
        let n = self.n();
        let mut u = self.lift_signed(&sample_ternary(n, rng), &ids);
        self.ntt_forward(&mut u);
        let mut c0 = self.mul_ntt(&u, &pk.b.select(&ids));
        let mut c1 = self.mul_ntt(&u, &pk.a.select(&ids));
        self.ntt_inverse(&mut c0);
        self.ntt_inverse(&mut c1);
        self.add_assign(&mut c0, &self.lift_signed(&sample_gaussian(n, rng), &ids));
        self.add_assign(&mut c1, &self.lift_signed(&sample_gaussian(n, rng), &ids));
        let p = self.special_prime();
        for (k, &id) in ids.iter().enumerate() {
            if id == sp {
                continue;
            }
            let m = *self.modulus(id);
            let pm = m.reduce(p);
            let pms = m.shoup(pm);
            let msg = pt.coeffs.component(k);
            for (x, &v) in c0.component_mut(k).iter_mut().zip(msg) {
                *x = m.add(*x, m.mul_shoup(v, pm, pms));
            }
        }
        let c0 = self.drop_and_round(&c0, sp);
        let c1 = self.drop_and_round(&c1, sp);
        Ok(Ciphertext { c0, c1, level, scale: pt.scale })
    }

    /// Secret-key encryption: `(-a*s + e + m, a)`. Only the key owner can use
    /// it; the fresh noise is a single Gaussian term.
    pub fn encrypt_symmetric<R: Rng + ?Sized>(
        &self,
        sk: &SecretKey,
        pt: &Plaintext,
        rng: &mut R,
    ) -> Result<Ciphertext, CkksError> {
        self.check_fingerprint(sk.fingerprint, "secret key")?;
        let ids = self.active_primes(pt.level);
        let a_ntt = sample_uniform(self, &ids, rng);
        let mut c0 = self.mul_ntt(&a_ntt, &sk.ntt.select(&ids));
        self.ntt_inverse(&mut c0);
        self.neg_assign(&mut c0);
        self.add_assign(&mut c0, &self.lift_signed(&sample_gaussian(self.n(), rng), &ids));
        self.add_assign(&mut c0, &pt.coeffs);
        let mut c1 = a_ntt;
        self.ntt_inverse(&mut c1);
        Ok(Ciphertext { c0, c1, level: pt.level, scale: pt.scale })
    }

    /// Returns the noisy plaintext `c0 + c1*s`.
    pub fn decrypt_to_plaintext(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<Plaintext, CkksError> {
        self.check_fingerprint(sk.fingerprint, "secret key")?;
        self.check_ct(ct)?;
        let ids = self.active_primes(ct.level);
        let mut t = ct.c1.clone();
        self.ntt_forward(&mut t);
        self.mul_ntt_assign(&mut t, &sk.ntt.select(&ids));
        self.ntt_inverse(&mut t);
        self.add_assign(&mut t, &ct.c0);
        Ok(self.finish_plaintext(t, ct.level, ct.scale, None))
    }

    /// Decrypts and decodes all `N/2` slots. A wrong key yields garbage,
    /// not an error.
    pub fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<Vec<f64>, CkksError> {
        let pt = self.decrypt_to_plaintext(sk, ct)?;
        Ok(self.decode_poly(&pt.coeffs, pt.scale))
    }

    fn check_binary(&self, a: &Ciphertext, level: usize, scale: f64) -> Result<(), CkksError> {
        if a.level != level {
            return Err(CkksError::LevelMismatch { left: a.level, right: level });
        }
        if !scales_match(a.scale, scale) {
            return Err(CkksError::ScaleMismatch { left: a.scale, right: scale });
        }
        Ok(())
    }

    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CkksError> {
        let mut out = a.clone();
        self.add_assign_ct(&mut out, b)?;
        Ok(out)
    }

    pub fn add_assign_ct(&self, a: &mut Ciphertext, b: &Ciphertext) -> Result<(), CkksError> {
        self.check_ct(a)?;
        self.check_binary(a, b.level, b.scale)?;
        self.add_assign(&mut a.c0, &b.c0);
        self.add_assign(&mut a.c1, &b.c1);
        Ok(())
    }

    pub fn sub(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CkksError> {
        self.check_ct(a)?;
        self.check_binary(a, b.level, b.scale)?;
        let mut out = a.clone();
        self.sub_assign(&mut out.c0, &b.c0);
        self.sub_assign(&mut out.c1, &b.c1);
        Ok(out)
    }

    pub fn add_plain(&self, a: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext, CkksError> {
        self.check_ct(a)?;
        self.check_binary(a, pt.level, pt.scale)?;
        let mut out = a.clone();
        self.add_assign(&mut out.c0, &pt.coeffs);
        Ok(out)
    }

    pub fn sub_plain(&self, a: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext, CkksError> {
        self.check_ct(a)?;
        self.check_binary(a, pt.level, pt.scale)?;
        let mut out = a.clone();
        self.sub_assign(&mut out.c0, &pt.coeffs);
        Ok(out)
    }

    /// Ciphertext-plaintext product without rescaling. The result has scale
    /// `ct.scale * pt.scale` at the same level.
    pub fn mul_plain(&self, ct: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext, CkksError> {
        self.check_ct(ct)?;
        if ct.level != pt.level {
            return Err(CkksError::LevelMismatch { left: ct.level, right: pt.level });
        }
        let mut out = ct.clone();
        out.scale = ct.scale * pt.scale;
        match pt.constant {
            Some(k) => {
                self.mul_scalar_assign(&mut out.c0, k);
                self.mul_scalar_assign(&mut out.c1, k);
            }
            None => {
                for c in [&mut out.c0, &mut out.c1] {
                    self.ntt_forward(c);
                    self.mul_ntt_assign(c, &pt.ntt);
                    self.ntt_inverse(c);
                }
            }
        }
        Ok(out)
    }

    /// `Σ_i round(w_i·weight_scale)·ct_i` without rescaling. All inputs must
    /// share level and scale; the result has scale `ct.scale * weight_scale`.
    pub fn linear_combination(&self, cts: &[&Ciphertext], weights: &[f64], weight_scale: f64) -> Result<Ciphertext, CkksError> {
        let first = self.check_batch(cts)?;
        if weights.len() != cts.len() {
            return Err(CkksError::InvalidValue(format!("{} weights for {} ciphertexts", weights.len(), cts.len())));
        }
        check_scale(weight_scale)?;
        let scaled: Vec<f64> = weights.iter().map(|w| w * weight_scale).collect();
        let ints = round_coeffs(&scaled)?;
        let n = self.n();
        let ids = first.c0.prime_ids().to_vec();
        let comps = ids.len();
        let parts = par::map_range(2 * comps, |j| {
            let (poly, k) = (j / comps, j % comps);
            let m = self.modulus(ids[k]);
            let mut acc = vec![0u64; n];
            for (ct, &w) in cts.iter().zip(&ints) {
                let w = m.reduce_i128(w);
                if w == 0 {
                    continue;
                }
                let ws = m.shoup(w);
                let src = if poly == 0 { ct.c0.component(k) } else { ct.c1.component(k) };
                for (a, &x) in acc.iter_mut().zip(src) {
                    *a = m.add(*a, m.mul_shoup(x, w, ws));
                }
            }
            acc
        });
        let (c0, c1) = parts.split_at(comps);
        Ok(Ciphertext {
            c0: RnsPoly::from_parts(n, ids.clone(), c0.concat()),
            c1: RnsPoly::from_parts(n, ids, c1.concat()),
            level: first.level,
            scale: first.scale * weight_scale,
        })
    }

    /// `Σ_i ct_i ⊙ pt_i` without rescaling, with one inverse NTT per
    /// component. Plaintexts must share level and scale with each other, and
    /// ciphertexts likewise; the result has scale `ct.scale * pt.scale`.
    pub fn dot_plain(&self, cts: &[&Ciphertext], pts: &[&Plaintext]) -> Result<Ciphertext, CkksError> {
        let first = self.check_batch(cts)?;
        if pts.len() != cts.len() {
            return Err(CkksError::InvalidValue(format!("{} plaintexts for {} ciphertexts", pts.len(), cts.len())));
        }
        let pscale = pts[0].scale;
        for pt in pts {
            if pt.level != first.level {
                return Err(CkksError::LevelMismatch { left: first.level, right: pt.level });
            }
            if !scales_match(pt.scale, pscale) {
                return Err(CkksError::ScaleMismatch { left: pscale, right: pt.scale });
            }
        }
        let n = self.n();
        let ids = first.c0.prime_ids().to_vec();
        let comps = ids.len();
        let parts = par::map_range(2 * comps, |j| {
            let (poly, k) = (j / comps, j % comps);
            let m = self.modulus(ids[k]);
            let table = self.table(ids[k]);
            let mut acc = vec![0u64; n];
            let mut tmp = vec![0u64; n];
            for (ct, pt) in cts.iter().zip(pts) {
                tmp.copy_from_slice(if poly == 0 { ct.c0.component(k) } else { ct.c1.component(k) });
                table.forward(&mut tmp);
                for ((a, &x), &y) in acc.iter_mut().zip(&tmp).zip(pt.ntt.component(k)) {
                    *a = m.add(*a, m.mul(x, y));
                }
            }
            table.inverse(&mut acc);
            acc
        });
        let (c0, c1) = parts.split_at(comps);
        Ok(Ciphertext {
            c0: RnsPoly::from_parts(n, ids.clone(), c0.concat()),
            c1: RnsPoly::from_parts(n, ids, c1.concat()),
            level: first.level,
            scale: first.scale * pscale,
        })
    }

    fn check_batch<'a>(&self, cts: &[&'a Ciphertext]) -> Result<&'a Ciphertext, CkksError> {
        let first = *cts.first().ok_or_else(|| CkksError::InvalidValue("empty ciphertext list".into()))?;
        for ct in cts {
            self.check_ct(ct)?;
            self.check_binary(first, ct.level, ct.scale)?;
        }
        Ok(first)
    }

    /// Divides by the next middle prime and moves one level down the chain.
    pub fn rescale(&self, ct: &Ciphertext) -> Result<Ciphertext, CkksError> {
        self.check_ct(ct)?;
        if ct.level + 2 > self.max_level() {
            return Err(CkksError::DepthExhausted { level: ct.level });
        }
        let d = self.dropped_prime(ct.level);
        let q = self.modulus(d).value() as f64;
        Ok(Ciphertext {
            c0: self.drop_and_round(&ct.c0, d),
            c1: self.drop_and_round(&ct.c1, d),
            level: ct.level + 1,
            scale: ct.scale / q,
        })
    }

    /// `rescale(mul_plain(ct, pt))`; needs one middle prime left.
    pub fn mul_plain_rescale(&self, ct: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext, CkksError> {
        self.check_ct(ct)?;
        if ct.level + 2 > self.max_level() {
            return Err(CkksError::DepthExhausted { level: ct.level });
        }
        self.rescale(&self.mul_plain(ct, pt)?)
    }

    /// Drops primes down to `target` without changing the scale.
    pub fn mod_switch(&self, ct: &Ciphertext, target: usize) -> Result<Ciphertext, CkksError> {
        self.check_ct(ct)?;
        self.check_level(target)?;
        if target < ct.level {
            return Err(CkksError::Level { requested: target, max: self.max_level() });
        }
        let ids = self.active_primes(target);
        Ok(Ciphertext { c0: ct.c0.select(&ids), c1: ct.c1.select(&ids), level: target, scale: ct.scale })
    }

    pub fn mod_switch_plain(&self, pt: &Plaintext, target: usize) -> Result<Plaintext, CkksError> {
        self.check_level(target)?;
        if target < pt.level {
            return Err(CkksError::Level { requested: target, max: self.max_level() });
        }
        let ids = self.active_primes(target);
        Ok(Plaintext {
            coeffs: pt.coeffs.select(&ids),
            ntt: pt.ntt.select(&ids),
            level: target,
            scale: pt.scale,
            constant: pt.constant,
        })
    }

    /// Hybrid key switching of `c1` (coefficient form, key for `s'`) back to
    /// the secret `s`. Returns `(d0, d1)` with `d0 + d1*s ≈ c1*s'`.
    fn key_switch(&self, c1: &RnsPoly, key: &RotationKey) -> (RnsPoly, RnsPoly) {
        let n = self.n();
        let sp = self.special_id();
        let active = c1.prime_ids().to_vec();
        let mut targets = active.clone();
        targets.push(sp);
        let digits: Vec<Vec<i64>> = active
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                let m = self.modulus(id);
                c1.component(k).iter().map(|&x| m.center(x)).collect()
            })
            .collect();
        // each target prime accumulates independently
        let parts: Vec<(Vec<u64>, Vec<u64>)> = par::map_slice(&targets, |&t| {
            let m = *self.modulus(t);
            let mut acc0 = vec![0u64; n];
            let mut acc1 = vec![0u64; n];
            let mut tmp = vec![0u64; n];
            for (d, &i) in digits.iter().zip(&active) {
                for (x, &v) in tmp.iter_mut().zip(d) {
                    *x = m.reduce_i64(v);
                }
                self.table(t).forward(&mut tmp);
                let (kb, ka) = &key.digits[i];
                let kb = kb.component_for(t);
                let ka = ka.component_for(t);
                for j in 0..n {
                    acc0[j] = m.add(acc0[j], m.mul(tmp[j], kb[j]));
                    acc1[j] = m.add(acc1[j], m.mul(tmp[j], ka[j]));
                }
            }
            self.table(t).inverse(&mut acc0);
            self.table(t).inverse(&mut acc1);
            (acc0, acc1)
        });
        let mut d0 = Vec::with_capacity(n * targets.len());
        let mut d1 = Vec::with_capacity(n * targets.len());
        for (a, b) in parts {
            d0.extend(a);
            d1.extend(b);
        }
        let d0 = RnsPoly::from_parts(n, targets.clone(), d0);
        let d1 = RnsPoly::from_parts(n, targets, d1);
        (self.drop_and_round(&d0, sp), self.drop_and_round(&d1, sp))
    }

    fn rotate_pow2(&self, ct: &Ciphertext, key: &RotationKey) -> Ciphertext {
        let c0 = self.automorphism(&ct.c0, key.galois);
        let c1 = self.automorphism(&ct.c1, key.galois);
        let (mut d0, d1) = self.key_switch(&c1, key);
        self.add_assign(&mut d0, &c0);
        Ciphertext { c0: d0, c1: d1, level: ct.level, scale: ct.scale }
    }

    /// Rotates slots left by `steps` (taken modulo `N/2`) as a sequence of
    /// power-of-two rotations.
    pub fn rotate(&self, ct: &Ciphertext, steps: usize, keys: &RotationKeySet) -> Result<Ciphertext, CkksError> {
        self.check_ct(ct)?;
        self.check_fingerprint(keys.fingerprint, "rotation keys")?;
        let mut r = steps % self.slots();
        let mut out = ct.clone();
        let mut bit = 1;
        while r > 0 {
            if r & 1 == 1 {
                let key = keys.get(bit).ok_or(CkksError::MissingRotationKey(bit))?;
                out = self.rotate_pow2(&out, key);
            }
            r >>= 1;
            bit <<= 1;
        }
        Ok(out)
    }

    /// Slot 0 of the result holds the sum of slots `0..n_slots`. The count is
    /// padded to the next power of two, so slots `n_slots..next_pow2` of the
    /// input must be zero. Other output slots hold partial sums.
    ///
    /// Each rotation adds key-switching rounding noise that does not depend on
    /// the scale. When the input scale is low, the ciphertext is first
    /// multiplied by an exact power of two (no level consumed), so that noise
    /// becomes negligible. The result scale is `ct.scale * 2^k`, see
    /// [`CkksContext::slot_sum_boost_bits`].
    pub fn slot_sum(&self, ct: &Ciphertext, n_slots: usize, keys: &RotationKeySet) -> Result<Ciphertext, CkksError> {
        self.check_ct(ct)?;
        if n_slots == 0 || n_slots > self.slots() {
            return Err(CkksError::InvalidValue(format!("slot_sum over {n_slots} slots")));
        }
        let width = n_slots.next_power_of_two();
        let mut acc = ct.clone();
        let bits = self.slot_sum_boost_bits(ct);
        if width > 1 && bits > 0 {
            self.mul_scalar_assign(&mut acc.c0, 1i128 << bits);
            self.mul_scalar_assign(&mut acc.c1, 1i128 << bits);
            acc.scale *= (1u64 << bits) as f64;
        }
        let mut step = 1;
        while step < width {
            let rotated = self.rotate(&acc, step, keys)?;
            self.add_assign_ct(&mut acc, &rotated)?;
            step <<= 1;
        }
        Ok(acc)
    }

    /// Power of two applied by [`CkksContext::slot_sum`] before rotating:
    /// raises the scale towards 2^31, keeping 2^20 of headroom below the
    /// decryption modulus.
    pub fn slot_sum_boost_bits(&self, ct: &Ciphertext) -> u32 {
        let ids = self.active_primes(ct.level);
        let mut bound = (self.modulus(ids[0]).value() as f64).log2();
        if ids.len() > 1 {
            bound += (self.modulus(*ids.last().unwrap()).value() as f64).log2();
        }
        let target = SLOT_SUM_TARGET_LOG2.min(bound - 20.0);
        (target - ct.scale.log2()).floor().clamp(0.0, 40.0) as u32
    }
}

fn check_scale(scale: f64) -> Result<(), CkksError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(CkksError::InvalidValue(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

fn round_coeffs(real: &[f64]) -> Result<Vec<i128>, CkksError> {
    const LIMIT: f64 = 1.7e38; // just under i128::MAX
    real.iter()
        .map(|&c| {
            if c.is_finite() && c.abs() < LIMIT {
                Ok(c.round() as i128)
            } else {
                Err(CkksError::InvalidValue(format!("scaled coefficient {c} out of range")))
            }
        })
        .collect()
}
