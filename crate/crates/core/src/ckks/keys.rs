use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::context::CkksContext;
use super::poly::RnsPoly;

/// Standard deviation of the discrete Gaussian error.
pub const ERROR_STD: f64 = 3.2;
const ERROR_BOUND: i64 = 19; // about 6 sigma

/// Ternary secret. Kept in NTT form over every prime, including the
/// key-switching prime.
#[derive(Clone, Debug)]
pub struct SecretKey {
    pub(crate) coeffs: Vec<i64>,
    pub(crate) ntt: RnsPoly,
    pub(crate) fingerprint: u64,
}

/// `(b, a)` with `b = -a*s + e` over the chain and the key-switching prime,
/// stored in NTT form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    pub(crate) b: RnsPoly,
    pub(crate) a: RnsPoly,
    pub(crate) fingerprint: u64,
}

/// Key-switching key for one Galois rotation: one `(b, a)` pair per chain
/// prime digit, NTT form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RotationKey {
    pub(crate) step: usize,
    pub(crate) galois: usize,
    pub(crate) digits: Vec<(RnsPoly, RnsPoly)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RotationKeySet {
    pub(crate) keys: BTreeMap<usize, RotationKey>,
    pub(crate) fingerprint: u64,
}

impl RotationKeySet {
    pub fn steps(&self) -> Vec<usize> {
        self.keys.keys().copied().collect()
    }

    pub fn get(&self, step: usize) -> Option<&RotationKey> {
        self.keys.get(&step)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keeps only the keys for steps below `limit`.
    pub fn restricted(&self, limit: usize) -> RotationKeySet {
        RotationKeySet {
            keys: self.keys.iter().filter(|(&s, _)| s < limit).map(|(&s, k)| (s, k.clone())).collect(),
            fingerprint: self.fingerprint,
        }
    }
}

impl SecretKey {
    pub fn coeffs(&self) -> &[i64] {
        &self.coeffs
    }
}

#[derive(Clone, Debug)]
pub struct KeySet {
    pub secret: SecretKey,
    pub public: PublicKey,
    pub rotation: RotationKeySet,
}

pub(crate) fn sample_ternary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i64> {
    (0..n).map(|_| rng.random_range(-1i64..=1)).collect()
}

pub(crate) fn sample_gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i64> {
    let normal = Normal::new(0.0, ERROR_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let x = normal.sample(rng).round() as i64;
            if x.abs() <= ERROR_BOUND {
                break x;
            }
        })
        .collect()
}

/// Uniform polynomial; uniform in either domain, so used directly as NTT form.
pub(crate) fn sample_uniform<R: Rng + ?Sized>(ctx: &CkksContext, ids: &[usize], rng: &mut R) -> RnsPoly {
    let n = ctx.n();
    let mut p = RnsPoly::zero(n, ids);
    for (k, &id) in ids.iter().enumerate() {
        let q = ctx.modulus(id).value();
        for x in p.component_mut(k) {
            *x = rng.random_range(0..q);
        }
    }
    p
}

fn all_ids(ctx: &CkksContext) -> Vec<usize> {
    (0..=ctx.chain_len()).collect()
}

/// Gadget key encrypting `target` (NTT form, all primes) under `sk`: digit
/// `i` carries `P * target` in component `i` only.
fn switching_key<R: Rng + ?Sized>(ctx: &CkksContext, sk: &SecretKey, target: &RnsPoly, rng: &mut R) -> Vec<(RnsPoly, RnsPoly)> {
    let ids = all_ids(ctx);
    let p = ctx.special_prime();
    (0..ctx.chain_len())
        .map(|i| {
            let a = sample_uniform(ctx, &ids, rng);
            let mut e = ctx.lift_signed(&sample_gaussian(ctx.n(), rng), &ids);
            ctx.ntt_forward(&mut e);
            let mut b = ctx.mul_ntt(&a, &sk.ntt);
            ctx.neg_assign(&mut b);
            ctx.add_assign(&mut b, &e);
            let m = *ctx.modulus(i);
            let pm = m.reduce(p);
            let pms = m.shoup(pm);
            for (x, &t) in b.component_mut(i).iter_mut().zip(target.component(i)) {
                *x = m.add(*x, m.mul_shoup(t, pm, pms));
            }
            (b, a)
        })
        .collect()
}

/// Deterministic key generation from a 64-bit seed. Produces rotation keys
/// for every power-of-two step below the slot count.
pub fn keygen(ctx: &CkksContext, seed: u64) -> KeySet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = ctx.n();
    let ids = all_ids(ctx);
    let coeffs = sample_ternary(n, &mut rng);
    let mut s_ntt = ctx.lift_signed(&coeffs, &ids);
    ctx.ntt_forward(&mut s_ntt);
    let secret = SecretKey { coeffs, ntt: s_ntt, fingerprint: ctx.fingerprint() };

    let a = sample_uniform(ctx, &ids, &mut rng);
    let mut e = ctx.lift_signed(&sample_gaussian(n, &mut rng), &ids);
    ctx.ntt_forward(&mut e);
    let mut b = ctx.mul_ntt(&a, &secret.ntt);
    ctx.neg_assign(&mut b);
    ctx.add_assign(&mut b, &e);
    let public = PublicKey { b, a, fingerprint: ctx.fingerprint() };

    let enc = ctx.encoder();
    let mut keys = BTreeMap::new();
    let mut step = 1;
    while step < ctx.slots() {
        let galois = enc.galois_element(step);
        let s_coeff = ctx.lift_signed(&secret.coeffs, &ids);
        let mut rotated = ctx.automorphism(&s_coeff, galois);
        ctx.ntt_forward(&mut rotated);
        // one independent stream per key keeps generation order-insensitive
        let mut key_rng = ChaCha20Rng::seed_from_u64(rng.next_u64());
        let digits = switching_key(ctx, &secret, &rotated, &mut key_rng);
        keys.insert(step, RotationKey { step, galois, digits });
        step <<= 1;
    }
    KeySet { secret, public, rotation: RotationKeySet { keys, fingerprint: ctx.fingerprint() } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckks::CkksParams;

    #[test]
    fn rotation_steps_are_powers_of_two_below_slots() {
        let ctx = CkksContext::new(CkksParams::tiny()).unwrap();
        let ks = keygen(&ctx, 7);
        assert_eq!(ks.rotation.steps(), vec![1, 2, 4]);
        let ctx = CkksContext::new(CkksParams::toy()).unwrap();
        let ks = keygen(&ctx, 7);
        assert_eq!(ks.rotation.steps(), vec![1, 2, 4, 8, 16, 32, 64]);
        assert_eq!(ks.rotation.restricted(8).steps(), vec![1, 2, 4]);
    }

    #[test]
    fn keygen_is_deterministic() {
        let ctx = CkksContext::new(CkksParams::tiny()).unwrap();
        let a = keygen(&ctx, 42);
        let b = keygen(&ctx, 42);
        let c = keygen(&ctx, 43);
        assert_eq!(a.secret.coeffs, b.secret.coeffs);
        assert_eq!(a.public, b.public);
        assert_eq!(a.rotation, b.rotation);
        assert_ne!(a.public, c.public);
    }

    #[test]
    fn public_key_relation_holds() {
        let ctx = CkksContext::new(CkksParams::tiny()).unwrap();
        let ks = keygen(&ctx, 1);
        // b + a*s = e must be small in every component
        let mut t = ctx.mul_ntt(&ks.public.a, &ks.secret.ntt);
        ctx.add_assign(&mut t, &ks.public.b);
        ctx.ntt_inverse(&mut t);
        for k in 0..t.num_components() {
            let m = ctx.modulus(t.prime_ids()[k]);
            assert!(t.component(k).iter().all(|&c| m.center(c).abs() <= ERROR_BOUND));
        }
    }

    #[test]
    fn error_samples_are_bounded_and_centered() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let e = sample_gaussian(20000, &mut rng);
        assert!(e.iter().all(|x| x.abs() <= ERROR_BOUND));
        let mean = e.iter().sum::<i64>() as f64 / e.len() as f64;
        let var = e.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / e.len() as f64;
        assert!(mean.abs() < 0.1);
        assert!((var.sqrt() - ERROR_STD).abs() < 0.15);
    }
}
