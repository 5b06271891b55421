use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::ckks::{
    keygen, serialize_public_context, Ciphertext, CkksContext, HeSet, KeySet, Plaintext, PublicContext, PublicKey, RotationKeySet,
};
use crate::nn::model::layer_seed;
use crate::nn::{LinearLayer, Tensor};
use crate::par;

use super::packing::Packing;
use super::SplitError;

/// How the client encrypts its activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClientEncryption {
    /// Symmetric encryption under the secret key: same ciphertext format,
    /// about six times less fresh noise.
    #[default]
    Secret,
    /// Encryption under the public key.
    Public,
}

impl std::str::FromStr for ClientEncryption {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "secret" => Ok(ClientEncryption::Secret),
            "public" => Ok(ClientEncryption::Public),
            other => Err(format!("unknown encryption '{other}' (expected secret or public)")),
        }
    }
}

/// Scale of the gradient plaintext. Encoding `η·g` at `Δ/η` keeps the
/// integer magnitudes of `g` at `Δ`, so the learning rate costs no precision.
pub fn gradient_plain_scale(delta: f64, lr: f64) -> f64 {
    (delta / lr).clamp(delta, 2f64.powi(40))
}

fn rng_for(seed: u64, counter: u64, index: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(layer_seed(seed ^ counter.wrapping_mul(0x2545_f491_4f6c_dd1d), index))
}

/// Encrypted evaluation of the server's linear layer.
pub struct ServerHe {
    ctx: CkksContext,
    pk: PublicKey,
    rk: RotationKeySet,
    packing: Packing,
    lr: f64,
    seed: u64,
    counter: u64,
}

impl ServerHe {
    pub fn new(public: PublicContext, packing: Packing, lr: f64, seed: u64) -> Result<Self, SplitError> {
        if packing.slots != public.context.slots() {
            return Err(SplitError::Config("packing does not match the HE context".into()));
        }
        if packing.block > 1 && public.rotation_keys.get(packing.block / 2).is_none() {
            return Err(SplitError::Protocol(format!("public context lacks rotation keys up to {}", packing.block / 2)));
        }
        Ok(Self { ctx: public.context, pk: public.public_key, rk: public.rotation_keys, packing, lr, seed, counter: 0 })
    }

    pub fn context(&self) -> &CkksContext {
        &self.ctx
    }

    pub fn packing(&self) -> &Packing {
        &self.packing
    }

    fn check_acts(&self, acts: &[Ciphertext]) -> Result<(), SplitError> {
        if acts.len() != self.packing.features {
            return Err(SplitError::Protocol(format!(
                "expected {} activation ciphertexts, got {}",
                self.packing.features,
                acts.len()
            )));
        }
        if let Some(ct) = acts.iter().find(|c| c.level() != 0) {
            return Err(SplitError::Protocol(format!("activation ciphertext at level {}, expected 0", ct.level())));
        }
        Ok(())
    }

    /// One ciphertext per class: `Σ_f W[k,f]·ct_a[f]`, rescaled, plus `b[k]`.
    pub fn forward(&self, acts: &[Ciphertext], layer: &LinearLayer) -> Result<Vec<Ciphertext>, SplitError> {
        self.check_acts(acts)?;
        let refs: Vec<&Ciphertext> = acts.iter().collect();
        let delta = self.ctx.scale();
        par::try_map_range(self.packing.classes, |k| {
            let lc = self.ctx.linear_combination(&refs, layer.w.row(k), delta)?;
            let z = self.ctx.rescale(&lc)?;
            let bias = self.ctx.encode_constant(layer.b.data()[k], z.level(), z.scale())?;
            Ok(self.ctx.add_plain(&z, &bias)?)
        })
    }

    /// Encrypted `η·∂J/∂W`, one ciphertext per feature group; see [`Packing`].
    pub fn weight_gradient(&self, acts: &[Ciphertext], grad_al: &Tensor) -> Result<Vec<Ciphertext>, SplitError> {
        self.check_acts(acts)?;
        let p = self.packing;
        let scale = gradient_plain_scale(self.ctx.scale(), self.lr);
        let plains: Vec<Plaintext> = par::try_map_range(p.group, |j| -> Result<Plaintext, SplitError> {
            Ok(self.ctx.encode(&p.gradient_slots(grad_al, self.lr, j)?, 0, scale)?)
        })?;
        par::try_map_range(p.groups(), |g| {
            let range = p.group_features(g);
            let cts: Vec<&Ciphertext> = acts[range.clone()].iter().collect();
            let pts: Vec<&Plaintext> = plains[..range.len()].iter().collect();
            let prod = self.ctx.rescale(&self.ctx.dot_plain(&cts, &pts)?)?;
            Ok(self.ctx.slot_sum(&prod, p.block, &self.rk)?)
        })
    }

    /// Encrypts the masked weights at the scale and level of `pending` and
    /// subtracts the accumulated gradient.
    pub fn refresh(&mut self, pending: &[Ciphertext], masked: &Tensor) -> Result<Vec<Ciphertext>, SplitError> {
        let p = self.packing;
        if pending.len() != p.groups() {
            return Err(SplitError::Protocol(format!("{} pending gradients for {} groups", pending.len(), p.groups())));
        }
        self.counter += 1;
        let (seed, counter) = (self.seed, self.counter);
        par::try_map_range(p.groups(), |g| {
            let target = &pending[g];
            let pt = self.ctx.encode(&p.weight_slots(masked, g), 0, target.scale())?;
            let mut rng = rng_for(seed, counter, g);
            let fresh = self.ctx.encrypt(&self.pk, &pt, &mut rng)?;
            let fresh = self.ctx.mod_switch(&fresh, target.level())?;
            Ok(self.ctx.sub(&fresh, target)?)
        })
    }
}

/// The client's key material and packing.
pub struct ClientHe {
    ctx: CkksContext,
    keys: KeySet,
    packing: Packing,
    encryption: ClientEncryption,
    seed: u64,
    counter: u64,
}

impl ClientHe {
    pub fn new(
        he_set: HeSet,
        packing_for: impl FnOnce(usize) -> Result<Packing, SplitError>,
        key_seed: u64,
        encryption: ClientEncryption,
    ) -> Result<Self, SplitError> {
        let ctx = CkksContext::new(he_set.params())?;
        let packing = packing_for(ctx.slots())?;
        let keys = keygen(&ctx, key_seed);
        Ok(Self { ctx, keys, packing, encryption, seed: layer_seed(key_seed, 0xe7c), counter: 0 })
    }

    pub fn context(&self) -> &CkksContext {
        &self.ctx
    }

    pub fn keys(&self) -> &KeySet {
        &self.keys
    }

    pub fn packing(&self) -> &Packing {
        &self.packing
    }

    /// `CTX_PUB` body: parameters, public key and the rotation keys the
    /// slot sums need. The secret key is not part of this format.
    pub fn public_context(&self) -> Vec<u8> {
        serialize_public_context(&self.ctx, &self.keys.public, &self.keys.rotation.restricted(self.packing.block))
    }

    /// One level-0 ciphertext per feature column of `a` (`[rows, F]`).
    pub fn encrypt_activation(&mut self, a: &Tensor) -> Result<Vec<Ciphertext>, SplitError> {
        let (rows, f) = a.dims2()?;
        if f != self.packing.features || rows > self.packing.batch {
            return Err(SplitError::Config(format!("activation {:?} does not fit the packing", a.shape())));
        }
        self.counter += 1;
        let (seed, counter) = (self.seed, self.counter);
        let delta = self.ctx.scale();
        par::try_map_range(f, |j| {
            let pt = self.ctx.encode(&self.packing.activation_slots(&a.column(j)), 0, delta)?;
            let mut rng = rng_for(seed, counter, j);
            Ok(match self.encryption {
                ClientEncryption::Secret => self.ctx.encrypt_symmetric(&self.keys.secret, &pt, &mut rng)?,
                ClientEncryption::Public => self.ctx.encrypt(&self.keys.public, &pt, &mut rng)?,
            })
        })
    }

    fn decrypt_all(&self, cts: &[Ciphertext]) -> Result<Vec<Vec<f64>>, SplitError> {
        par::try_map_range(cts.len(), |i| {
            let v = self.ctx.decrypt(&self.keys.secret, &cts[i])?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SplitError::Precision(format!("ciphertext {i} decrypted to a non-finite value")));
            }
            Ok(v)
        })
    }

    pub fn decrypt_outputs(&self, cts: &[Ciphertext], rows: usize) -> Result<Tensor, SplitError> {
        self.packing.read_outputs(&self.decrypt_all(cts)?, rows)
    }

    pub fn decrypt_weights(&self, cts: &[Ciphertext]) -> Result<Tensor, SplitError> {
        self.packing.read_weights(&self.decrypt_all(cts)?)
    }
}
