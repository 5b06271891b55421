//! Little-endian byte layouts for ciphertexts and the public context.
//!
//! Ciphertext: `"CKC1" | version u16 | level u16 | scale f64 | num_primes u16 |
//! c0 | c1`, each polynomial as `num_primes` arrays of `N` u64 words
//! (coefficient form).
//!
//! Public context: `"CKX1" | N u32 | prime count u16 | primes u64[] | scale u64 |
//! special prime u64 | note len u16 | note utf8 | pk.b | pk.a | key count u16 |
//! per key: step u32, galois u32, digit count u16, then (b, a) per digit`.
//! Key polynomials span the chain and the special prime and are stored in NTT
//! form. There is no secret-key section in this layout.

use std::collections::BTreeMap;

use super::context::CkksContext;
use super::keys::{PublicKey, RotationKey, RotationKeySet, SecretKey};
use super::ops::Ciphertext;
use super::params::CkksParams;
use super::poly::RnsPoly;
use super::CkksError;

pub const CT_MAGIC: &[u8; 4] = b"CKC1";
pub const CT_VERSION: u16 = 1;
pub const CT_HEADER_LEN: usize = 18;
pub const CTX_MAGIC: &[u8; 4] = b"CKX1";
/// Tag of the (local-only) secret-key layout.
pub const SK_MAGIC: &[u8; 4] = b"CKS1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CkksError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CkksError::Decode(format!("truncated input: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CkksError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CkksError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CkksError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CkksError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), CkksError> {
        if self.pos != self.buf.len() {
            return Err(CkksError::Decode(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_poly(out: &mut Vec<u8>, p: &RnsPoly) {
    for &w in p.data() {
        out.extend_from_slice(&w.to_le_bytes());
    }
}

fn read_poly(r: &mut Reader, ctx: &CkksContext, ids: &[usize]) -> Result<RnsPoly, CkksError> {
    let n = ctx.n();
    let mut data = Vec::with_capacity(n * ids.len());
    for &id in ids {
        let q = ctx.modulus(id).value();
        let raw = r.take(8 * n)?;
        for chunk in raw.chunks_exact(8) {
            let w = u64::from_le_bytes(chunk.try_into().unwrap());
            if w >= q {
                return Err(CkksError::Decode(format!("word {w} not reduced modulo {q}")));
            }
            data.push(w);
        }
    }
    Ok(RnsPoly::from_parts(n, ids.to_vec(), data))
}

/// Serialized size of a ciphertext with `num_primes` components.
pub fn ciphertext_len(n: usize, num_primes: usize) -> usize {
    CT_HEADER_LEN + 2 * n * num_primes * 8
}

pub fn serialize_ct(ct: &Ciphertext) -> Vec<u8> {
    let mut out = Vec::with_capacity(ciphertext_len(ct.c0.n(), ct.num_primes()));
    out.extend_from_slice(CT_MAGIC);
    out.extend_from_slice(&CT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ct.level as u16).to_le_bytes());
    out.extend_from_slice(&ct.scale.to_le_bytes());
    out.extend_from_slice(&(ct.num_primes() as u16).to_le_bytes());
    put_poly(&mut out, &ct.c0);
    put_poly(&mut out, &ct.c1);
    out
}

pub fn deserialize_ct(bytes: &[u8], ctx: &CkksContext) -> Result<Ciphertext, CkksError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CT_MAGIC {
        return Err(CkksError::Decode("bad ciphertext magic".into()));
    }
    let version = r.u16()?;
    if version != CT_VERSION {
        return Err(CkksError::Decode(format!("unsupported ciphertext version {version}")));
    }
    let level = r.u16()? as usize;
    let scale = r.f64()?;
    let num_primes = r.u16()? as usize;
    if level > ctx.max_level() {
        return Err(CkksError::Decode(format!("level {level} beyond chain")));
    }
    if num_primes != ctx.chain_len() - level {
        return Err(CkksError::Decode(format!("{num_primes} components at level {level}")));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(CkksError::Decode(format!("invalid scale {scale}")));
    }
    let ids = ctx.active_primes(level);
    let c0 = read_poly(&mut r, ctx, &ids)?;
    let c1 = read_poly(&mut r, ctx, &ids)?;
    r.finish()?;
    Ok(Ciphertext { c0, c1, level, scale })
}

/// Everything the server needs to evaluate: parameters, public key and
/// rotation keys.
#[derive(Clone, Debug)]
pub struct PublicContext {
    pub context: CkksContext,
    pub public_key: PublicKey,
    pub rotation_keys: RotationKeySet,
}

pub fn serialize_public_context(ctx: &CkksContext, pk: &PublicKey, rk: &RotationKeySet) -> Vec<u8> {
    let p = ctx.params();
    let mut out = Vec::new();
    out.extend_from_slice(CTX_MAGIC);
    out.extend_from_slice(&(p.ring_degree as u32).to_le_bytes());
    out.extend_from_slice(&(p.prime_chain.len() as u16).to_le_bytes());
    for q in &p.prime_chain {
        out.extend_from_slice(&q.to_le_bytes());
    }
    out.extend_from_slice(&p.scale.to_le_bytes());
    out.extend_from_slice(&ctx.special_prime().to_le_bytes());
    let note = p.security_note.as_bytes();
    let note = &note[..note.len().min(u16::MAX as usize)];
    out.extend_from_slice(&(note.len() as u16).to_le_bytes());
    out.extend_from_slice(note);
    put_poly(&mut out, &pk.b);
    put_poly(&mut out, &pk.a);
    out.extend_from_slice(&(rk.keys.len() as u16).to_le_bytes());
    for key in rk.keys.values() {
        out.extend_from_slice(&(key.step as u32).to_le_bytes());
        out.extend_from_slice(&(key.galois as u32).to_le_bytes());
        out.extend_from_slice(&(key.digits.len() as u16).to_le_bytes());
        for (b, a) in &key.digits {
            put_poly(&mut out, b);
            put_poly(&mut out, a);
        }
    }
    out
}

pub fn deserialize_public_context(bytes: &[u8]) -> Result<PublicContext, CkksError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CTX_MAGIC {
        return Err(CkksError::Decode("bad public-context magic".into()));
    }
    let n = r.u32()? as usize;
    let count = r.u16()? as usize;
    let mut chain = Vec::with_capacity(count);
    for _ in 0..count {
        chain.push(r.u64()?);
    }
    let scale = r.u64()?;
    let special = r.u64()?;
    let note_len = r.u16()? as usize;
    let note =
        String::from_utf8(r.take(note_len)?.to_vec()).map_err(|_| CkksError::Decode("security note is not UTF-8".into()))?;
    let params = CkksParams::new(n, chain, scale, note).map_err(|e| CkksError::Decode(e.to_string()))?;
    let ctx = CkksContext::new(params)?;
    if ctx.special_prime() != special {
        return Err(CkksError::Decode(format!("special prime {special} does not match {}", ctx.special_prime())));
    }
    let all: Vec<usize> = (0..=ctx.chain_len()).collect();
    let b = read_poly(&mut r, &ctx, &all)?;
    let a = read_poly(&mut r, &ctx, &all)?;
    let public_key = PublicKey { b, a, fingerprint: ctx.fingerprint() };
    let key_count = r.u16()? as usize;
    let mut keys = BTreeMap::new();
    for _ in 0..key_count {
        let step = r.u32()? as usize;
        let galois = r.u32()? as usize;
        let digits_len = r.u16()? as usize;
        if digits_len != ctx.chain_len() {
            return Err(CkksError::Decode(format!("rotation key with {digits_len} digits")));
        }
        if galois != ctx.encoder().galois_element(step) {
            return Err(CkksError::Decode(format!("galois element {galois} does not match step {step}")));
        }
        let mut digits = Vec::with_capacity(digits_len);
        for _ in 0..digits_len {
            let kb = read_poly(&mut r, &ctx, &all)?;
            let ka = read_poly(&mut r, &ctx, &all)?;
            digits.push((kb, ka));
        }
        keys.insert(step, RotationKey { step, galois, digits });
    }
    r.finish()?;
    let rotation_keys = RotationKeySet { keys, fingerprint: ctx.fingerprint() };
    Ok(PublicContext { context: ctx, public_key, rotation_keys })
}

/// Secret-key layout for local storage only: `"CKS1" | N u32 | ternary i8[N]`.
pub fn serialize_secret_key(sk: &SecretKey) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + sk.coeffs.len());
    out.extend_from_slice(SK_MAGIC);
    out.extend_from_slice(&(sk.coeffs.len() as u32).to_le_bytes());
    out.extend(sk.coeffs.iter().map(|&c| c as i8 as u8));
    out
}

pub fn deserialize_secret_key(bytes: &[u8], ctx: &CkksContext) -> Result<SecretKey, CkksError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != SK_MAGIC {
        return Err(CkksError::Decode("bad secret-key magic".into()));
    }
    let n = r.u32()? as usize;
    if n != ctx.n() {
        return Err(CkksError::Decode(format!("secret key of degree {n}")));
    }
    let coeffs: Vec<i64> = r.take(n)?.iter().map(|&b| b as i8 as i64).collect();
    r.finish()?;
    if coeffs.iter().any(|c| c.abs() > 1) {
        return Err(CkksError::Decode("secret key is not ternary".into()));
    }
    let all: Vec<usize> = (0..=ctx.chain_len()).collect();
    let mut ntt = ctx.lift_signed(&coeffs, &all);
    ctx.ntt_forward(&mut ntt);
    Ok(SecretKey { coeffs, ntt, fingerprint: ctx.fingerprint() })
}
