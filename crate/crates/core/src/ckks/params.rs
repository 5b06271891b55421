use serde::{Deserialize, Serialize};

use super::modarith::{is_prime, ntt_primes};
use super::CkksError;

/// Ring degree, RNS prime chain and scaling factor of a CKKS instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkksParams {
    pub ring_degree: usize,
    pub prime_chain: Vec<u64>,
    /// Scaling factor Δ, a power of two.
    pub scale: u64,
    /// Informational only; never used for computation.
    pub security_note: String,
}

/// Named parameter profiles selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeSet {
    S1,
    S2,
    Toy,
}

impl HeSet {
    pub fn params(self) -> CkksParams {
        match self {
            HeSet::S1 => CkksParams::s1(),
            HeSet::S2 => CkksParams::s2(),
            HeSet::Toy => CkksParams::toy(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeSet::S1 => "s1",
            HeSet::S2 => "s2",
            HeSet::Toy => "toy",
        }
    }
}

impl std::str::FromStr for HeSet {
    type Err = CkksError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(HeSet::S1),
            "s2" => Ok(HeSet::S2),
            "toy" => Ok(HeSet::Toy),
            other => Err(CkksError::Params(format!("unknown HE parameter set '{other}'"))),
        }
    }
}

impl CkksParams {
    pub fn new(
        ring_degree: usize,
        prime_chain: Vec<u64>,
        scale: u64,
        security_note: impl Into<String>,
    ) -> Result<Self, CkksError> {
        let params = Self { ring_degree, prime_chain, scale, security_note: security_note.into() };
        params.validate()?;
        Ok(params)
    }

    /// Builds a chain by picking, for every requested bit size, the largest
    /// unused NTT-friendly primes of that size.
    pub fn from_bit_sizes(
        ring_degree: usize,
        bit_sizes: &[u32],
        log_scale: u32,
        security_note: impl Into<String>,
    ) -> Result<Self, CkksError> {
        if !ring_degree.is_power_of_two() || ring_degree < 8 {
            return Err(CkksError::Params(format!("ring degree {ring_degree} is not a power of two >= 8")));
        }
        let mut chain = Vec::with_capacity(bit_sizes.len());
        for &bits in bit_sizes {
            if !(2..=61).contains(&bits) {
                return Err(CkksError::Params(format!("prime bit size {bits} outside [2, 61]")));
            }
            let p = ntt_primes(bits, ring_degree, 1, &chain);
            match p.first() {
                Some(&p) => chain.push(p),
                None => {
                    return Err(CkksError::Params(format!("no {bits}-bit prime congruent to 1 mod {} left", 2 * ring_degree)))
                }
            }
        }
        Self::new(ring_degree, chain, 1u64 << log_scale, security_note)
    }

    /// N = 2^13, chain bits [40, 21, 21, 21, 40], Δ = 2^21.
    pub fn s1() -> Self {
        Self::from_bit_sizes(8192, &[40, 21, 21, 21, 40], 21, "S1: N=2^13, C=[40,21,21,21,40], scale 2^21")
            .expect("S1 parameters are valid")
    }

    /// N = 2^14, chain bits [40, 21, 21, 21, 40], Δ = 2^21.
    pub fn s2() -> Self {
        Self::from_bit_sizes(16384, &[40, 21, 21, 21, 40], 21, "S2: N=2^14, C=[40,21,21,21,40], scale 2^21")
            .expect("S2 parameters are valid")
    }

    /// Same chain shape as S1 on a 256-degree ring. Insecure; for fast runs.
    pub fn toy() -> Self {
        Self::from_bit_sizes(256, &[40, 21, 21, 21, 40], 21, "toy: N=2^8, C=[40,21,21,21,40], scale 2^21, NOT SECURE")
            .expect("toy parameters are valid")
    }

    /// N = 16 with primes {65537, 114689} and Δ = 2^6. Small enough for
    /// brute-force oracles; supports no multiplication.
    pub fn tiny() -> Self {
        Self::new(16, vec![65537, 114689], 1 << 6, "tiny: N=16, two primes, NOT SECURE").expect("tiny parameters are valid")
    }

    pub fn slots(&self) -> usize {
        self.ring_degree / 2
    }

    pub fn chain_len(&self) -> usize {
        self.prime_chain.len()
    }

    /// Highest level a ciphertext can reach (one prime left).
    pub fn max_level(&self) -> usize {
        self.prime_chain.len() - 1
    }

    pub fn validate(&self) -> Result<(), CkksError> {
        let n = self.ring_degree;
        if !n.is_power_of_two() || n < 8 {
            return Err(CkksError::Params(format!("ring degree {n} is not a power of two >= 8")));
        }
        if self.prime_chain.len() < 2 {
            return Err(CkksError::Params("prime chain needs at least two primes".into()));
        }
        if self.prime_chain.len() > u16::MAX as usize {
            return Err(CkksError::Params("prime chain too long".into()));
        }
        let two_n = 2 * n as u64;
        for (i, &q) in self.prime_chain.iter().enumerate() {
            if q >= 1 << 61 {
                return Err(CkksError::Params(format!("prime {q} exceeds 61 bits")));
            }
            if !is_prime(q) {
                return Err(CkksError::Params(format!("{q} is not prime")));
            }
            if q % two_n != 1 {
                return Err(CkksError::Params(format!("prime {q} is not congruent to 1 mod {two_n}")));
            }
            if self.prime_chain[..i].contains(&q) {
                return Err(CkksError::Params(format!("prime {q} appears twice in the chain")));
            }
        }
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return Err(CkksError::Params(format!("scale {} is not a power of two", self.scale)));
        }
        let log_scale = (self.scale as f64).log2();
        let last = self.prime_chain.len() - 1;
        for &q in &self.prime_chain[1..last.max(1)] {
            if ((q as f64).log2() - log_scale).abs() > 1.0 {
                return Err(CkksError::Params(format!("middle prime {q} is not within one bit of the scale 2^{log_scale}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s1_chain_has_expected_bit_sizes() {
        let p = CkksParams::s1();
        let bits: Vec<u32> = p.prime_chain.iter().map(|q| 64 - q.leading_zeros()).collect();
        assert_eq!(bits, vec![40, 21, 21, 21, 40]);
        assert_eq!(p.scale, 1 << 21);
        assert_eq!(p.ring_degree, 8192);
        for q in &p.prime_chain {
            assert_eq!(q % 16384, 1);
        }
    }

    #[test]
    fn s2_chain_valid() {
        let p = CkksParams::s2();
        assert_eq!(p.ring_degree, 16384);
        assert_eq!(p.chain_len(), 5);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(CkksParams::new(12, vec![65537, 114689], 64, "").is_err());
        assert!(CkksParams::new(16, vec![65537, 65537], 64, "").is_err());
        // 113 is prime but 112 is not divisible by 32
        assert!(CkksParams::new(16, vec![65537, 113], 64, "").is_err());
        assert!(CkksParams::new(16, vec![65537, 114689], 48, "").is_err());
        // middle prime two bits away from the scale
        let chain = vec![65537, 114689, 163841];
        assert!(CkksParams::new(16, chain.clone(), 1 << 14, "").is_err());
        assert!(CkksParams::new(16, chain, 1 << 17, "").is_ok());
    }

    #[test]
    fn he_set_parses() {
        assert_eq!("S1".parse::<HeSet>().unwrap(), HeSet::S1);
        assert_eq!("toy".parse::<HeSet>().unwrap(), HeSet::Toy);
        assert!("s3".parse::<HeSet>().is_err());
    }
}
