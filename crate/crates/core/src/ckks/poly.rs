/// A ring element in RNS form: one length-`n` residue vector per prime.
///
/// `prime_ids` index the context's prime table (chain primes first, then the
/// key-switching prime). Whether the words are in coefficient or NTT form is
/// tracked by the owner, not here.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RnsPoly {
    n: usize,
    prime_ids: Vec<usize>,
    data: Vec<u64>,
}

impl RnsPoly {
    pub fn zero(n: usize, prime_ids: &[usize]) -> Self {
        Self { n, prime_ids: prime_ids.to_vec(), data: vec![0; n * prime_ids.len()] }
    }

    pub(crate) fn from_parts(n: usize, prime_ids: Vec<usize>, data: Vec<u64>) -> Self {
        assert_eq!(data.len(), n * prime_ids.len());
        Self { n, prime_ids, data }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn prime_ids(&self) -> &[usize] {
        &self.prime_ids
    }

    #[inline]
    pub fn num_components(&self) -> usize {
        self.prime_ids.len()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.prime_ids.iter().position(|&p| p == id)
    }

    #[inline]
    pub fn component(&self, k: usize) -> &[u64] {
        &self.data[k * self.n..(k + 1) * self.n]
    }

    #[inline]
    pub fn component_mut(&mut self, k: usize) -> &mut [u64] {
        &mut self.data[k * self.n..(k + 1) * self.n]
    }

    /// Component belonging to prime `id`; panics if absent.
    pub fn component_for(&self, id: usize) -> &[u64] {
        let k = self.position(id).expect("prime not present in polynomial");
        self.component(k)
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u64] {
        &mut self.data
    }

    /// Copies out the components for `ids`, in that order.
    pub fn select(&self, ids: &[usize]) -> Self {
        let mut data = Vec::with_capacity(ids.len() * self.n);
        for &id in ids {
            data.extend_from_slice(self.component_for(id));
        }
        Self { n: self.n, prime_ids: ids.to_vec(), data }
    }
}
