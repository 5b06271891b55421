use crate::nn::Tensor;

use super::SplitError;

/// Slot layout shared by client and server.
///
/// Slots are cut into blocks of `block = next_pow2(n)` slots. An activation
/// ciphertext for feature `f` repeats the batch column `a[:, f]` in every
/// block, so any plaintext placed in a block sees the whole batch. Gradients
/// of `group` consecutive features share one ciphertext: feature `j` of a
/// group and class `k` own block `j·K + k`, whose first slot ends up holding
/// the batch sum after a `slot_sum` over `block` slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Packing {
    pub batch: usize,
    pub block: usize,
    pub classes: usize,
    pub features: usize,
    pub slots: usize,
    pub group: usize,
}

impl Packing {
    pub fn new(batch: usize, classes: usize, features: usize, slots: usize) -> Result<Self, SplitError> {
        if batch == 0 || classes == 0 || features == 0 {
            return Err(SplitError::Config("batch size, classes and features must be positive".into()));
        }
        let block = batch.next_power_of_two();
        if block * classes > slots {
            return Err(SplitError::Config(format!(
                "batch size {batch} (padded to {block}) times {classes} classes exceeds the {slots} slots"
            )));
        }
        let group = (slots / (block * classes)).min(features);
        Ok(Self { batch, block, classes, features, slots, group })
    }

    /// Number of gradient (and refreshed-weight) ciphertexts.
    pub fn groups(&self) -> usize {
        self.features.div_ceil(self.group)
    }

    /// Feature range covered by group `g`.
    pub fn group_features(&self, g: usize) -> std::ops::Range<usize> {
        let start = g * self.group;
        start..(start + self.group).min(self.features)
    }

    /// Slot holding the batch sum for feature `j` of a group and class `k`.
    pub fn weight_slot(&self, j: usize, k: usize) -> usize {
        (j * self.classes + k) * self.block
    }

    /// Column `column` (one value per batch row, `rows ≤ batch`) repeated in every block.
    pub fn activation_slots(&self, column: &[f64]) -> Vec<f64> {
        debug_assert!(column.len() <= self.batch);
        let mut out = vec![0.0; self.slots];
        for blk in out.chunks_exact_mut(self.block) {
            blk[..column.len()].copy_from_slice(column);
        }
        out
    }

    /// Block `j·K + k` holds `scale·g[:, k]`, for the group position `j`.
    pub fn gradient_slots(&self, grad: &Tensor, scale: f64, j: usize) -> Result<Vec<f64>, SplitError> {
        let (rows, k) = grad.dims2()?;
        if rows > self.batch || k != self.classes {
            return Err(SplitError::Protocol(format!(
                "gradient shape {:?} does not fit batch {} x {} classes",
                grad.shape(),
                self.batch,
                self.classes
            )));
        }
        let mut out = vec![0.0; self.slots];
        for c in 0..k {
            let base = self.weight_slot(j, c);
            for r in 0..rows {
                out[base + r] = scale * grad.at2(r, c);
            }
        }
        Ok(out)
    }

    /// Weights `w[k, f]` of group `g` at their sum slots, zero elsewhere.
    pub fn weight_slots(&self, w: &Tensor, g: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.slots];
        for (j, f) in self.group_features(g).enumerate() {
            for k in 0..self.classes {
                out[self.weight_slot(j, k)] = w.at2(k, f);
            }
        }
        out
    }

    /// Gathers a `[K, F]` matrix from decrypted group vectors.
    pub fn read_weights(&self, groups: &[Vec<f64>]) -> Result<Tensor, SplitError> {
        if groups.len() != self.groups() {
            return Err(SplitError::Protocol(format!("expected {} weight ciphertexts, got {}", self.groups(), groups.len())));
        }
        let mut w = vec![0.0; self.classes * self.features];
        for (g, vals) in groups.iter().enumerate() {
            for (j, f) in self.group_features(g).enumerate() {
                for k in 0..self.classes {
                    w[k * self.features + f] = vals[self.weight_slot(j, k)];
                }
            }
        }
        Tensor::new(vec![self.classes, self.features], w).map_err(|e| SplitError::Precision(e.to_string()))
    }

    /// Logits `[rows, K]` from the first block of each class ciphertext.
    pub fn read_outputs(&self, per_class: &[Vec<f64>], rows: usize) -> Result<Tensor, SplitError> {
        if per_class.len() != self.classes {
            return Err(SplitError::Protocol(format!("expected {} output ciphertexts, got {}", self.classes, per_class.len())));
        }
        let mut out = vec![0.0; rows * self.classes];
        for (k, vals) in per_class.iter().enumerate() {
            for r in 0..rows {
                out[r * self.classes + k] = vals[r];
            }
        }
        Tensor::new(vec![rows, self.classes], out).map_err(|e| SplitError::Precision(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s1_geometry() {
        let p = Packing::new(4, 5, 448, 4096).unwrap();
        assert_eq!((p.block, p.group, p.groups()), (4, 204, 3));
        let p = Packing::new(16, 5, 448, 4096).unwrap();
        assert_eq!((p.block, p.group, p.groups()), (16, 51, 9));
        assert!(Packing::new(32, 5, 448, 128).is_err());
    }

    #[test]
    fn weight_layout_roundtrip() {
        let p = Packing::new(3, 2, 5, 32).unwrap();
        assert_eq!((p.block, p.group, p.groups()), (4, 4, 2));
        let w = Tensor::new(vec![2, 5], (0..10).map(|x| x as f64).collect()).unwrap();
        let groups: Vec<Vec<f64>> = (0..p.groups()).map(|g| p.weight_slots(&w, g)).collect();
        assert_eq!(p.read_weights(&groups).unwrap(), w);
    }

    #[test]
    fn block_sums_give_gradient() {
        // plaintext oracle of the encrypted computation: product, then sum per block
        let p = Packing::new(3, 2, 3, 32).unwrap();
        let a = Tensor::new(vec![3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let g = Tensor::new(vec![3, 2], vec![0.5, -1., 2., 0., 1., 1.]).unwrap();
        let mut summed = vec![0.0; p.slots];
        for f in 0..3 {
            let act = p.activation_slots(&a.column(f));
            let gs = p.gradient_slots(&g, 1.0, f).unwrap();
            for s in 0..p.slots {
                summed[s] += act[s] * gs[s];
            }
        }
        let mut block_sums = vec![0.0; p.slots];
        for s in 0..p.slots {
            block_sums[s] = (0..p.block).map(|i| summed[(s + i) % p.slots]).sum();
        }
        let got = p.read_weights(&[block_sums]).unwrap();
        let expect = crate::nn::tensor::matmul_tn(&g, &a).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
    }
}
