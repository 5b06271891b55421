//! Gradient-inversion attack on split learning protocols that send the
//! server-layer weight gradient in plaintext.
//!
//! The server layer computes `z = a·Wᵀ + b`, so its weight gradient is
//! `∂J/∂W = Gᵀ·a` with `G = ∂J/∂z` of shape `[n, K]`. A server that holds
//! both `G` and `∂J/∂W` recovers the activation `a` by solving that linear
//! system whenever `n = K` and `G` is invertible.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::layers::{ce_softmax_grad, softmax};
use crate::nn::{ClientModel, LinearLayer, NnError, Tensor};
use crate::split::LeakageAudit;

/// Above this the solve is refused as numerically singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Points per chunk in the plotting export.
pub const DEFAULT_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("the inversion needs a square output gradient: batch size {batch} must equal the {classes} classes (train with a batch size of {classes})")]
    Shape { batch: usize, classes: usize },
    #[error("output gradient is singular to working precision (condition number {condition:.3e})")]
    Singular { condition: f64 },
    #[error("attack not applicable: {0}")]
    NotApplicable(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// The pair of gradients a leaky protocol hands to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakedGradients {
    /// `∂J/∂z`, `[n, K]`.
    pub grad_al: Tensor,
    /// `∂J/∂W`, `[K, F]`.
    pub grad_w: Tensor,
}

/// LU factorization with partial pivoting of a square row-major matrix.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn new(n: usize, mut a: Vec<f64>) -> Option<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
            if a[pivot * n + col] == 0.0 {
                return None;
            }
            if pivot != col {
                for c in 0..n {
                    a.swap(pivot * n + c, col * n + c);
                }
                perm.swap(pivot, col);
            }
            let d = a[col * n + col];
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                a[r * n + col] = f;
                for c in col + 1..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
            }
        }
        Some(Self { n, lu: a, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            for c in 0..r {
                x[r] -= self.lu[r * n + c] * x[c];
            }
        }
        for r in (0..n).rev() {
            for c in r + 1..n {
                x[r] -= self.lu[r * n + c] * x[c];
            }
            x[r] /= self.lu[r * n + r];
        }
        x
    }
}

fn norm1(n: usize, a: &[f64]) -> f64 {
    (0..n).map(|c| (0..n).map(|r| a[r * n + c].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// 1-norm condition number of a square matrix; infinite when singular.
pub fn condition_number(a: &Tensor) -> Result<f64, AttackError> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(AttackError::Shape { batch: n, classes: m });
    }
    let Some(lu) = Lu::new(n, a.data().to_vec()) else { return Ok(f64::INFINITY) };
    let mut inv = vec![0.0; n * n];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        for (r, v) in lu.solve(&e).into_iter().enumerate() {
            inv[r * n + c] = v;
        }
    }
    let cond = norm1(n, a.data()) * norm1(n, &inv);
    Ok(if cond.is_finite() { cond } else { f64::INFINITY })
}

/// Solves `Gᵀ·â = ∂J/∂W` for the activation `â` (`[n, F]`).
pub fn reconstruct_activation(leak: &LeakedGradients) -> Result<Tensor, AttackError> {
    let (n, k) = leak.grad_al.dims2()?;
    let (kw, f) = leak.grad_w.dims2()?;
    if n != k {
        return Err(AttackError::Shape { batch: n, classes: k });
    }
    if kw != k {
        return Err(AttackError::Nn(NnError::Shape(format!("weight gradient has {kw} rows for {k} classes"))));
    }
    let gt = leak.grad_al.transpose2()?;
    let condition = condition_number(&gt)?;
    if condition >= MAX_CONDITION {
        return Err(AttackError::Singular { condition });
    }
    let lu = Lu::new(n, gt.into_data()).ok_or(AttackError::Singular { condition: f64::INFINITY })?;
    let mut out = vec![0.0; n * f];
    for col in 0..f {
        let rhs: Vec<f64> = (0..k).map(|r| leak.grad_w.at2(r, col)).collect();
        for (r, v) in lu.solve(&rhs).into_iter().enumerate() {
            out[r * f + col] = v;
        }
    }
    Ok(Tensor::new(vec![n, f], out)?)
}

/// What an honest-but-curious server sees in one iteration of the leaky
/// protocol, together with the true activation for scoring.
#[derive(Clone, Debug)]
pub struct CapturedIteration {
    pub leak: LeakedGradients,
    pub activation: Tensor,
}

/// Runs one honest forward and backward pass and captures the gradient pair
/// the leaky protocol transmits. Nothing is updated.
pub fn simulate_prior_protocol_leak(
    client: &ClientModel,
    server: &LinearLayer,
    x: &Tensor,
    labels: &[usize],
) -> Result<CapturedIteration, AttackError> {
    let (activation, _) = client.forward(x)?;
    let probs = softmax(&server.forward(&activation)?)?;
    let grad_al = ce_softmax_grad(&probs, labels)?;
    let (_, grad_w, _) = server.backward(&grad_al, &activation)?;
    Ok(CapturedIteration { leak: LeakedGradients { grad_al, grad_w }, activation })
}

/// Refuses the attack when the audited message log lacks the weight gradient.
pub fn check_applicable(audit: &LeakageAudit) -> Result<(), AttackError> {
    if audit.inversion_attack_possible() {
        Ok(())
    } else {
        Err(AttackError::NotApplicable("the server never received the weight gradient, only the output gradient".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSimilarity {
    pub pearson: f64,
    pub mse: f64,
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Per-sample Pearson r and MSE between each row of `recon` and `truth`.
pub fn similarity_metrics(recon: &Tensor, truth: &Tensor) -> Result<Vec<SampleSimilarity>, AttackError> {
    if recon.shape() != truth.shape() {
        return Err(AttackError::Nn(NnError::Shape(format!("{:?} vs {:?}", recon.shape(), truth.shape()))));
    }
    let (rows, f) = recon.dims2()?;
    Ok((0..rows)
        .map(|r| {
            let (x, y) = (recon.row(r), truth.row(r));
            let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f as f64;
            SampleSimilarity { pearson: pearson(x, y), mse }
        })
        .collect())
}

/// Long-format CSV of each row cut into chunks of `chunk` points.
pub fn export_chunks(t: &Tensor, chunk: usize) -> Result<String, AttackError> {
    let (rows, f) = t.dims2()?;
    let chunk = chunk.max(1);
    let mut out = String::from("sample,chunk_index,position,value\n");
    for r in 0..rows {
        for (i, v) in t.row(r).iter().enumerate().take(f) {
            writeln!(out, "{r},{},{},{v}", i / chunk, i % chunk).expect("writing to a string");
        }
    }
    Ok(out)
}

/// Reconstruction together with its fidelity against the truth.
#[derive(Clone, Debug)]
pub struct ReconstructionReport {
    pub reconstructed: Tensor,
    pub similarity: Vec<SampleSimilarity>,
    pub condition_number: f64,
}

impl ReconstructionReport {
    pub fn min_pearson(&self) -> f64 {
        self.similarity.iter().map(|s| s.pearson).fold(f64::INFINITY, f64::min)
    }
}

/// Reconstructs from a capture and scores it.
pub fn run_attack(capture: &CapturedIteration) -> Result<ReconstructionReport, AttackError> {
    let reconstructed = reconstruct_activation(&capture.leak)?;
    let similarity = similarity_metrics(&reconstructed, &capture.activation)?;
    let condition_number = condition_number(&capture.leak.grad_al.transpose2()?)?;
    Ok(ReconstructionReport { reconstructed, similarity, condition_number })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::tensor::matmul;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_gradient_returns_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut eye = Tensor::zeros(&[5, 5]);
        for i in 0..5 {
            eye.data_mut()[i * 6] = 1.0;
        }
        let grad_w = random(5, 8, &mut rng);
        let got = reconstruct_activation(&LeakedGradients { grad_al: eye, grad_w: grad_w.clone() }).unwrap();
        assert_eq!(got, grad_w);
    }

    #[test]
    fn recovers_x_from_a_times_x() {
        // the solve is checked against a product built directly, not via backward
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(5, 5, &mut rng);
        let x = random(5, 8, &mut rng);
        let grad_w = matmul(&a, &x).unwrap();
        let got = reconstruct_activation(&LeakedGradients { grad_al: a.transpose2().unwrap(), grad_w }).unwrap();
        let rel = got.max_abs_diff(&x).unwrap() / x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn non_square_cites_batch_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = reconstruct_activation(&LeakedGradients { grad_al: random(4, 5, &mut rng), grad_w: random(5, 8, &mut rng) })
            .unwrap_err();
        assert!(matches!(err, AttackError::Shape { batch: 4, classes: 5 }));
        assert!(err.to_string().contains("batch size of 5"));
    }

    #[test]
    fn singular_is_refused() {
        let g = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let err = reconstruct_activation(&LeakedGradients { grad_al: g, grad_w: Tensor::zeros(&[2, 3]) }).unwrap_err();
        assert!(matches!(err, AttackError::Singular { .. }));
    }

    #[test]
    fn condition_of_diagonal() {
        let d = Tensor::new(vec![2, 2], vec![4.0, 0.0, 0.0, 0.5]).unwrap();
        assert!((condition_number(&d).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_extremes() {
        let a = Tensor::new(vec![1, 4], vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        let neg = Tensor::new(vec![1, 4], a.data().iter().map(|v| -v).collect()).unwrap();
        let same = similarity_metrics(&a, &a).unwrap()[0];
        assert_eq!((same.pearson, same.mse), (1.0, 0.0));
        assert!((similarity_metrics(&neg, &a).unwrap()[0].pearson + 1.0).abs() < 1e-12);
    }

    #[test]
    fn unrelated_vectors_are_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 2000;
        let small = (0..trials)
            .filter(|_| {
                let x: Vec<f64> = (0..448).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..448).map(|_| rng.random_range(-1.0..1.0)).collect();
                pearson(&x, &y).abs() < 0.2
            })
            .count();
        assert!(small as f64 / trials as f64 > 0.99, "{small}/{trials}");
    }

    #[test]
    fn chunk_export_layout() {
        let t = Tensor::new(vec![1, 3], vec![0.5, 1.5, 2.5]).unwrap();
        let csv = export_chunks(&t, 2).unwrap();
        assert_eq!(csv, "sample,chunk_index,position,value\n0,0,0,0.5\n0,0,1,1.5\n0,1,0,2.5\n");
    }
}
