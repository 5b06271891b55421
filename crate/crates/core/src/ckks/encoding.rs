//! Canonical embedding between real slot vectors and ring coefficients.
//!
//! Slot `j` is the evaluation of the message polynomial at `ζ^(5^j)` with
//! `ζ = exp(iπ/N)`. The special FFT below evaluates all `N/2` of them in
//! `O(N log N)`; coefficient `k` and `k + N/2` carry the real and imaginary
//! parts of the half-size complex vector.

use num_complex::Complex64;

#[derive(Clone, Debug)]
pub struct Encoder {
    slots: usize,
    m: usize,
    rot_group: Vec<usize>,
    ksi: Vec<Complex64>,
}

fn bit_reverse_permute(v: &mut [Complex64]) {
    let n = v.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j ^= bit;
        if i < j {
            v.swap(i, j);
        }
    }
}

impl Encoder {
    pub fn new(n: usize) -> Self {
        let slots = n / 2;
        let m = 2 * n;
        let mut rot_group = Vec::with_capacity(slots);
        let mut g = 1usize;
        for _ in 0..slots {
            rot_group.push(g);
            g = g * 5 % m;
        }
        let ksi = (0..=m).map(|k| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / m as f64)).collect();
        Self { slots, m, rot_group, ksi }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Galois element that rotates slots left by `step`.
    pub fn galois_element(&self, step: usize) -> usize {
        self.rot_group[step % self.slots]
    }

    /// Evaluates the half-size coefficient vector at the slot roots.
    fn fft_special(&self, v: &mut [Complex64]) {
        let size = v.len();
        bit_reverse_permute(v);
        let mut len = 2;
        while len <= size {
            let lenh = len / 2;
            let lenq = len * 4;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] % lenq) * self.m / lenq;
                    let u = v[i + j];
                    let w = v[i + j + lenh] * self.ksi[idx];
                    v[i + j] = u + w;
                    v[i + j + lenh] = u - w;
                }
            }
            len <<= 1;
        }
    }

    fn fft_special_inv(&self, v: &mut [Complex64]) {
        let size = v.len();
        let mut len = size;
        while len >= 2 {
            let lenh = len / 2;
            let lenq = len * 4;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (lenq - self.rot_group[j] % lenq) * self.m / lenq;
                    let u = v[i + j] + v[i + j + lenh];
                    let w = (v[i + j] - v[i + j + lenh]) * self.ksi[idx];
                    v[i + j] = u;
                    v[i + j + lenh] = w;
                }
            }
            len >>= 1;
        }
        bit_reverse_permute(v);
        let inv = 1.0 / size as f64;
        for x in v.iter_mut() {
            *x *= inv;
        }
    }

    /// Real coefficients (before rounding) whose embedding is `values * scale`,
    /// zero-padded to all slots.
    pub fn embed_inverse(&self, values: &[f64], scale: f64) -> Vec<f64> {
        debug_assert!(values.len() <= self.slots);
        let mut v = vec![Complex64::new(0.0, 0.0); self.slots];
        for (d, &x) in v.iter_mut().zip(values) {
            d.re = x;
        }
        self.fft_special_inv(&mut v);
        let mut coeffs = vec![0.0; 2 * self.slots];
        for (k, c) in v.iter().enumerate() {
            coeffs[k] = c.re * scale;
            coeffs[k + self.slots] = c.im * scale;
        }
        coeffs
    }

    /// Real parts of the slot values of a coefficient vector divided by `scale`.
    pub fn embed(&self, coeffs: &[f64], scale: f64) -> Vec<f64> {
        debug_assert_eq!(coeffs.len(), 2 * self.slots);
        let mut v: Vec<Complex64> =
            (0..self.slots).map(|k| Complex64::new(coeffs[k] / scale, coeffs[k + self.slots] / scale)).collect();
        self.fft_special(&mut v);
        v.into_iter().map(|c| c.re).collect()
    }
}
