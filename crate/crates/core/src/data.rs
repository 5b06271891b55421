//! ECG datasets: CSV loading, a synthetic generator, splitting and batching.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::nn::model::layer_seed;
use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {row}: {msg}")]
    Format { row: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Input geometry and class count of a dataset family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Single-lead beats of 128 samples.
    Mitbih,
    /// 12-lead records of 1000 samples.
    Ptbxl,
}

impl Profile {
    pub fn channels(self) -> usize {
        match self {
            Profile::Mitbih => 1,
            Profile::Ptbxl => 12,
        }
    }

    pub fn length(self) -> usize {
        match self {
            Profile::Mitbih => 128,
            Profile::Ptbxl => 1000,
        }
    }

    pub fn classes(self) -> usize {
        5
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Profile::Mitbih => &["N", "S", "V", "F", "Q"],
            Profile::Ptbxl => &["NORM", "MI", "STTC", "CD", "HYP"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Mitbih => "mitbih",
            Profile::Ptbxl => "ptbxl",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mitbih" | "mit-bih" => Ok(Profile::Mitbih),
            "ptbxl" | "ptb-xl" => Ok(Profile::Ptbxl),
            other => Err(DataError::Invalid(format!("unknown profile '{other}' (expected mitbih or ptbxl)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self, DataError> {
        let (count, _, _) = samples.dims3().map_err(|e| DataError::Invalid(e.to_string()))?;
        if count != labels.len() {
            return Err(DataError::Invalid(format!("{count} samples but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::Invalid(format!("label {bad} outside 0..{}", class_names.len())));
        }
        Ok(Self { samples, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Copies the listed samples, in order, into a new tensor of shape `[idx.len(), c, len]`.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.channels() * self.length();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.samples.row(i));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_raw(vec![idx.len(), self.channels(), self.length()], data), labels)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (samples, labels) = self.gather(idx);
        Dataset { samples, labels, class_names: self.class_names.clone() }
    }

    /// Rows of `label,v0,v1,...` in the CSV interchange format.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            out.push_str(&self.labels[i].to_string());
            for v in self.samples.row(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_csv(path: impl AsRef<Path>, profile: Profile) -> Result<Dataset, DataError> {
    read_csv(std::fs::File::open(path)?, profile)
}

/// Parses headerless rows of `label,v0,...,v{c·len−1}`.
pub fn read_csv(reader: impl Read, profile: Profile) -> Result<Dataset, DataError> {
    let width = profile.channels() * profile.length();
    let classes = profile.classes();
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Format { row, msg: e.to_string() })?;
        if rec.len() != width + 1 {
            return Err(DataError::Format {
                row,
                msg: format!("expected {} columns (label + {width} values), found {}", width + 1, rec.len()),
            });
        }
        let label: f64 = rec[0].parse().map_err(|_| DataError::Format { row, msg: format!("bad label '{}'", &rec[0]) })?;
        if label.fract() != 0.0 || label < 0.0 || label >= classes as f64 {
            return Err(DataError::Format { row, msg: format!("label {label} outside 0..{classes}") });
        }
        labels.push(label as usize);
        for (col, field) in rec.iter().enumerate().skip(1) {
            let v: f64 =
                field.parse().map_err(|_| DataError::Format { row, msg: format!("column {col}: bad number '{field}'") })?;
            if !v.is_finite() {
                return Err(DataError::Format { row, msg: format!("column {col}: non-finite value {field}") });
            }
            data.push(v);
        }
    }
    let count = labels.len();
    Dataset::new(Tensor::from_raw(vec![count, profile.channels(), profile.length()], data), labels, profile.class_names())
}

/// Gaussian bump `(center, width, amplitude)` in normalized time.
type Bump = (f64, f64, f64);

fn class_template(class: usize) -> &'static [Bump] {
    const T: [&[Bump]; 5] = [
        // normal: P, QRS, T
        &[(0.25, 0.030, 0.15), (0.50, 0.015, 1.00), (0.75, 0.050, 0.30)],
        // supraventricular: no P wave, early narrow QRS
        &[(0.40, 0.015, 1.00), (0.62, 0.050, 0.30)],
        // ventricular: wide complex, inverted T
        &[(0.50, 0.060, 0.90), (0.78, 0.060, -0.40)],
        // fusion: blunted complex
        &[(0.25, 0.030, 0.10), (0.50, 0.035, 0.60), (0.72, 0.050, 0.20)],
        // paced: spike then broad complex
        &[(0.44, 0.005, 0.50), (0.55, 0.050, 0.70), (0.82, 0.040, 0.15)],
    ];
    T[class % 5]
}

/// Deterministic synthetic beats: each class is a distinct sum of Gaussian
/// bumps with per-sample amplitude, timing and baseline jitter plus white noise.
/// Labels are balanced (counts differ by at most one) and shuffled.
pub fn synth_ecg(count: usize, profile: Profile, seed: u64) -> Dataset {
    let (ch, len, classes) = (profile.channels(), profile.length(), profile.classes());
    let mut rng = ChaCha20Rng::seed_from_u64(layer_seed(seed, 0x5ec9));
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let lead_gain: Vec<f64> = (0..ch).map(|c| if c == 0 { 1.0 } else { 0.5 + 0.1 * c as f64 }).collect();
    let mut data = Vec::with_capacity(count * ch * len);
    for &label in &labels {
        let amp = 1.0 + 0.1 * jitter.sample(&mut rng);
        let shift = 0.015 * jitter.sample(&mut rng);
        let baseline = 0.05 * jitter.sample(&mut rng);
        let bumps = class_template(label);
        for &gain in &lead_gain {
            for i in 0..len {
                let t = i as f64 / len as f64;
                let mut v = baseline;
                for &(c, w, a) in bumps {
                    let d = (t - c - shift) / w;
                    v += amp * a * (-0.5 * d * d).exp();
                }
                v = gain * v + 0.03 * jitter.sample(&mut rng);
                data.push(v);
            }
        }
    }
    Dataset::new(Tensor::from_raw(vec![count, ch, len], data), labels, profile.class_names()).expect("generator is consistent")
}

/// Shuffles with `seed` and puts `round(ratio·count)` samples in the first part.
pub fn split_train_test(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::Invalid(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(layer_seed(seed, 0x5911)));
    let cut = (ratio * ds.len() as f64).round() as usize;
    Ok((ds.subset(&idx[..cut]), ds.subset(&idx[cut..])))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Shuffled mini-batches for one epoch; the permutation depends on `(seed, epoch)` only.
#[derive(Clone, Debug)]
pub struct BatchIterator<'a> {
    ds: &'a Dataset,
    batch_size: usize,
    drop_last: bool,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(ds: &'a Dataset, batch_size: usize, seed: u64, epoch: usize, drop_last: bool) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Invalid("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(layer_seed(seed ^ 0xba7c_0000, epoch)));
        Ok(Self { ds, batch_size, drop_last, order, pos: 0 })
    }

    /// Number of batches this iterator yields in total.
    pub fn count_batches(&self) -> usize {
        batch_count(self.ds.len(), self.batch_size, self.drop_last)
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let end = self.pos + remaining.min(self.batch_size);
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (x, labels) = self.ds.gather(&indices);
        Some(Batch { x, labels, indices })
    }
}

/// Shuffled batches with `drop_last`, so exactly `floor(|D| / n)` are produced.
pub fn batches(ds: &Dataset, n: usize, seed: u64, epoch: usize) -> Result<BatchIterator<'_>, DataError> {
    BatchIterator::new(ds, n, seed, epoch, true)
}

pub fn batch_count(len: usize, n: usize, drop_last: bool) -> usize {
    if drop_last {
        len / n
    } else {
        len.div_ceil(n)
    }
}
