//! Run reports: per-epoch summaries, byte counters and JSON/CSV output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::wire::{MsgType, SessionStats};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const MIB: f64 = 1024.0 * 1024.0;

/// Measurements of one training iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    /// Running training accuracy within the epoch.
    pub accuracy_so_far: f64,
    pub phase_seconds: BTreeMap<String, f64>,
    pub bytes_by_type: BTreeMap<String, u64>,
    /// Highest ciphertext level observed (HE mode only).
    pub max_level: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
    pub bytes_by_type: BTreeMap<String, u64>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl EpochRow {
    pub fn bytes_total(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }
}

/// Averages a list of iteration traces into one epoch row. Bytes come from
/// `stats`, the session counters accumulated over the epoch.
pub fn epoch_summary(epoch: usize, traces: &[IterationTrace], stats: &SessionStats, seconds: f64) -> EpochRow {
    let loss = if traces.is_empty() { 0.0 } else { traces.iter().map(|t| t.loss).sum::<f64>() / traces.len() as f64 };
    EpochRow {
        epoch,
        loss,
        train_accuracy: traces.last().map_or(0.0, |t| t.accuracy_so_far),
        test_accuracy: None,
        seconds,
        bytes_by_type: bytes_by_type(stats),
        bytes_sent: stats.total_sent(),
        bytes_received: stats.total_received(),
    }
}

/// Sent plus received frame bytes per message type name.
pub fn bytes_by_type(stats: &SessionStats) -> BTreeMap<String, u64> {
    stats
        .by_type
        .iter()
        .map(|(t, c): (&MsgType, _)| (t.name().to_string(), c.sent_bytes + c.received_bytes))
        .filter(|(_, b)| *b > 0)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub parallel: bool,
}

impl Environment {
    pub fn capture() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            parallel: crate::par::is_parallel(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub seconds: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub bytes_by_type: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    /// `local`, `split-plain` or `split-he`.
    pub mode: String,
    pub role: String,
    pub he_set: Option<String>,
    /// Flat `key = value` echo of the model and training configuration.
    pub config: BTreeMap<String, String>,
    pub epochs: Vec<EpochRow>,
    pub totals: Totals,
    pub phase_seconds: BTreeMap<String, f64>,
    pub final_test_accuracy: Option<f64>,
    pub audit: Option<serde_json::Value>,
    pub environment: Environment,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterations: Vec<IterationTrace>,
}

impl RunReport {
    pub fn new(mode: &str, role: &str) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            mode: mode.to_string(),
            role: role.to_string(),
            he_set: None,
            config: BTreeMap::new(),
            epochs: Vec::new(),
            totals: Totals::default(),
            phase_seconds: BTreeMap::new(),
            final_test_accuracy: None,
            audit: None,
            environment: Environment::capture(),
            iterations: Vec::new(),
        }
    }

    /// Fills `totals` from the epoch rows and `stats`.
    pub fn finalize(&mut self, stats: &SessionStats) {
        self.totals = Totals {
            seconds: self.epochs.iter().map(|e| e.seconds).sum(),
            bytes_sent: stats.total_sent(),
            bytes_received: stats.total_received(),
            bytes_by_type: bytes_by_type(stats),
        };
        self.phase_seconds = stats.phase_seconds.clone();
        self.final_test_accuracy = self.epochs.last().and_then(|e| e.test_accuracy);
    }

    pub fn add_config_kv(&mut self, text: &str) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        r.totals.seconds = 0.0;
        r.phase_seconds.clear();
        for e in &mut r.epochs {
            e.seconds = 0.0;
        }
        for it in &mut r.iterations {
            it.phase_seconds.clear();
        }
        r
    }

    /// One row per epoch: HE set, batch size, accuracy %, seconds, MiB.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let he = self.he_set.clone().unwrap_or_else(|| "none".into());
        let batch = self.config.get("batch_size").cloned().unwrap_or_default();
        for e in &self.epochs {
            out.push_str(&csv_row(&[
                self.mode.clone(),
                he.clone(),
                batch.clone(),
                e.epoch.to_string(),
                format!("{:.6}", e.loss),
                format!("{:.2}", 100.0 * e.train_accuracy),
                e.test_accuracy.map_or(String::new(), |a| format!("{:.2}", 100.0 * a)),
                format!("{:.3}", e.seconds),
                format!("{:.3}", e.bytes_total() as f64 / MIB),
                e.bytes_total().to_string(),
            ]));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, format: ReportFormat) -> std::io::Result<()> {
        let body = match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        };
        std::fs::write(path, body)
    }
}

pub const CSV_HEADER: &str =
    "mode,he_set,batch_size,epoch,loss,train_accuracy_pct,test_accuracy_pct,training_time_s,communication_mib,communication_bytes";

fn csv_row(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    /// `.csv` selects CSV, anything else JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}
