use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::MsgType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounters {
    pub sent_messages: u64,
    pub sent_bytes: u64,
    pub received_messages: u64,
    pub received_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub direction: Direction,
    pub msg_type: MsgType,
    pub bytes: u64,
}

/// Byte and message counters per type (full frame sizes), per-phase wall
/// time, and the ordered message log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub by_type: BTreeMap<MsgType, TypeCounters>,
    pub phase_seconds: BTreeMap<String, f64>,
    #[serde(skip)]
    pub log: Vec<MessageRecord>,
}

impl SessionStats {
    pub fn record(&mut self, direction: Direction, msg_type: MsgType, bytes: usize) {
        let c = self.by_type.entry(msg_type).or_default();
        match direction {
            Direction::Sent => {
                c.sent_messages += 1;
                c.sent_bytes += bytes as u64;
            }
            Direction::Received => {
                c.received_messages += 1;
                c.received_bytes += bytes as u64;
            }
        }
        self.log.push(MessageRecord { direction, msg_type, bytes: bytes as u64 });
    }

    pub fn total_sent(&self) -> u64 {
        self.by_type.values().map(|c| c.sent_bytes).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.by_type.values().map(|c| c.received_bytes).sum()
    }

    pub fn total(&self) -> u64 {
        self.total_sent() + self.total_received()
    }

    pub fn add_phase(&mut self, phase: &str, d: Duration) {
        *self.phase_seconds.entry(phase.to_string()).or_default() += d.as_secs_f64();
    }

    /// Runs `f` and charges its wall time to `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add_phase(phase, start.elapsed());
        out
    }

    /// Counters accumulated since `earlier` (a snapshot of this session).
    pub fn since(&self, earlier: &SessionStats) -> SessionStats {
        let mut by_type = BTreeMap::new();
        for (t, c) in &self.by_type {
            let e = earlier.by_type.get(t).copied().unwrap_or_default();
            by_type.insert(
                *t,
                TypeCounters {
                    sent_messages: c.sent_messages - e.sent_messages,
                    sent_bytes: c.sent_bytes - e.sent_bytes,
                    received_messages: c.received_messages - e.received_messages,
                    received_bytes: c.received_bytes - e.received_bytes,
                },
            );
        }
        let phase_seconds = self
            .phase_seconds
            .iter()
            .map(|(k, v)| (k.clone(), v - earlier.phase_seconds.get(k).copied().unwrap_or(0.0)))
            .collect();
        SessionStats { by_type, phase_seconds, log: self.log[earlier.log.len().min(self.log.len())..].to_vec() }
    }

    /// Counters without the log, for cheap snapshots.
    pub fn snapshot(&self) -> SessionStats {
        SessionStats { by_type: self.by_type.clone(), phase_seconds: self.phase_seconds.clone(), log: Vec::new() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_are_sums() {
        let mut s = SessionStats::default();
        s.record(Direction::Sent, MsgType::EncAct, 100);
        s.record(Direction::Received, MsgType::EncOut, 40);
        s.record(Direction::Sent, MsgType::EncAct, 100);
        assert_eq!(s.total_sent(), 200);
        assert_eq!(s.total(), 240);
        assert_eq!(s.by_type[&MsgType::EncAct].sent_messages, 2);
        let snap = s.clone();
        s.record(Direction::Sent, MsgType::DecW, 5);
        let d = s.since(&snap);
        assert_eq!(d.total(), 5);
        assert_eq!(d.log.len(), 1);
    }

    #[test]
    fn serializes_with_type_names() {
        let mut s = SessionStats::default();
        s.record(Direction::Sent, MsgType::GradAlow, 1);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("GRAD_ALOW"), "{json}");
    }
}
