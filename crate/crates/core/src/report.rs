//! Text serialization of metrics and events, provenance headers and replay.
//!
//! Floats are written with 17 significant digits so a parse returns the same
//! `f64` and repeated runs can be compared byte for byte. Every file starts
//! with a `#` line carrying the SHA-256 of the configuration and the seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netmodel::{Event, EventKind, Ledger, Phase};
use crate::sim::{MetricsRow, SimulationConfig};
use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("missing provenance header")]
    MissingHeader,
    #[error("malformed provenance header: {0}")]
    BadHeader(String),
    #[error("provenance mismatch: file has {found}, expected {expected}")]
    Mismatch { expected: String, found: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Identifies the configuration and seed that produced a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of(config: &SimulationConfig) -> Self {
        Self {
            config_hash: config_hash(config),
            seed: config.seed,
        }
    }

    pub fn header(&self) -> String {
        format!(
            "# fogsim config_sha256={} seed={}",
            self.config_hash, self.seed
        )
    }

    pub fn parse(line: &str) -> Result<Self, ReportError> {
        let body = line.strip_prefix('#').ok_or(ReportError::MissingHeader)?;
        let mut hash = None;
        let mut seed = None;
        for token in body.split_whitespace() {
            if let Some(v) = token.strip_prefix("config_sha256=") {
                hash = Some(v.to_string());
            } else if let Some(v) = token.strip_prefix("seed=") {
                seed = Some(v.parse().map_err(|_| ReportError::BadHeader(line.into()))?);
            }
        }
        match (hash, seed) {
            (Some(config_hash), Some(seed)) => Ok(Self { config_hash, seed }),
            _ => Err(ReportError::BadHeader(line.into())),
        }
    }

    /// Checks that `text` begins with this provenance header.
    pub fn verify(&self, text: &str) -> Result<(), ReportError> {
        let first = text.lines().next().ok_or(ReportError::MissingHeader)?;
        let found = Self::parse(first)?;
        if &found != self {
            return Err(ReportError::Mismatch {
                expected: self.header(),
                found: found.header(),
            });
        }
        Ok(())
    }
}

/// SHA-256 of the configuration's canonical JSON, in lowercase hex.
pub fn config_hash(config: &SimulationConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// A float with 17 significant digits.
pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn metrics_csv(rows: &[MetricsRow], provenance: &Provenance) -> String {
    let mut out = provenance.header();
    out.push('\n');
    out.push_str(&MetricsRow::COLUMNS.join(","));
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            float(r.global_loss),
            float(r.global_accuracy),
            r.uplink_params,
            r.downlink_params,
            r.d2d_params,
            float(r.total_energy_j),
            float(r.round_delay_s),
            r.stragglers_dropped,
            r.clusters_sampled,
            r.samples_moved,
        );
    }
    out
}

fn field<T: std::str::FromStr>(
    value: Option<&str>,
    line: usize,
    name: &str,
) -> Result<T, ReportError> {
    value
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| ReportError::Parse {
            line,
            message: format!("bad or missing {name}"),
        })
}

pub fn parse_metrics_csv(text: &str) -> Result<(Provenance, Vec<MetricsRow>), ReportError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(ReportError::MissingHeader)?;
    let provenance = Provenance::parse(first)?;
    match lines.next() {
        Some((_, h)) if h == MetricsRow::COLUMNS.join(",") => {}
        _ => {
            return Err(ReportError::Parse {
                line: 2,
                message: "unexpected column header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != MetricsRow::COLUMNS.len() {
            return Err(ReportError::Parse {
                line: n,
                message: format!(
                    "expected {} fields, got {}",
                    MetricsRow::COLUMNS.len(),
                    parts.len()
                ),
            });
        }
        let col = |i: usize| Some(parts[i]);
        let name = |i: usize| MetricsRow::COLUMNS[i];
        rows.push(MetricsRow {
            round: field(col(0), n, name(0))?,
            global_loss: field(col(1), n, name(1))?,
            global_accuracy: field(col(2), n, name(2))?,
            uplink_params: field(col(3), n, name(3))?,
            downlink_params: field(col(4), n, name(4))?,
            d2d_params: field(col(5), n, name(5))?,
            total_energy_j: field(col(6), n, name(6))?,
            round_delay_s: field(col(7), n, name(7))?,
            stragglers_dropped: field(col(8), n, name(8))?,
            clusters_sampled: field(col(9), n, name(9))?,
            samples_moved: field(col(10), n, name(10))?,
        });
    }
    Ok((provenance, rows))
}

/// One line per event: `round,phase,kind,src,dst,params,joules,seconds`, with
/// `-` for a missing destination.
pub fn events_log(events: &[Event], provenance: &Provenance) -> String {
    let mut out = provenance.header();
    out.push('\n');
    for e in events {
        let dst = e.dst.map_or_else(|| "-".to_string(), |d| d.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.round,
            e.phase,
            e.kind,
            e.src,
            dst,
            e.params,
            float(e.joules),
            float(e.seconds)
        );
    }
    out
}

pub fn parse_events_log(text: &str) -> Result<(Provenance, Vec<Event>), ReportError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(ReportError::MissingHeader)?;
    let provenance = Provenance::parse(first)?;
    let mut events = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(ReportError::Parse {
                line: n,
                message: format!("expected 8 fields, got {}", parts.len()),
            });
        }
        let bad = |message: String| ReportError::Parse { line: n, message };
        events.push(Event {
            round: field(Some(parts[0]), n, "round")?,
            phase: parts[1].parse::<Phase>().map_err(bad)?,
            kind: parts[2].parse::<EventKind>().map_err(bad)?,
            src: NodeId(field(Some(parts[3]), n, "src")?),
            dst: match parts[4] {
                "-" => None,
                d => Some(NodeId(field(Some(d), n, "dst")?)),
            },
            params: field(Some(parts[5]), n, "params")?,
            joules: field(Some(parts[6]), n, "joules")?,
            seconds: field(Some(parts[7]), n, "seconds")?,
        });
    }
    Ok((provenance, events))
}

/// Rebuilds per-round ledgers from an event stream, independently of the
/// simulator's own bookkeeping.
pub fn replay(events: &[Event], sample_width: u64) -> BTreeMap<u64, Ledger> {
    let mut out: BTreeMap<u64, Ledger> = BTreeMap::new();
    for e in events {
        out.entry(e.round)
            .or_insert_with(|| Ledger::new(sample_width))
            .record(e);
    }
    out
}

/// Compares every ledger-derived counter of `rows` with a replay of `events`.
/// Returns a description of the first disagreement.
pub fn check_rows_against_events(
    rows: &[MetricsRow],
    events: &[Event],
    sample_width: u64,
) -> Result<(), String> {
    let ledgers = replay(events, sample_width);
    let empty = Ledger::new(sample_width);
    for row in rows {
        let l = ledgers.get(&row.round).unwrap_or(&empty);
        let pairs = [
            ("uplink_params", row.uplink_params, l.uplink_params),
            ("downlink_params", row.downlink_params, l.downlink_params),
            ("d2d_params", row.d2d_params, l.d2d_params),
            (
                "stragglers_dropped",
                row.stragglers_dropped,
                l.stragglers_dropped,
            ),
            ("samples_moved", row.samples_moved, l.data_samples_moved),
        ];
        for (name, got, want) in pairs {
            if got != want {
                return Err(format!(
                    "round {}: {name} is {got}, replay gives {want}",
                    row.round
                ));
            }
        }
        if row.total_energy_j.to_bits() != l.total_energy_j.to_bits() {
            return Err(format!(
                "round {}: total_energy_j is {}, replay gives {}",
                row.round, row.total_energy_j, l.total_energy_j
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::CostModel;

    fn prov() -> Provenance {
        Provenance {
            config_hash: "ab".repeat(32),
            seed: 9,
        }
    }

    fn row(round: u64, loss: f64) -> MetricsRow {
        MetricsRow {
            round,
            global_loss: loss,
            global_accuracy: 0.1 + 0.2,
            uplink_params: 12,
            downlink_params: 3,
            d2d_params: 0,
            total_energy_j: 1.0 / 3.0,
            round_delay_s: 2.5e-7,
            stragglers_dropped: 1,
            clusters_sampled: 4,
            samples_moved: 0,
        }
    }

    #[test]
    fn metrics_round_trip_is_exact() {
        let rows = vec![row(1, std::f64::consts::LN_2), row(2, 1e-300)];
        let text = metrics_csv(&rows, &prov());
        let (p, back) = parse_metrics_csv(&text).unwrap();
        assert_eq!(p, prov());
        assert_eq!(back, rows);
        assert_eq!(metrics_csv(&back, &p), text);
    }

    #[test]
    fn events_round_trip_is_exact() {
        let costs = CostModel::default();
        let events = vec![
            Event::transfer(1, Phase::Aggregate, &costs.uplink, NodeId(0), NodeId(5), 50),
            Event::marker(1, Phase::Train, EventKind::Drop, NodeId(2), 0),
        ];
        let text = events_log(&events, &prov());
        assert!(text
            .lines()
            .nth(2)
            .unwrap()
            .ends_with(",-,0,0.0000000000000000e0,0.0000000000000000e0"));
        let (_, back) = parse_events_log(&text).unwrap();
        assert_eq!(back, events);
    }

    #[test]
    fn header_verification() {
        let text = metrics_csv(&[], &prov());
        prov().verify(&text).unwrap();
        let other = Provenance { seed: 10, ..prov() };
        assert!(matches!(
            other.verify(&text),
            Err(ReportError::Mismatch { .. })
        ));
        assert_eq!(
            prov().verify("round,global_loss"),
            Err(ReportError::MissingHeader)
        );
    }

    #[test]
    fn hash_tracks_config_changes() {
        let a = SimulationConfig::three_layer(8, 4, 2);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.training.learning_rate = 0.05;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
