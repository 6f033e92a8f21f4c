//! Byte accounting, result files and scheme comparison.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::engine::{Experiment, Result as EngineResult, RoundResult, RunOptions, Scheme};
use crate::transport::{Link, Payload, Transmission};

pub const RESULTS_HEADER: &str = "round,loss,accuracy,up_end_edge,up_edge_cloud,down_cloud_edge,down_edge_end";
pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Serialized length of `payload`: `8 + 8k` sparse, `4 + 4d` dense.
pub fn account_bytes(payload: &Payload) -> usize {
    payload.wire_len()
}

/// Bytes moved over each link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LinkBytes {
    pub end_edge: u64,
    pub edge_cloud: u64,
    pub cloud_edge: u64,
    pub edge_end: u64,
}

impl LinkBytes {
    pub fn from_transmissions(transmissions: &[Transmission]) -> Self {
        let mut out = LinkBytes::default();
        for t in transmissions {
            *out.get_mut(t.link) += t.total_bytes() as u64;
        }
        out
    }

    pub fn get(&self, link: Link) -> u64 {
        match link {
            Link::EndToEdge => self.end_edge,
            Link::EdgeToCloud => self.edge_cloud,
            Link::CloudToEdge => self.cloud_edge,
            Link::EdgeToEnd => self.edge_end,
        }
    }

    fn get_mut(&mut self, link: Link) -> &mut u64 {
        match link {
            Link::EndToEdge => &mut self.end_edge,
            Link::EdgeToCloud => &mut self.edge_cloud,
            Link::CloudToEdge => &mut self.cloud_edge,
            Link::EdgeToEnd => &mut self.edge_end,
        }
    }

    pub fn uplink(&self) -> usize {
        (self.end_edge + self.edge_cloud) as usize
    }

    pub fn downlink(&self) -> usize {
        (self.cloud_edge + self.edge_end) as usize
    }

    pub fn total(&self) -> u64 {
        self.end_edge + self.edge_cloud + self.cloud_edge + self.edge_end
    }

    fn add(&mut self, other: &LinkBytes) {
        for link in Link::ALL {
            *self.get_mut(link) += other.get(link);
        }
    }
}

/// Per-round link bytes in round order. Cumulative figures are always
/// recomputed from the per-round entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BytesLedger {
    rounds: Vec<(u64, LinkBytes)>,
}

impl BytesLedger {
    pub fn record(&mut self, round: u64, bytes: LinkBytes) {
        self.rounds.push((round, bytes));
    }

    pub fn rounds(&self) -> &[(u64, LinkBytes)] {
        &self.rounds
    }

    pub fn cumulative(&self) -> LinkBytes {
        let mut total = LinkBytes::default();
        self.rounds.iter().for_each(|(_, b)| total.add(b));
        total
    }

    /// Running totals after each round.
    pub fn running(&self) -> Vec<LinkBytes> {
        let mut total = LinkBytes::default();
        self.rounds
            .iter()
            .map(|(_, b)| {
                total.add(b);
                total
            })
            .collect()
    }
}

/// One row per round under [`RESULTS_HEADER`]. Floats use shortest
/// round-trip formatting, so equal results give byte-identical text.
pub fn results_csv(results: &[RoundResult]) -> String {
    let mut out = String::with_capacity(64 * (results.len() + 1));
    out.push_str(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        let b = &r.link_bytes;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round, r.train_loss, r.test_accuracy, b.end_edge, b.edge_cloud, b.cloud_edge, b.edge_end
        )
        .expect("writing to a String");
    }
    out
}

/// Writes `results.csv` and `manifest.toml` into `dir`, creating it.
pub fn emit_results(results: &[RoundResult], config: &ExperimentConfig, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESULTS_FILE), results_csv(results))?;
    fs::write(dir.join(MANIFEST_FILE), config.to_toml())
}

/// A parsed `results.csv` row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultRow {
    pub round: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub bytes: LinkBytes,
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULTS_HEADER => {}
        other => return Err(format!("unexpected header {:?}", other.unwrap_or(""))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let line_no = i + 2;
            if f.len() != 7 {
                return Err(format!("line {line_no}: expected 7 fields, found {}", f.len()));
            }
            let int = |s: &str| s.trim().parse::<u64>().map_err(|e| format!("line {line_no}: {e}"));
            let float = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("line {line_no}: {e}"));
            Ok(ResultRow {
                round: int(f[0])?,
                loss: float(f[1])?,
                accuracy: float(f[2])?,
                bytes: LinkBytes { end_edge: int(f[3])?, edge_cloud: int(f[4])?, cloud_edge: int(f[5])?, edge_end: int(f[6])? },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub scheme: Scheme,
    pub bytes: LinkBytes,
    pub final_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, scheme: Scheme) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }

    /// `bytes(denominator) / bytes(numerator)`: how many times fewer bytes
    /// `numerator` moves.
    pub fn savings(&self, numerator: Scheme, denominator: Scheme) -> Option<f64> {
        let n = self.row(numerator)?.bytes.total();
        let d = self.row(denominator)?.bytes.total();
        (n > 0).then(|| d as f64 / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,total_bytes,uplink_bytes,downlink_bytes,final_accuracy,final_loss\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.scheme,
                r.bytes.total(),
                r.bytes.uplink(),
                r.bytes.downlink(),
                r.final_accuracy,
                r.final_loss
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Runs `config` once per scheme over the same data, partition and seed.
pub fn scheme_comparison(
    config: &ExperimentConfig,
    schemes: &[Scheme],
    options: RunOptions,
) -> EngineResult<(ComparisonTable, Vec<(Scheme, Vec<RoundResult>)>)> {
    let base = Experiment::prepare(config)?;
    let mut table = ComparisonTable::default();
    let mut runs = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let mut cfg = config.clone();
        cfg.scheme = scheme;
        let experiment = Experiment {
            config: cfg.clone(),
            round_config: cfg.round_config(),
            layer_dims: base.layer_dims.clone(),
            shards: base.shards.clone(),
            test: base.test.clone(),
        };
        let (results, ledger) = experiment.run(options)?;
        let last = results.last();
        table.rows.push(ComparisonRow {
            scheme,
            bytes: ledger.cumulative(),
            final_accuracy: last.map_or(0.0, |r| r.test_accuracy),
            final_loss: last.map_or(f64::NAN, |r| r.train_loss),
        });
        runs.push((scheme, results));
    }
    Ok((table, runs))
}
