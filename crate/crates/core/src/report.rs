//! Simulation outputs and their on-disk form.
//!
//! Every number written to disk is rounded to 9 significant digits so that
//! digests of the files are stable.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::InstanceId;
use crate::node::{FlightMode, NodeId};
use crate::radio::AdjacencyEntry;
use crate::swarm::Role;
use crate::workload::{compute_cdf, percentile, MetricsSeries, StressSummary};

pub const SERIES_CSV: &str = "series.csv";
pub const REQUESTS_CSV: &str = "requests.csv";
pub const CREATIONS_CSV: &str = "creations.csv";
pub const EVENTS_NDJSON: &str = "events.ndjson";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CDF_CSV: &str = "cdf.csv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

pub fn fmt_sig9(x: f64) -> String {
    let r = round_sig9(x);
    if r == 0.0 {
        "0".to_string()
    } else {
        r.to_string()
    }
}

/// Rounds every float in a JSON tree in place.
pub fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_sig9(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(xs) => xs.iter_mut().for_each(round_json),
        Value::Object(m) => m.values_mut().for_each(round_json),
        _ => {}
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreationRecord {
    /// 1-based order of completion.
    pub n: u64,
    pub start_s: f64,
    pub duration_s: f64,
    /// Node memory in use (baseline included) once the container runs.
    pub mem_fraction: f64,
    /// Node CPU utilisation when the container came up.
    pub cpu_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub users: u32,
    pub request_id: u64,
    pub arrival_s: f64,
    pub response_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub time_s: f64,
    pub node_id: NodeId,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub node: NodeId,
    pub available_memory_kb: f64,
    pub available_cpu_fraction: f64,
    pub battery_mah: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySnapshot {
    pub time_s: f64,
    pub primary: Option<NodeId>,
    pub links: Vec<AdjacencyEntry>,
    pub mpr: BTreeMap<NodeId, Vec<NodeId>>,
    pub flood_origin: Option<NodeId>,
    pub mpr_transmissions: usize,
    pub blind_transmissions: usize,
    pub reached: usize,
}

/// Entries of `events.ndjson`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Registered {
        time_s: f64,
        node: NodeId,
        role: Role,
    },
    Placed {
        time_s: f64,
        node: NodeId,
        container: InstanceId,
    },
    PlacementRejected {
        time_s: f64,
        reason: String,
    },
    FillComplete {
        time_s: f64,
        count: u64,
    },
    StressStarted {
        time_s: f64,
        node: NodeId,
        users: u32,
    },
    StressRejected {
        time_s: f64,
        reason: String,
    },
    StressCompleted {
        time_s: f64,
        node: NodeId,
        users: u32,
        completed: u64,
    },
    StressAborted {
        time_s: f64,
        node: NodeId,
        users: u32,
        completed: u64,
    },
    NodeKilled {
        time_s: f64,
        node: NodeId,
    },
    NodeDepleted {
        time_s: f64,
        node: NodeId,
    },
    Landed {
        time_s: f64,
        node: NodeId,
        battery_fraction: f64,
        commanded: bool,
    },
    TookOff {
        time_s: f64,
        node: NodeId,
    },
    Moved {
        time_s: f64,
        node: NodeId,
        position: [f64; 3],
    },
    Pruned {
        time_s: f64,
        node: NodeId,
    },
    PrimaryLost {
        time_s: f64,
        node: NodeId,
        election_at: f64,
    },
    Elected {
        time_s: f64,
        node: NodeId,
        epoch: u64,
        candidates: Vec<Candidate>,
    },
    ElectionFailed {
        time_s: f64,
    },
    Topology(TopologySnapshot),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CreationSummary {
    pub count: u64,
    /// Creations made by fill directives.
    pub fill_count: u64,
    pub min_creation_s: Option<f64>,
    pub max_creation_s: Option<f64>,
    pub mean_creation_s: Option<f64>,
    pub total_creation_s: f64,
}

impl CreationSummary {
    pub fn from_records(records: &[CreationRecord], fill_count: u64) -> Self {
        let d: Vec<f64> = records.iter().map(|r| r.duration_s).collect();
        let total: f64 = d.iter().sum();
        Self {
            count: d.len() as u64,
            fill_count,
            min_creation_s: d.iter().copied().reduce(f64::min),
            max_creation_s: d.iter().copied().reduce(f64::max),
            mean_creation_s: (!d.is_empty()).then(|| total / d.len() as f64),
            total_creation_s: total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: NodeId,
    pub role: Role,
    pub alive: bool,
    pub flight_mode: FlightMode,
    pub initial_mem_fraction: f64,
    pub final_mem_fraction: f64,
    pub final_free_kb: f64,
    pub live_containers: usize,
    pub battery_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectionRecord {
    pub time_s: f64,
    pub node: NodeId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwarmSummary {
    pub primary: Option<NodeId>,
    pub epoch: u64,
    pub discovery_list_version: u64,
    pub placements: u64,
    pub rejections: u64,
    pub elections: Vec<ElectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloodSummary {
    pub origin: NodeId,
    pub mpr_transmissions: usize,
    pub blind_transmissions: usize,
    pub reached: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub events_processed: u64,
    pub clock_s: f64,
    pub creations: CreationSummary,
    pub nodes: Vec<NodeSummary>,
    pub stress: Vec<StressSummary>,
    pub swarm: SwarmSummary,
    pub flooding: Option<FloodSummary>,
}

#[derive(Debug, Clone, Default)]
pub struct SimReport {
    pub summary: Summary,
    pub series: MetricsSeries,
    pub requests: Vec<RequestRow>,
    pub creations: Vec<CreationRecord>,
    pub events: Vec<LogEvent>,
}

impl SimReport {
    pub fn events_processed(&self) -> u64 {
        self.summary.events_processed
    }

    /// The five output files, in memory.
    pub fn render(&self) -> BTreeMap<&'static str, Vec<u8>> {
        let mut out = BTreeMap::new();
        out.insert(SERIES_CSV, render_series(&self.series));
        out.insert(REQUESTS_CSV, render_requests(&self.requests));
        out.insert(CREATIONS_CSV, render_creations(&self.creations));
        out.insert(EVENTS_NDJSON, render_events(&self.events));
        out.insert(SUMMARY_JSON, render_summary(&self.summary));
        out
    }
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn render_series(series: &MetricsSeries) -> Vec<u8> {
    csv_bytes(
        &["time_s", "node_id", "metric", "value"],
        series.points().iter().map(|p| {
            vec![
                fmt_sig9(p.time_s),
                p.node_id.to_string(),
                p.metric.clone(),
                fmt_sig9(p.value),
            ]
        }),
    )
}

fn render_requests(rows: &[RequestRow]) -> Vec<u8> {
    csv_bytes(
        &["users", "request_id", "arrival_s", "response_ms"],
        rows.iter().map(|r| {
            vec![
                r.users.to_string(),
                r.request_id.to_string(),
                fmt_sig9(r.arrival_s),
                fmt_sig9(r.response_ms),
            ]
        }),
    )
}

fn render_creations(rows: &[CreationRecord]) -> Vec<u8> {
    csv_bytes(
        &["n", "start_s", "duration_s", "mem_fraction", "cpu_fraction"],
        rows.iter().map(|r| {
            vec![
                r.n.to_string(),
                fmt_sig9(r.start_s),
                fmt_sig9(r.duration_s),
                fmt_sig9(r.mem_fraction),
                fmt_sig9(r.cpu_fraction),
            ]
        }),
    )
}

fn rounded_value<T: Serialize>(x: &T) -> Value {
    let mut v = serde_json::to_value(x).expect("report types serialize");
    round_json(&mut v);
    v
}

fn render_events(events: &[LogEvent]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in events {
        out.extend(serde_json::to_vec(&rounded_value(e)).expect("serializes"));
        out.push(b'\n');
    }
    out
}

fn render_summary(summary: &Summary) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&rounded_value(summary)).expect("serializes");
    out.push(b'\n');
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes the output files into `dir` (created if missing) and returns the
/// SHA-256 of each.
pub fn emit_metrics(
    report: &SimReport,
    dir: &Path,
) -> Result<BTreeMap<String, String>, ReportError> {
    fs::create_dir_all(dir)?;
    let mut digests = BTreeMap::new();
    for (name, bytes) in report.render() {
        fs::write(dir.join(name), &bytes)?;
        digests.insert(name.to_string(), sha256_hex(&bytes));
    }
    Ok(digests)
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<T>, ReportError> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .map(|row| row.map_err(ReportError::from))
        .collect()
}

pub fn read_requests<R: Read>(reader: R) -> Result<Vec<RequestRow>, ReportError> {
    read_rows(reader)
}

pub fn read_creations<R: Read>(reader: R) -> Result<Vec<CreationRecord>, ReportError> {
    read_rows(reader)
}

pub fn read_series<R: Read>(reader: R) -> Result<Vec<SeriesRow>, ReportError> {
    read_rows(reader)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLevelStats {
    pub users: u32,
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Result of post-processing an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub user_levels: Vec<UserLevelStats>,
    pub creations: CreationSummary,
    /// Empty when the summary agrees with the raw files.
    pub inconsistencies: Vec<String>,
}

/// Response-time statistics per user level, with a step CDF for each.
pub fn user_level_cdfs(rows: &[RequestRow]) -> Vec<(UserLevelStats, Vec<(f64, f64)>)> {
    let mut by_users: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_users.entry(r.users).or_default().push(r.response_ms);
    }
    by_users
        .into_iter()
        .filter_map(|(users, mut xs)| {
            let cdf = compute_cdf(&xs).ok()?;
            xs.sort_by(f64::total_cmp);
            let stats = UserLevelStats {
                users,
                count: xs.len(),
                mean_ms: xs.iter().sum::<f64>() / xs.len() as f64,
                p50_ms: percentile(&xs, 0.5),
                p90_ms: percentile(&xs, 0.9),
                p99_ms: percentile(&xs, 0.99),
                max_ms: *xs.last()?,
            };
            Some((stats, cdf))
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-7 * a.abs().max(b.abs()).max(1e-12)
}

/// Compares `summary.json` against aggregates recomputed from the CSVs.
pub fn check_consistency(
    summary: &Summary,
    requests: &[RequestRow],
    creations: &[CreationRecord],
) -> Vec<String> {
    let mut issues = Vec::new();
    let c = CreationSummary::from_records(creations, summary.creations.fill_count);
    let s = &summary.creations;
    if c.count != s.count {
        issues.push(format!(
            "creations: {} rows, summary says {}",
            c.count, s.count
        ));
    }
    let pairs = [
        ("mean_creation_s", c.mean_creation_s, s.mean_creation_s),
        ("min_creation_s", c.min_creation_s, s.min_creation_s),
        ("max_creation_s", c.max_creation_s, s.max_creation_s),
        (
            "total_creation_s",
            Some(c.total_creation_s),
            Some(s.total_creation_s),
        ),
    ];
    for (name, raw, sum) in pairs {
        match (raw, sum) {
            (Some(a), Some(b)) if close(a, b) => {}
            (None, None) => {}
            _ => issues.push(format!("{name}: raw {raw:?} vs summary {sum:?}")),
        }
    }
    let levels = user_level_cdfs(requests);
    for run in &summary.stress {
        let same_level = summary
            .stress
            .iter()
            .filter(|r| r.users == run.users)
            .count();
        if same_level != 1 || run.completed == 0 {
            continue;
        }
        match levels.iter().find(|(l, _)| l.users == run.users) {
            Some((l, _)) => {
                if l.count as u64 != run.completed {
                    issues.push(format!(
                        "users {}: {} rows, summary says {}",
                        run.users, l.count, run.completed
                    ));
                }
                for (name, a, b) in [
                    ("p50_ms", l.p50_ms, run.p50_ms),
                    ("p99_ms", l.p99_ms, run.p99_ms),
                    ("mean_ms", l.mean_ms, run.mean_ms),
                ] {
                    if !close(a, b) {
                        issues.push(format!(
                            "users {}: {name} raw {a} vs summary {b}",
                            run.users
                        ));
                    }
                }
            }
            None => issues.push(format!("users {}: no request rows", run.users)),
        }
    }
    issues
}

/// Reads an output directory, writes `cdf.csv` and `report.json` next to
/// the inputs and returns the analysis.
pub fn analyze_dir(dir: &Path) -> Result<Analysis, ReportError> {
    let requests = read_requests(fs::File::open(dir.join(REQUESTS_CSV))?)?;
    let creations = read_creations(fs::File::open(dir.join(CREATIONS_CSV))?)?;
    let summary: Summary = serde_json::from_slice(&fs::read(dir.join(SUMMARY_JSON))?)?;

    let levels = user_level_cdfs(&requests);
    let cdf_rows = levels.iter().flat_map(|(l, cdf)| {
        cdf.iter()
            .map(move |(x, f)| vec![l.users.to_string(), fmt_sig9(*x), fmt_sig9(*f)])
    });
    fs::write(
        dir.join(CDF_CSV),
        csv_bytes(&["users", "response_ms", "cumulative_fraction"], cdf_rows),
    )?;

    let analysis = Analysis {
        user_levels: levels.into_iter().map(|(l, _)| l).collect(),
        creations: CreationSummary::from_records(&creations, summary.creations.fill_count),
        inconsistencies: check_consistency(&summary, &requests, &creations),
    };
    let mut json = serde_json::to_vec_pretty(&rounded_value(&analysis))?;
    json.push(b'\n');
    fs::write(dir.join(REPORT_JSON), json)?;
    Ok(analysis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_rounding() {
        assert_eq!(fmt_sig9(0.0989), "0.0989");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(2.0 / 3.0 * 1e6), "666666.667");
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(480.0), "480");
        assert_eq!(round_sig9(123_456_789_012.0), 123_456_789_000.0);
    }

    #[test]
    fn empty_report_has_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let digests = emit_metrics(&SimReport::default(), dir.path()).unwrap();
        assert_eq!(digests.len(), 5);
        let series = fs::read_to_string(dir.path().join(SERIES_CSV)).unwrap();
        assert_eq!(series, "time_s,node_id,metric,value\n");
        let creations = fs::read_to_string(dir.path().join(CREATIONS_CSV)).unwrap();
        assert_eq!(
            creations,
            "n,start_s,duration_s,mem_fraction,cpu_fraction\n"
        );
        assert_eq!(fs::read(dir.path().join(EVENTS_NDJSON)).unwrap(), b"");
        let summary: Summary =
            serde_json::from_slice(&fs::read(dir.path().join(SUMMARY_JSON)).unwrap()).unwrap();
        assert_eq!(summary, Summary::default());
        let a = analyze_dir(dir.path()).unwrap();
        assert!(a.inconsistencies.is_empty());
        assert!(a.user_levels.is_empty());
    }

    #[test]
    fn csv_round_trip_through_readers() {
        let rows = vec![
            CreationRecord {
                n: 1,
                start_s: 0.0,
                duration_s: 0.62,
                mem_fraction: 0.099274,
                cpu_fraction: 0.0,
            },
            CreationRecord {
                n: 2,
                start_s: 0.62,
                duration_s: 1.0 / 3.0,
                mem_fraction: 0.1,
                cpu_fraction: 1e-4,
            },
        ];
        let back = read_creations(render_creations(&rows).as_slice()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1].duration_s, 0.333333333);
        assert!(read_requests(&b"users,request_id\n1,x\n"[..]).is_err());
    }

    #[test]
    fn consistency_detects_mismatch() {
        let recs = vec![CreationRecord {
            n: 1,
            start_s: 0.0,
            duration_s: 2.0,
            mem_fraction: 0.1,
            cpu_fraction: 0.0,
        }];
        let mut summary = Summary {
            creations: CreationSummary::from_records(&recs, 1),
            ..Summary::default()
        };
        assert!(check_consistency(&summary, &[], &recs).is_empty());
        summary.creations.mean_creation_s = Some(2.5);
        assert_eq!(check_consistency(&summary, &[], &recs).len(), 1);
    }

    #[test]
    fn json_rounding_touches_only_floats() {
        let mut v = serde_json::json!({"a": 1.23456789012, "b": [7, 0.1], "c": "x"});
        round_json(&mut v);
        assert_eq!(v.to_string(), r#"{"a":1.23456789,"b":[7,0.1],"c":"x"}"#);
    }
}
