//! Round timing reports and the CSV schemas emitted by the CLI and harness.

use std::io;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Server-side decomposition of one round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundReport {
    /// First START received to last END received.
    pub receive_time: Duration,
    /// Last END received to division finished.
    pub compute_time: Duration,
    /// Division finished to last client END_ACK received.
    pub send_time: Duration,
    /// Worker time spent adding chunks before the last END arrived.
    pub overlapped_add_time: Duration,
    /// Worker time spent adding chunks over the whole round.
    pub total_add_time: Duration,
    /// Chunks each client failed to deliver, by ring id.
    pub chunk_loss: Vec<usize>,
    pub counters: RoundCounters,
}

impl RoundReport {
    /// Percentage of expected data chunks that never reached the aggregator.
    pub fn loss_pct(&self, num_chunks: usize) -> f64 {
        let expected = num_chunks * self.chunk_loss.len();
        if expected == 0 {
            return 0.0;
        }
        100.0 * self.chunk_loss.iter().sum::<usize>() as f64 / expected as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundCounters {
    pub datagrams: u64,
    pub data_accepted: u64,
    pub malformed: u64,
    pub unknown_source: u64,
    /// data for a client that was not in its receiving state
    pub out_of_state: u64,
    pub duplicates: u64,
    pub ring_drops: u64,
    pub start_acks: u64,
    pub end_acks: u64,
    /// ENDs ignored because the answer window had closed
    pub late_ends: u64,
    pub end_retransmits: u64,
    /// division started before every ring drained; must stay zero
    pub divide_violations: u64,
}

pub const METRICS_HEADER: &str = "run_id,round,response_time_us,receive_time_us,compute_time_us,send_time_us,loss_pct,test_loss,test_accuracy";

/// One row per round. Fields a given producer cannot observe are left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub round: u32,
    pub response_time_us: Option<u64>,
    pub receive_time_us: Option<u64>,
    pub compute_time_us: Option<u64>,
    pub send_time_us: Option<u64>,
    pub loss_pct: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

impl MetricsRow {
    pub fn from_report(run_id: &str, round: u32, report: &RoundReport, num_chunks: usize) -> Self {
        Self {
            run_id: run_id.to_string(),
            round,
            response_time_us: None,
            receive_time_us: Some(report.receive_time.as_micros() as u64),
            compute_time_us: Some(report.compute_time.as_micros() as u64),
            send_time_us: Some(report.send_time.as_micros() as u64),
            loss_pct: Some(report.loss_pct(num_chunks)),
            test_loss: None,
            test_accuracy: None,
        }
    }
}

pub const CURVE_HEADER: &str = "round,client_id,test_loss,test_accuracy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: u32,
    pub client_id: u32,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

pub const SUMMARY_HEADER: &str = "config,server,mode,loss_rate,repetitions,response_time_us_mean,response_time_us_std,receive_time_us_mean,compute_time_us_mean,send_time_us_mean,final_test_loss_mean,final_test_loss_std,final_accuracy_mean,final_accuracy_std,failed_runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub server: String,
    pub mode: String,
    pub loss_rate: f64,
    pub repetitions: u32,
    pub response_time_us_mean: f64,
    pub response_time_us_std: f64,
    pub receive_time_us_mean: f64,
    pub compute_time_us_mean: f64,
    pub send_time_us_mean: f64,
    pub final_test_loss_mean: Option<f64>,
    pub final_test_loss_std: Option<f64>,
    pub final_accuracy_mean: Option<f64>,
    pub final_accuracy_std: Option<f64>,
    pub failed_runs: u32,
}

pub const LOSS_CURVE_HEADER: &str = "config,round,test_loss_mean,test_loss_std,test_accuracy_mean,test_accuracy_std";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurveRow {
    pub config: String,
    pub round: u32,
    pub test_loss_mean: f64,
    pub test_loss_std: f64,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
}

pub const RUNS_HEADER: &str = "config,repetition,ok,response_time_us_mean,receive_time_us_mean,compute_time_us_mean,send_time_us_mean,final_test_loss,final_test_accuracy";

/// One repetition of one benchmark configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub config: String,
    pub repetition: u32,
    pub ok: bool,
    pub response_time_us_mean: Option<f64>,
    pub receive_time_us_mean: Option<f64>,
    pub compute_time_us_mean: Option<f64>,
    pub send_time_us_mean: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

pub const CONTENTION_HEADER: &str = "mode,workers,elements,adds_per_worker,elapsed_ns,adds_per_sec";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentionRow {
    pub mode: String,
    pub workers: u32,
    pub elements: u64,
    pub adds_per_worker: u64,
    pub elapsed_ns: u64,
    pub adds_per_sec: f64,
}

/// Writes `rows` with a header to `path`, replacing any existing file.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

/// Appends rows to `path`, writing the header only if the file is new or empty.
pub fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(io::Error::other)
}

/// Mean and sample standard deviation; zero deviation for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_of<T: Serialize>(row: &T) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        w.serialize(row).unwrap();
        let out = String::from_utf8(w.into_inner().unwrap()).unwrap();
        out.lines().next().unwrap().to_string()
    }

    #[test]
    fn metrics_header_is_stable() {
        assert_eq!(header_of(&MetricsRow::default()), METRICS_HEADER);
        assert_eq!(
            METRICS_HEADER,
            "run_id,round,response_time_us,receive_time_us,compute_time_us,send_time_us,loss_pct,test_loss,test_accuracy"
        );
    }

    #[test]
    fn other_headers_match_rows() {
        let curve = CurveRow {
            round: 1,
            client_id: 0,
            test_loss: 0.5,
            test_accuracy: 0.9,
        };
        assert_eq!(header_of(&curve), CURVE_HEADER);
        let summary = SummaryRow {
            config: "udp_pipeline/exact".into(),
            server: "udp_pipeline".into(),
            mode: "exact".into(),
            loss_rate: 0.0,
            repetitions: 5,
            response_time_us_mean: 0.0,
            response_time_us_std: 0.0,
            receive_time_us_mean: 0.0,
            compute_time_us_mean: 0.0,
            send_time_us_mean: 0.0,
            final_test_loss_mean: None,
            final_test_loss_std: None,
            final_accuracy_mean: None,
            final_accuracy_std: None,
            failed_runs: 0,
        };
        assert_eq!(header_of(&summary), SUMMARY_HEADER);
        let lc = LossCurveRow {
            config: "c".into(),
            round: 0,
            test_loss_mean: 0.0,
            test_loss_std: 0.0,
            test_accuracy_mean: 0.0,
            test_accuracy_std: 0.0,
        };
        assert_eq!(header_of(&lc), LOSS_CURVE_HEADER);
        let cr = ContentionRow {
            mode: "exact".into(),
            workers: 4,
            elements: 1,
            adds_per_worker: 1,
            elapsed_ns: 1,
            adds_per_sec: 1.0,
        };
        assert_eq!(header_of(&cr), CONTENTION_HEADER);
        let run = RunRow {
            config: "c".into(),
            repetition: 0,
            ok: true,
            response_time_us_mean: None,
            receive_time_us_mean: None,
            compute_time_us_mean: None,
            send_time_us_mean: None,
            final_test_loss: None,
            final_test_accuracy: None,
        };
        assert_eq!(header_of(&run), RUNS_HEADER);
    }

    #[test]
    fn append_writes_header_once() {
        let dir = std::env::temp_dir().join(format!("fedpipe-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let _ = std::fs::remove_file(&path);
        let row = MetricsRow {
            run_id: "r".into(),
            round: 3,
            receive_time_us: Some(12),
            ..Default::default()
        };
        append_csv(&path, &[row.clone()]).unwrap();
        append_csv(&path, &[row.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("run_id")).count(), 1);
        let back: Vec<MetricsRow> = read_csv(&path).unwrap();
        assert_eq!(back, vec![row.clone(), row]);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loss_pct_and_stats() {
        let r = RoundReport {
            chunk_loss: vec![1, 0, 3, 0],
            ..Default::default()
        };
        assert!((r.loss_pct(10) - 10.0).abs() < 1e-12);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
