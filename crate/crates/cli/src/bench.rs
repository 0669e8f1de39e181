//! Process-level benchmark orchestration. Every repetition of every
//! configuration runs one server process and N client processes of this
//! same executable, each writing its own CSV; the orchestrator then reads
//! them back and aggregates.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use clap::Args;
use fedpipe::harness::{measure_contention, ServerKind};
use fedpipe::metrics::{
    mean_std, read_csv, write_csv, ContentionRow, CurveRow, LossCurveRow, MetricsRow, RunRow, SummaryRow,
    LOSS_CURVE_HEADER,
};
use fedpipe::trainer::ModelShape;
use fedpipe::AggregationMode;

use crate::{usage, CliError};

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Comma-separated server/mode cells, e.g. udp_pipeline/exact,tcp_baseline/approx.
    #[arg(
        long,
        default_value = "udp_pipeline/exact,udp_pipeline/approx,tcp_baseline/exact,tcp_baseline/approx"
    )]
    pub matrix: String,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 10)]
    pub clients: usize,
    #[arg(long, default_value_t = 5)]
    pub workers: usize,
    #[arg(long, default_value_t = 20)]
    pub rounds: usize,
    /// Seeded inbound drop rate on the UDP server.
    #[arg(long, default_value_t = 0.0)]
    pub loss_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub loss_seed: u64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f32,
    /// Base training seed; repetition r uses seed + r.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 2_000)]
    pub test_samples: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long)]
    pub payload_only: bool,
    /// Vector length for --payload-only.
    #[arg(long, default_value_t = 2_000_000)]
    pub params: usize,
    #[arg(long, default_value = "bench-out")]
    pub out_dir: PathBuf,
    /// Wall-clock limit for one repetition.
    #[arg(long, default_value_t = 300)]
    pub timeout_s: u64,
    /// Adds per worker in the contention measurement; 0 skips it.
    #[arg(long, default_value_t = 2_000_000)]
    pub contention_adds: usize,
    #[arg(long, default_value_t = 4)]
    pub contention_workers: usize,
    #[arg(long, default_value_t = 1024)]
    pub contention_elements: usize,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    server: ServerKind,
    mode: AggregationMode,
}

impl Cell {
    fn label(&self) -> String {
        format!("{}/{}", self.server, self.mode)
    }

    fn slug(&self) -> String {
        format!("{}_{}", self.server, self.mode)
    }
}

fn parse_matrix(spec: &str) -> Result<Vec<Cell>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|cell| {
            let (server, mode) = cell
                .split_once('/')
                .ok_or_else(|| usage(format!("matrix cell {cell:?} is not server/mode")))?;
            Ok(Cell {
                server: server.parse().map_err(usage)?,
                mode: mode.parse().map_err(usage)?,
            })
        })
        .collect()
}

impl BenchArgs {
    fn validate(&self) -> Result<Vec<Cell>, CliError> {
        let cells = parse_matrix(&self.matrix)?;
        if cells.is_empty() {
            return Err(usage("--matrix names no configurations"));
        }
        if self.repetitions == 0 || self.clients == 0 || self.workers == 0 || self.rounds == 0 {
            return Err(usage("--repetitions, --clients, --workers and --rounds must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(usage("--loss-rate must lie in [0, 1]"));
        }
        if self.loss_rate > 0.0 && cells.iter().any(|c| c.server == ServerKind::TcpBaseline) {
            return Err(usage("loss injection applies to udp_pipeline cells only"));
        }
        Ok(cells)
    }

    fn param_count(&self) -> usize {
        if self.payload_only {
            self.params
        } else {
            ModelShape::new(self.dim, self.classes).param_count()
        }
    }

    fn server_args(&self, cell: Cell, rep: usize, csv: &Path) -> Vec<String> {
        let mut a = vec![
            "server".into(),
            format!("--transport={}", cell.server),
            format!("--mode={}", cell.mode),
            format!("--clients={}", self.clients),
            format!("--workers={}", self.workers),
            format!("--params={}", self.param_count()),
            format!("--rounds={}", self.rounds),
            format!("--run-id={}#{rep}", cell.label()),
            format!("--csv={}", csv.display()),
        ];
        if self.loss_rate > 0.0 {
            a.push(format!("--loss-rate={}", self.loss_rate));
            a.push(format!("--loss-seed={}", self.loss_seed + rep as u64));
        }
        a
    }

    fn client_args(&self, cell: Cell, rep: usize, id: usize, addr: &str, dir: &Path) -> Vec<String> {
        let mut a = vec![
            "client".into(),
            format!("--id={id}"),
            format!("--server={addr}"),
            format!("--transport={}", cell.server),
            format!("--clients={}", self.clients),
            format!("--rounds={}", self.rounds),
            format!("--epochs={}", self.epochs),
            format!("--batch={}", self.batch),
            format!("--eta={}", self.eta),
            format!("--seed={}", self.seed + rep as u64),
            format!("--data-seed={}", self.data_seed),
            format!("--train-samples={}", self.train_samples),
            format!("--test-samples={}", self.test_samples),
            format!("--dim={}", self.dim),
            format!("--classes={}", self.classes),
            format!("--run-id={}#{rep}", cell.label()),
            format!("--csv={}", dir.join(format!("client_{id}.csv")).display()),
            format!("--curve={}", dir.join(format!("curve_{id}.csv")).display()),
        ];
        if self.payload_only {
            a.push("--payload-only".into());
            a.push(format!("--params={}", self.params));
        }
        a
    }
}

fn kill_all(children: &mut [Child]) {
    for c in children.iter_mut() {
        let _ = c.kill();
        let _ = c.wait();
    }
}

/// Runs one repetition; the returned error describes the first failure.
fn run_once(args: &BenchArgs, cell: Cell, rep: usize, dir: &Path) -> anyhow::Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir)?;
    let exe = std::env::current_exe().context("locating this executable")?;
    let deadline = Instant::now() + Duration::from_secs(args.timeout_s);

    let mut server = Command::new(&exe)
        .args(args.server_args(cell, rep, &dir.join("server.csv")))
        .stdout(Stdio::piped())
        .stderr(File::create(dir.join("server.log"))?)
        .spawn()
        .context("spawning server")?;
    let mut out = BufReader::new(server.stdout.take().expect("piped stdout"));
    let mut first = String::new();
    out.read_line(&mut first)?;
    let Some(addr) = first.trim().strip_prefix("listening on ").map(str::to_string) else {
        kill_all(std::slice::from_mut(&mut server));
        bail!("server did not report its address (got {first:?})");
    };
    // keep the pipe drained so per-round lines never block the server
    let drain = thread::spawn(move || {
        let mut sink = String::new();
        let _ = out.read_to_string(&mut sink);
        sink
    });

    let mut children = vec![server];
    for id in 0..args.clients {
        let child = Command::new(&exe)
            .args(args.client_args(cell, rep, id, &addr, dir))
            .stdout(Stdio::null())
            .stderr(File::create(dir.join(format!("client_{id}.log")))?)
            .spawn();
        match child {
            Ok(c) => children.push(c),
            Err(e) => {
                kill_all(&mut children);
                return Err(e).context("spawning client");
            }
        }
    }

    let mut status = vec![None; children.len()];
    while status.iter().any(Option::is_none) {
        for (i, c) in children.iter_mut().enumerate() {
            if status[i].is_none() {
                status[i] = c.try_wait()?;
            }
        }
        if Instant::now() >= deadline {
            kill_all(&mut children);
            bail!("timed out after {} s", args.timeout_s);
        }
        thread::sleep(Duration::from_millis(20));
    }
    let stdout = drain.join().unwrap_or_default();
    fs::write(dir.join("server.out"), stdout)?;
    for (i, s) in status.iter().enumerate() {
        let s = s.expect("all exited");
        if !s.success() {
            let who = if i == 0 { "server".to_string() } else { format!("client {}", i - 1) };
            bail!("{who} exited with {s}; see logs in {}", dir.display());
        }
    }
    Ok(())
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| mean_std(&v).0)
}

/// Per-round (mean loss, mean accuracy) over the clients of one run.
fn run_curve(dir: &Path, clients: usize) -> anyhow::Result<Vec<(f64, f64)>> {
    let mut rows: Vec<CurveRow> = Vec::new();
    for id in 0..clients {
        let path = dir.join(format!("curve_{id}.csv"));
        if path.exists() {
            rows.extend(read_csv::<CurveRow>(&path)?);
        }
    }
    let rounds = rows.iter().map(|r| r.round as usize + 1).max().unwrap_or(0);
    Ok((0..rounds)
        .map(|round| {
            let here: Vec<&CurveRow> = rows.iter().filter(|r| r.round as usize == round).collect();
            let n = here.len() as f64;
            (
                here.iter().map(|r| r.test_loss).sum::<f64>() / n,
                here.iter().map(|r| r.test_accuracy).sum::<f64>() / n,
            )
        })
        .collect())
}

fn summarize_run(cell: Cell, rep: usize, dir: &Path, clients: usize, ok: bool) -> anyhow::Result<(RunRow, Vec<(f64, f64)>)> {
    let server: Vec<MetricsRow> = read_csv(&dir.join("server.csv")).unwrap_or_default();
    let mut client_rows: Vec<MetricsRow> = Vec::new();
    for id in 0..clients {
        client_rows.extend(read_csv::<MetricsRow>(&dir.join(format!("client_{id}.csv"))).unwrap_or_default());
    }
    let curve = if ok { run_curve(dir, clients)? } else { Vec::new() };
    let last = curve.last().copied();
    Ok((
        RunRow {
            config: cell.label(),
            repetition: rep as u32,
            ok,
            response_time_us_mean: mean_of(client_rows.iter().filter_map(|r| r.response_time_us).map(|v| v as f64)),
            receive_time_us_mean: mean_of(server.iter().filter_map(|r| r.receive_time_us).map(|v| v as f64)),
            compute_time_us_mean: mean_of(server.iter().filter_map(|r| r.compute_time_us).map(|v| v as f64)),
            send_time_us_mean: mean_of(server.iter().filter_map(|r| r.send_time_us).map(|v| v as f64)),
            final_test_loss: last.map(|l| l.0),
            final_test_accuracy: last.map(|l| l.1),
        },
        curve,
    ))
}

fn stats(values: &[Option<f64>]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    mean_std(&v)
}

fn nonempty(v: (f64, f64)) -> (Option<f64>, Option<f64>) {
    if v.0.is_nan() {
        (None, None)
    } else {
        (Some(v.0), Some(v.1))
    }
}

fn contention(args: &BenchArgs) -> Vec<ContentionRow> {
    let mut rows = Vec::new();
    for _ in 0..5 {
        for mode in [AggregationMode::Exact, AggregationMode::Approximate] {
            rows.push(measure_contention(
                mode,
                args.contention_workers,
                args.contention_elements,
                args.contention_adds,
            ));
        }
    }
    rows
}

pub fn run(args: BenchArgs) -> Result<(), CliError> {
    let cells = args.validate()?;
    if args.contention_adds > 0 && (args.contention_workers == 0 || args.contention_elements == 0) {
        return Err(usage("--contention-workers and --contention-elements must be at least 1"));
    }
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    println!(
        "matrix: {{udp_pipeline, tcp_baseline}} x {{exact, approx}} on host processes; {} cell(s), {} repetition(s)",
        cells.len(),
        args.repetitions
    );

    let mut runs = Vec::new();
    let mut summary = Vec::new();
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for cell in &cells {
        let mut cell_runs = Vec::new();
        let mut cell_curves = Vec::new();
        for rep in 0..args.repetitions {
            let dir = args.out_dir.join("runs").join(format!("{}_rep{rep}", cell.slug()));
            let result = run_once(&args, *cell, rep, &dir);
            if let Err(e) = &result {
                eprintln!("{} repetition {rep} failed: {e:#}", cell.label());
                failures.push(format!("{}#{rep}", cell.label()));
            }
            let (row, curve) = summarize_run(*cell, rep, &dir, args.clients, result.is_ok())?;
            println!(
                "{} #{rep}: {} response {:.0} us, final accuracy {}",
                cell.label(),
                if row.ok { "ok" } else { "FAILED" },
                row.response_time_us_mean.unwrap_or(f64::NAN),
                row.final_test_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
            );
            cell_runs.push(row);
            if !curve.is_empty() {
                cell_curves.push(curve);
            }
        }
        let ok: Vec<&RunRow> = cell_runs.iter().filter(|r| r.ok).collect();
        let pick = |f: fn(&RunRow) -> Option<f64>| ok.iter().map(|r| f(r)).collect::<Vec<_>>();
        let resp = stats(&pick(|r| r.response_time_us_mean));
        let (loss_m, loss_s) = nonempty(stats(&pick(|r| r.final_test_loss)));
        let (acc_m, acc_s) = nonempty(stats(&pick(|r| r.final_test_accuracy)));
        summary.push(SummaryRow {
            config: cell.label(),
            server: cell.server.to_string(),
            mode: cell.mode.to_string(),
            loss_rate: args.loss_rate,
            repetitions: args.repetitions as u32,
            response_time_us_mean: resp.0,
            response_time_us_std: resp.1,
            receive_time_us_mean: stats(&pick(|r| r.receive_time_us_mean)).0,
            compute_time_us_mean: stats(&pick(|r| r.compute_time_us_mean)).0,
            send_time_us_mean: stats(&pick(|r| r.send_time_us_mean)).0,
            final_test_loss_mean: loss_m,
            final_test_loss_std: loss_s,
            final_accuracy_mean: acc_m,
            final_accuracy_std: acc_s,
            failed_runs: (cell_runs.len() - ok.len()) as u32,
        });
        let rounds = cell_curves.iter().map(Vec::len).min().unwrap_or(0);
        for round in 0..rounds {
            let losses: Vec<f64> = cell_curves.iter().map(|c| c[round].0).collect();
            let accs: Vec<f64> = cell_curves.iter().map(|c| c[round].1).collect();
            let (lm, ls) = mean_std(&losses);
            let (am, as_) = mean_std(&accs);
            curves.push(LossCurveRow {
                config: cell.label(),
                round: round as u32,
                test_loss_mean: lm,
                test_loss_std: ls,
                test_accuracy_mean: am,
                test_accuracy_std: as_,
            });
        }
        runs.extend(cell_runs);
    }

    let out = &args.out_dir;
    write_csv(&out.join("runs.csv"), &runs).context("writing runs.csv")?;
    write_csv(&out.join("summary.csv"), &summary).context("writing summary.csv")?;
    if curves.is_empty() {
        fs::write(out.join("loss_curve.csv"), format!("{LOSS_CURVE_HEADER}\n")).context("writing loss_curve.csv")?;
    } else {
        write_csv(&out.join("loss_curve.csv"), &curves).context("writing loss_curve.csv")?;
    }
    if args.contention_adds > 0 {
        let rows = contention(&args);
        write_csv(&out.join("contention.csv"), &rows).context("writing contention.csv")?;
        let median = |mode: &str| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.mode == mode).map(|r| r.adds_per_sec).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        println!(
            "contention: approx/exact throughput {:.2} ({} workers, {} elements)",
            median("approx") / median("exact"),
            args.contention_workers,
            args.contention_elements
        );
    }
    println!("results in {}", out.display());
    if !failures.is_empty() {
        return Err(CliError::Runtime(anyhow!(
            "{} of {} runs failed: {}",
            failures.len(),
            cells.len() * args.repetitions,
            failures.join(", ")
        )));
    }
    Ok(())
}
