use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::Args;
use fedpipe::client::{ClientConfig, ClientSession};
use fedpipe::harness::{make_datasets, payload_vector, ClientTrainer, DataSpec, ServerKind};
use fedpipe::metrics::{append_csv, CurveRow, MetricsRow};
use fedpipe::tcp::tcp_exchange;
use fedpipe::trainer::{evaluate, Dataset, HyperParams};
use fedpipe::{ChunkLayout, Endpoint};

use crate::{usage, CliError};

#[derive(Args, Debug, Clone)]
pub struct ClientArgs {
    #[arg(long, default_value_t = 0)]
    pub id: usize,
    /// Server address, host:port.
    #[arg(long)]
    pub server: String,
    #[arg(long, default_value = "udp")]
    pub transport: ServerKind,
    /// Number of clients sharing the training set.
    #[arg(long, default_value_t = 10)]
    pub clients: usize,
    #[arg(long, default_value_t = 20)]
    pub rounds: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f32,
    /// Shuffle and selection seed, shared by all clients of a run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of clients that train each round.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
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
    /// Send seeded random vectors of --params elements instead of training.
    #[arg(long)]
    pub payload_only: bool,
    #[arg(long)]
    pub params: Option<usize>,
    /// Bind the UDP source port to base + id.
    #[arg(long)]
    pub base_port: Option<u16>,
    #[arg(long, default_value_t = 100)]
    pub retransmit_ms: u64,
    #[arg(long, default_value_t = 30)]
    pub deadline_s: u64,
    /// After the last round, keep answering the server's ENDs this long.
    #[arg(long, default_value_t = 1000)]
    pub linger_ms: u64,
    /// Append one metrics row per round here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Append test loss and accuracy of the merged model per round here.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub run_id: String,
}

enum Local {
    Payload { p: usize, seed: u64, id: usize },
    Train { trainer: Box<ClientTrainer>, test: Dataset },
}

impl Local {
    fn param_count(&self) -> usize {
        match self {
            Local::Payload { p, .. } => *p,
            Local::Train { trainer, .. } => trainer.shard.shape.param_count(),
        }
    }

    fn next(&self, round: usize, previous: Option<&[f32]>) -> anyhow::Result<Vec<f32>> {
        match self {
            Local::Payload { p, seed, id } => Ok(payload_vector(*p, *seed, *id, round)),
            Local::Train { trainer, .. } => trainer.step(round, previous).context("local training"),
        }
    }

    fn evaluate(&self, merged: &[f32]) -> anyhow::Result<Option<(f64, f64)>> {
        match self {
            Local::Payload { .. } => Ok(None),
            Local::Train { test, .. } => Ok(Some(evaluate(merged, test).context("evaluating merged model")?)),
        }
    }
}

impl ClientArgs {
    fn local(&self) -> Result<Local, CliError> {
        if self.id >= self.clients {
            return Err(usage(format!("--id {} out of range for {} clients", self.id, self.clients)));
        }
        if self.rounds == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(usage("--rounds, --epochs and --batch must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(usage("--eta must be positive"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(usage("--fraction must lie in (0, 1]"));
        }
        if self.payload_only {
            let p = self.params.ok_or_else(|| usage("--payload-only needs --params"))?;
            if p == 0 {
                return Err(usage("--params must be at least 1"));
            }
            return Ok(Local::Payload {
                p,
                seed: self.seed,
                id: self.id,
            });
        }
        let spec = DataSpec {
            n_train: self.train_samples,
            n_test: self.test_samples,
            dim: self.dim,
            classes: self.classes,
            seed: self.data_seed,
        };
        let (train, test) = make_datasets(&spec, self.clients).map_err(|e| usage(e.to_string()))?;
        if let Some(p) = self.params {
            if p != train.shape.param_count() {
                return Err(usage(format!(
                    "--params {p} does not match the model size {}",
                    train.shape.param_count()
                )));
            }
        }
        let hp = HyperParams {
            epochs: self.epochs,
            batch: self.batch,
            eta: self.eta,
            rounds: self.rounds,
            seed: self.seed,
        };
        Ok(Local::Train {
            trainer: Box::new(ClientTrainer::new(&train, hp, self.id, self.clients, self.fraction)),
            test,
        })
    }
}

struct Exchange {
    merged: Vec<f32>,
    response_time: Duration,
    loss_pct: f64,
}

fn resolve(server: &str) -> anyhow::Result<SocketAddr> {
    server
        .to_socket_addrs()
        .with_context(|| format!("resolving {server}"))?
        .next()
        .ok_or_else(|| anyhow!("{server} resolves to no address"))
}

pub fn run(args: ClientArgs) -> Result<(), CliError> {
    let local = args.local()?;
    let p = local.param_count();
    let layout = ChunkLayout::with_default_capacity(p).map_err(|e| usage(e.to_string()))?;
    let server = resolve(&args.server)?;
    let deadline = Duration::from_secs(args.deadline_s);

    let mut session = match args.transport {
        ServerKind::UdpPipeline => {
            let mut cfg = ClientConfig::new(Endpoint::new(server).context("server address")?, layout);
            cfg.retransmit_interval = Duration::from_millis(args.retransmit_ms);
            cfg.deadline = deadline;
            if let Some(base) = args.base_port {
                let id = u16::try_from(args.id).map_err(|_| usage("--id too large for a port offset"))?;
                cfg = cfg.with_fixed_port(base, id);
            }
            Some(ClientSession::connect(cfg).context("binding client socket")?)
        }
        ServerKind::TcpBaseline => None,
    };

    let mut previous: Option<Vec<f32>> = None;
    for round in 0..args.rounds {
        let params = local.next(round, previous.as_deref())?;
        let ex = match session.as_mut() {
            Some(s) => {
                let r = s.run_round(&params).with_context(|| format!("round {round}"))?;
                Exchange {
                    loss_pct: 100.0 * (1.0 - r.chunks_received() as f64 / layout.num_chunks() as f64),
                    response_time: r.response_time,
                    merged: r.merged,
                }
            }
            None => {
                let t = Instant::now();
                let merged = tcp_exchange(server, &params, deadline).with_context(|| format!("round {round}"))?;
                Exchange {
                    merged,
                    response_time: t.elapsed(),
                    loss_pct: 0.0,
                }
            }
        };
        let eval = local.evaluate(&ex.merged)?;
        let row = MetricsRow {
            run_id: args.run_id.clone(),
            round: round as u32,
            response_time_us: Some(ex.response_time.as_micros() as u64),
            loss_pct: Some(ex.loss_pct),
            test_loss: eval.map(|e| e.0),
            test_accuracy: eval.map(|e| e.1),
            ..Default::default()
        };
        match eval {
            Some((loss, acc)) => println!(
                "round {round}: response {} us, test loss {loss:.4}, accuracy {acc:.4}",
                ex.response_time.as_micros()
            ),
            None => println!("round {round}: response {} us", ex.response_time.as_micros()),
        }
        if let Some(path) = &args.csv {
            append_csv(path, &[row]).with_context(|| format!("writing {}", path.display()))?;
        }
        if let (Some(path), Some((test_loss, test_accuracy))) = (&args.curve, eval) {
            let row = CurveRow {
                round: round as u32,
                client_id: args.id as u32,
                test_loss,
                test_accuracy,
            };
            append_csv(path, &[row]).with_context(|| format!("writing {}", path.display()))?;
        }
        previous = Some(ex.merged);
    }
    if let Some(s) = session.as_mut() {
        s.linger(Duration::from_millis(args.linger_ms)).context("final END exchange")?;
    }
    Ok(())
}
