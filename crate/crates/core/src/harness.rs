//! In-process orchestration: one server and N clients on separate threads
//! of this process, talking over loopback.

use std::fmt;
use std::str::FromStr;
use std::sync::{mpsc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use crate::aggregator::{Accumulator, AggregationMode};
use crate::client::{ClientConfig, ClientError, ClientRound, ClientSession};
use crate::metrics::{ContentionRow, CurveRow};
use crate::server::{Registration, RoundOutcome, ServerConfig, ServerError, UdpServer};
use crate::tcp::{tcp_exchange, TcpError, TcpServer, TcpServerConfig};
use crate::trainer::{self, Dataset, HyperParams, ModelShape, TrainError};
use crate::transport::{DropRecord, Endpoint, LossDirection, LossPolicy};
use crate::wire::ChunkLayout;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("server: {0}")]
    Server(#[from] ServerError),
    #[error("tcp server: {0}")]
    TcpServer(#[source] TcpError),
    #[error("tcp client {id}: {source}")]
    TcpClient {
        id: usize,
        #[source]
        source: TcpError,
    },
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("client {id}: {source}")]
    Client {
        id: usize,
        #[source]
        source: ClientError,
    },
    #[error("{0} thread panicked")]
    Panic(&'static str),
}

/// Everything observed about one round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub outcome: RoundOutcome,
    /// Indexed by client id, which is also the server ring id.
    pub clients: Vec<ClientRound>,
    /// UDP source port of each client; empty for TCP runs.
    pub client_ports: Vec<u16>,
    pub server_inbound_drops: Vec<DropRecord>,
    pub server_outbound_drops: Vec<DropRecord>,
}

#[derive(Debug, Clone)]
pub struct UdpRunConfig {
    pub server: ServerConfig,
    pub rounds: usize,
    pub client_loss: LossPolicy,
    pub retransmit_interval: Duration,
    pub client_deadline: Duration,
}

impl UdpRunConfig {
    pub fn new(server: ServerConfig, rounds: usize) -> Self {
        Self {
            rounds,
            client_loss: LossPolicy::lossless(),
            retransmit_interval: server.retransmit_interval,
            client_deadline: server.client_deadline,
            server,
        }
    }
}

/// Source of each client's local parameters. Called as
/// `local(round, client_id, previous_merged)`; `previous_merged` is `None`
/// in the first round.
pub trait LocalUpdate: Sync {
    fn local(&self, round: usize, client: usize, previous: Option<&[f32]>) -> Vec<f32>;
}

impl<F> LocalUpdate for F
where
    F: Fn(usize, usize, Option<&[f32]>) -> Vec<f32> + Sync,
{
    fn local(&self, round: usize, client: usize, previous: Option<&[f32]>) -> Vec<f32> {
        self(round, client, previous)
    }
}

/// A served round with the server's inbound and outbound drop traces.
type TracedRound = (RoundOutcome, Vec<DropRecord>, Vec<DropRecord>);

/// Runs `cfg.rounds` rounds between one server and `n_clients` sessions.
/// Per-round client results are returned in the order the rounds ran.
pub fn run_udp<U: LocalUpdate>(cfg: &UdpRunConfig, update: &U) -> Result<Vec<RoundRecord>, HarnessError> {
    let n = cfg.server.n_clients;
    // Clients bind first so the server can map their ports onto ring ids in
    // client-id order.
    let placeholder = Endpoint::resolve("127.0.0.1:9").expect("literal address");
    let mut bound = Vec::with_capacity(n);
    for id in 0..n {
        let mut c = ClientConfig::new(placeholder, cfg.server.layout);
        c.loss = cfg.client_loss;
        c.retransmit_interval = cfg.retransmit_interval;
        c.deadline = cfg.client_deadline;
        bound.push(ClientSession::connect(c).map_err(|e| HarnessError::Client { id, source: e })?);
    }
    let mut server_cfg = cfg.server.clone();
    let ports: Vec<u16> = bound.iter().map(|s| s.local().port()).collect();
    server_cfg.registration = Registration::Static(ports.clone());
    let mut server = UdpServer::bind(server_cfg)?;
    for s in bound.iter_mut() {
        s.set_server(server.local());
    }

    let rounds = cfg.rounds;
    let quiet = cfg.retransmit_interval * 10;
    thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(usize, usize, Result<ClientRound, ClientError>)>();
        let mut handles = Vec::with_capacity(n);
        for (id, mut session) in bound.into_iter().enumerate() {
            let tx = tx.clone();
            handles.push(s.spawn(move || {
                let mut previous: Option<Vec<f32>> = None;
                for round in 0..rounds {
                    let params = update.local(round, id, previous.as_deref());
                    let result = session.run_round(&params);
                    let failed = result.is_err();
                    if let Ok(r) = &result {
                        previous = Some(r.merged.clone());
                    }
                    let _ = tx.send((round, id, result));
                    if failed {
                        return;
                    }
                }
                let _ = session.linger(quiet);
            }));
        }
        drop(tx);

        let server_handle = s.spawn(move || -> Result<Vec<TracedRound>, ServerError> {
            let mut out = Vec::with_capacity(rounds);
            for _ in 0..rounds {
                let outcome = server.serve_round()?;
                let (inb, outb) = server.take_drops();
                out.push((outcome, inb, outb));
            }
            Ok(out)
        });

        let mut per_round: Vec<Vec<Option<ClientRound>>> = vec![vec![None; n]; rounds];
        let mut client_err = None;
        for (round, id, result) in rx {
            match result {
                Ok(r) => per_round[round][id] = Some(r),
                Err(e) => {
                    client_err.get_or_insert(HarnessError::Client { id, source: e });
                }
            }
        }
        for h in handles {
            h.join().map_err(|_| HarnessError::Panic("client"))?;
        }
        let server_rounds = server_handle
            .join()
            .map_err(|_| HarnessError::Panic("server"))??;
        if let Some(e) = client_err {
            return Err(e);
        }
        Ok(server_rounds
            .into_iter()
            .zip(per_round)
            .enumerate()
            .map(|(round, ((outcome, inb, outb), clients))| RoundRecord {
                round,
                outcome,
                clients: clients.into_iter().map(|c| c.expect("every client reported")).collect(),
                client_ports: ports.clone(),
                server_inbound_drops: inb,
                server_outbound_drops: outb,
            })
            .collect())
    })
}

#[derive(Debug, Clone)]
pub struct TcpRunConfig {
    pub server: TcpServerConfig,
    pub rounds: usize,
    pub client_timeout: Duration,
}

/// The TCP counterpart of [`run_udp`]. Client records report every chunk as
/// received and leave the datagram counters at zero.
pub fn run_tcp<U: LocalUpdate>(cfg: &TcpRunConfig, update: &U) -> Result<Vec<RoundRecord>, HarnessError> {
    let n = cfg.server.n_clients;
    let p = cfg.server.param_count;
    let mut server = TcpServer::bind(cfg.server.clone()).map_err(HarnessError::TcpServer)?;
    let addr = server.local().map_err(|e| HarnessError::TcpServer(e.into()))?;
    let num_chunks = ChunkLayout::with_default_capacity(p)
        .map_err(|e| HarnessError::Config(e.to_string()))?
        .num_chunks();
    let rounds = cfg.rounds;
    let timeout = cfg.client_timeout;

    thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(usize, usize, Result<ClientRound, TcpError>)>();
        let mut handles = Vec::with_capacity(n);
        for id in 0..n {
            let tx = tx.clone();
            handles.push(s.spawn(move || {
                let mut previous: Option<Vec<f32>> = None;
                for round in 0..rounds {
                    let params = update.local(round, id, previous.as_deref());
                    let t = Instant::now();
                    let result = tcp_exchange(addr, &params, timeout).map(|merged| ClientRound {
                        merged,
                        received: vec![true; num_chunks],
                        response_time: t.elapsed(),
                        data_sent: 1,
                        ..Default::default()
                    });
                    let failed = result.is_err();
                    if let Ok(r) = &result {
                        previous = Some(r.merged.clone());
                    }
                    let _ = tx.send((round, id, result));
                    if failed {
                        return;
                    }
                }
            }));
        }
        drop(tx);

        let server_handle = s.spawn(move || -> Result<Vec<RoundOutcome>, TcpError> {
            (0..rounds).map(|_| server.serve_round()).collect()
        });

        let mut per_round: Vec<Vec<Option<ClientRound>>> = vec![vec![None; n]; rounds];
        let mut client_err = None;
        for (round, id, result) in rx {
            match result {
                Ok(r) => per_round[round][id] = Some(r),
                Err(e) => {
                    client_err.get_or_insert(HarnessError::TcpClient { id, source: e });
                }
            }
        }
        for h in handles {
            h.join().map_err(|_| HarnessError::Panic("client"))?;
        }
        if let Some(e) = client_err {
            return Err(e);
        }
        let outcomes = server_handle
            .join()
            .map_err(|_| HarnessError::Panic("server"))?
            .map_err(HarnessError::TcpServer)?;
        Ok(outcomes
            .into_iter()
            .zip(per_round)
            .enumerate()
            .map(|(round, (outcome, clients))| RoundRecord {
                round,
                outcome,
                clients: clients.into_iter().map(|c| c.expect("every client reported")).collect(),
                client_ports: Vec::new(),
                server_inbound_drops: Vec::new(),
                server_outbound_drops: Vec::new(),
            })
            .collect())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServerKind {
    UdpPipeline,
    TcpBaseline,
}

impl ServerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ServerKind::UdpPipeline => "udp_pipeline",
            ServerKind::TcpBaseline => "tcp_baseline",
        }
    }
}

impl fmt::Display for ServerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "udp" | "udp_pipeline" => Ok(ServerKind::UdpPipeline),
            "tcp" | "tcp_baseline" => Ok(ServerKind::TcpBaseline),
            other => Err(format!("unknown transport {other:?} (expected udp or tcp)")),
        }
    }
}

/// Synthetic dataset dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_test: 2_000,
            dim: 32,
            classes: 10,
            seed: 1,
        }
    }
}

/// Seed of the test split; the train split uses `spec.seed` itself.
pub fn test_seed(spec: &DataSpec) -> u64 {
    spec.seed ^ 0x7E57_7E57_7E57_7E57
}

pub fn make_datasets(spec: &DataSpec, n_clients: usize) -> Result<(Dataset, Dataset), TrainError> {
    Ok((
        trainer::gen_synthetic(spec.seed, spec.n_train, spec.dim, spec.classes, n_clients)?,
        trainer::gen_synthetic(test_seed(spec), spec.n_test, spec.dim, spec.classes, 1)?,
    ))
}

/// Shuffle seed of client `id`; client 0 uses the base seed unchanged.
pub fn client_seed(base: u64, id: usize) -> u64 {
    base ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone)]
pub struct FederatedConfig {
    pub kind: ServerKind,
    pub mode: AggregationMode,
    pub n_clients: usize,
    pub n_workers: usize,
    /// Seeded drop rate on datagrams arriving at the UDP server.
    pub loss_rate: f64,
    pub loss_seed: u64,
    pub hp: HyperParams,
    pub data: DataSpec,
    /// Share of clients that train each round; the rest resend the model
    /// they were given.
    pub client_fraction: f64,
    pub retransmit_interval: Duration,
    pub deadline: Duration,
}

impl FederatedConfig {
    pub fn new(kind: ServerKind, mode: AggregationMode, n_clients: usize, n_workers: usize) -> Self {
        Self {
            kind,
            mode,
            n_clients,
            n_workers,
            loss_rate: 0.0,
            loss_seed: 0,
            hp: HyperParams::default(),
            data: DataSpec::default(),
            client_fraction: 1.0,
            retransmit_interval: Duration::from_millis(100),
            deadline: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub records: Vec<RoundRecord>,
    /// Every client's merged model evaluated on the test split after each round.
    pub curve: Vec<CurveRow>,
}

impl FederatedRun {
    /// Mean test loss and accuracy over clients after `round`.
    pub fn round_mean(&self, round: usize) -> (f64, f64) {
        let rows: Vec<_> = self.curve.iter().filter(|r| r.round as usize == round).collect();
        let n = rows.len() as f64;
        (
            rows.iter().map(|r| r.test_loss).sum::<f64>() / n,
            rows.iter().map(|r| r.test_accuracy).sum::<f64>() / n,
        )
    }

    pub fn final_mean(&self) -> (f64, f64) {
        self.round_mean(self.records.len() - 1)
    }
}

/// One client's side of federated training: its shard and schedule.
#[derive(Debug, Clone)]
pub struct ClientTrainer {
    pub id: usize,
    pub n_clients: usize,
    pub shard: Dataset,
    pub hp: HyperParams,
    pub fraction: f64,
}

impl ClientTrainer {
    pub fn new(train: &Dataset, hp: HyperParams, id: usize, n_clients: usize, fraction: f64) -> Self {
        Self {
            id,
            n_clients,
            shard: train.shard(id as u32),
            hp,
            fraction,
        }
    }

    /// Local parameters for `round`, starting from the model adopted after
    /// the previous round (zeros before the first). Clients not selected
    /// this round return their starting model unchanged.
    pub fn step(&self, round: usize, previous: Option<&[f32]>) -> Result<Vec<f32>, TrainError> {
        let start = previous.map(<[f32]>::to_vec).unwrap_or_else(|| self.shard.shape.zeros());
        if !trainer::select_clients(self.hp.seed, round as u64, self.n_clients, self.fraction)[self.id] {
            return Ok(start);
        }
        let local = HyperParams {
            seed: client_seed(self.hp.seed, self.id),
            ..self.hp
        };
        trainer::client_update(&start, &self.shard, &local, (round * self.hp.epochs) as u64)
    }
}

/// Federated averaging over the chosen server: every round each selected
/// client runs `hp.epochs` local epochs from its current model, exchanges
/// parameters, and adopts the merged result.
pub fn run_federated(cfg: &FederatedConfig) -> Result<FederatedRun, HarnessError> {
    let shape = ModelShape::new(cfg.data.dim, cfg.data.classes);
    let p = shape.param_count();
    let (train, test) = make_datasets(&cfg.data, cfg.n_clients)?;
    let hp = cfg.hp;
    let trainers: Vec<ClientTrainer> = (0..cfg.n_clients)
        .map(|id| ClientTrainer::new(&train, hp, id, cfg.n_clients, cfg.client_fraction))
        .collect();
    let update = |round: usize, id: usize, previous: Option<&[f32]>| -> Vec<f32> {
        trainers[id]
            .step(round, previous)
            .unwrap_or_else(|e| panic!("client {id} round {round}: {e}"))
    };

    let records = match cfg.kind {
        ServerKind::UdpPipeline => {
            let layout = ChunkLayout::with_default_capacity(p).map_err(|e| HarnessError::Config(e.to_string()))?;
            let mut server = ServerConfig::new(cfg.n_clients, cfg.n_workers, layout, cfg.mode);
            server.retransmit_interval = cfg.retransmit_interval;
            server.client_deadline = cfg.deadline;
            if cfg.loss_rate > 0.0 {
                server.loss = LossPolicy::new(cfg.loss_rate, cfg.loss_seed, LossDirection::Inbound);
            }
            run_udp(&UdpRunConfig::new(server, hp.rounds), &update)?
        }
        ServerKind::TcpBaseline => {
            if cfg.loss_rate > 0.0 {
                return Err(HarnessError::Config("loss injection applies to the UDP server only".into()));
            }
            let mut server = TcpServerConfig::new(cfg.n_clients, p, cfg.mode);
            server.deadline = cfg.deadline;
            run_tcp(
                &TcpRunConfig {
                    server,
                    rounds: hp.rounds,
                    client_timeout: cfg.deadline,
                },
                &update,
            )?
        }
    };

    let mut curve = Vec::with_capacity(records.len() * cfg.n_clients);
    for rec in &records {
        for (id, c) in rec.clients.iter().enumerate() {
            let (test_loss, test_accuracy) = trainer::evaluate(&c.merged, &test)?;
            curve.push(CurveRow {
                round: rec.round as u32,
                client_id: id as u32,
                test_loss,
                test_accuracy,
            });
        }
    }
    Ok(FederatedRun { records, curve })
}

/// Times `workers` threads each adding 1.0 `adds_per_worker` times across
/// one shared `elements`-long array, every worker sweeping the same
/// elements in the same order.
pub fn measure_contention(
    mode: AggregationMode,
    workers: usize,
    elements: usize,
    adds_per_worker: usize,
) -> ContentionRow {
    let layout = ChunkLayout::with_default_capacity(elements).expect("at least one element");
    let acc = Accumulator::new(layout, 1, mode).expect("one client");
    let barrier = Barrier::new(workers);
    // Each worker times itself: with fewer cores than workers, a coordinating
    // thread can be scheduled after the work is already done.
    let spans: Vec<(Instant, Instant)> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    barrier.wait();
                    let start = Instant::now();
                    for i in 0..adds_per_worker {
                        acc.add_at(i % elements, 1.0);
                    }
                    (start, Instant::now())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("contention worker")).collect()
    });
    let first = spans.iter().map(|s| s.0).min().expect("at least one worker");
    let last = spans.iter().map(|s| s.1).max().expect("at least one worker");
    let elapsed = last - first;
    let total = (workers * adds_per_worker) as f64;
    ContentionRow {
        mode: mode.as_str().to_string(),
        workers: workers as u32,
        elements: elements as u64,
        adds_per_worker: adds_per_worker as u64,
        elapsed_ns: elapsed.as_nanos() as u64,
        adds_per_sec: total / elapsed.as_secs_f64(),
    }
}

/// Synthetic parameters for payload-only rounds: multiples of 1/1024 in
/// [-4, 4], seeded by run, client and round. Sums of up to a few thousand
/// of them are exact in f32, so results do not depend on addition order.
pub fn payload_vector(p: usize, seed: u64, client: usize, round: usize) -> Vec<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ ((round as u64) << 32) ^ client as u64);
    (0..p).map(|_| rng.random_range(-4096i32..=4096) as f32 / 1024.0).collect()
}
