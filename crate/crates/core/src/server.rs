//! Pipelined UDP aggregation server.
//!
//! Each round runs one RX lane, one TX lane and K worker lanes. RX
//! demultiplexes datagrams by source port into one ring per client and
//! answers control packets itself through its own ring into TX. Worker `i`
//! owns the rings `i, i+K, i+2K, ...` and adds their chunks into the shared
//! [`Accumulator`] while reception is still in progress. Once every client
//! has sent END and every ring is drained, worker 0 divides while the other
//! workers spin, then each worker streams the global chunks and an END to
//! its own clients and retransmits END until they acknowledge.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::aggregator::{AggregateError, Accumulator, AggregationMode, GlobalParams};
use crate::metrics::{RoundCounters, RoundReport};
use crate::ring::{self, Consumer, Producer, RingMonitor, DEFAULT_RING_CAPACITY};
use crate::transport::{
    DatagramRx, DatagramTx, DropRecord, Endpoint, LossPolicy, Pacer, TransportError, UdpEndpoint,
};
use crate::wire::{self, ChunkLayout, ControlKind, PacketRef, MAX_DATAGRAM};

/// Bounded spins before RX gives up on a full client ring and drops the packet.
const RING_PUSH_RETRIES: usize = 100_000;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("round aborted while {phase}: no progress from clients {missing:?}")]
    ClientTimeout {
        phase: &'static str,
        missing: Vec<usize>,
    },
    #[error("{0} lane panicked")]
    LanePanic(&'static str),
}

/// How client source ports map onto ring ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Registration {
    /// Ring id is the port's position in the list.
    Static(Vec<u16>),
    /// Ring ids are assigned in order of each port's first START.
    Dynamic,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub n_clients: usize,
    pub n_workers: usize,
    pub layout: ChunkLayout,
    pub mode: AggregationMode,
    pub bind: SocketAddr,
    pub registration: Registration,
    /// How long after a client's first END its retransmitted ENDs are answered.
    pub end_ack_window: Duration,
    pub ring_capacity: usize,
    /// Per-phase limit on waiting for clients before the round is aborted.
    pub client_deadline: Duration,
    /// Period of server END retransmission while sending global parameters.
    pub retransmit_interval: Duration,
    pub loss: LossPolicy,
    /// Datagrams TX sends before yielding its lane.
    pub tx_burst: usize,
}

impl ServerConfig {
    pub fn new(n_clients: usize, n_workers: usize, layout: ChunkLayout, mode: AggregationMode) -> Self {
        Self {
            n_clients,
            n_workers,
            layout,
            mode,
            bind: "127.0.0.1:0".parse().unwrap(),
            registration: Registration::Dynamic,
            end_ack_window: Duration::from_secs(1),
            ring_capacity: DEFAULT_RING_CAPACITY,
            client_deadline: Duration::from_secs(30),
            retransmit_interval: Duration::from_millis(100),
            loss: LossPolicy::lossless(),
            tx_burst: 32,
        }
    }

    fn validate(&self) -> Result<(), ServerError> {
        if self.n_clients == 0 {
            return Err(ServerError::Config("at least one client is required".into()));
        }
        if self.n_clients > u16::MAX as usize {
            return Err(ServerError::Config("too many clients".into()));
        }
        if self.n_workers == 0 {
            return Err(ServerError::Config("at least one worker is required".into()));
        }
        if let Registration::Static(ports) = &self.registration {
            if ports.len() != self.n_clients {
                return Err(ServerError::Config(format!(
                    "{} client ports configured for {} clients",
                    ports.len(),
                    self.n_clients
                )));
            }
            let mut sorted = ports.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ports.len() || ports.contains(&0) {
                return Err(ServerError::Config("client ports must be distinct and nonzero".into()));
            }
        }
        if self.ring_capacity == 0 {
            return Err(ServerError::Config("ring capacity must be nonzero".into()));
        }
        Ok(())
    }
}

/// Rings polled by worker `worker`: `worker, worker + k, worker + 2k, ...` below `n`.
pub fn worker_poll_order(worker: usize, k: usize, n: usize) -> Vec<usize> {
    assert!(k >= 1 && worker < k, "worker {worker} out of range for {k} workers");
    (worker..n).step_by(k).collect()
}

/// Source-port demultiplexer. Ids stay stable for the server's lifetime.
#[derive(Debug)]
pub struct ClientTable {
    ports: Vec<u16>,
    capacity: usize,
    dynamic: bool,
}

impl ClientTable {
    pub fn new(registration: &Registration, capacity: usize) -> Self {
        match registration {
            Registration::Static(ports) => Self {
                ports: ports.clone(),
                capacity,
                dynamic: false,
            },
            Registration::Dynamic => Self {
                ports: Vec::with_capacity(capacity),
                capacity,
                dynamic: true,
            },
        }
    }

    /// Ring id for a registered source port.
    pub fn demux(&self, port: u16) -> Option<usize> {
        self.ports.iter().position(|&p| p == port)
    }

    /// Like [`demux`](Self::demux), registering an unknown port when
    /// dynamic registration has room left.
    pub fn demux_or_register(&mut self, port: u16) -> Option<usize> {
        if let Some(id) = self.demux(port) {
            return Some(id);
        }
        if self.dynamic && self.ports.len() < self.capacity {
            self.ports.push(port);
            return Some(self.ports.len() - 1);
        }
        None
    }

    pub fn len(&self) -> usize {
        self.ports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ports.is_empty()
    }
}

#[repr(u8)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Idle = 0,
    Receiving = 1,
    Ended = 2,
    Sending = 3,
    Done = 4,
}

impl ClientPhase {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => ClientPhase::Idle,
            1 => ClientPhase::Receiving,
            2 => ClientPhase::Ended,
            3 => ClientPhase::Sending,
            _ => ClientPhase::Done,
        }
    }
}

const UNSET: u64 = u64::MAX;

/// State shared by the lanes of one round.
pub struct RoundState {
    start: Instant,
    n_clients: usize,
    phases: Box<[AtomicU8]>,
    ended: AtomicUsize,
    done: AtomicUsize,
    drained_workers: AtomicUsize,
    divided: AtomicBool,
    abort: AtomicBool,
    finished: AtomicBool,
    worker_busy: Box<[AtomicBool]>,
    rings: Vec<RingMonitor>,
    t_first_start: AtomicU64,
    t_all_ends: AtomicU64,
    t_divide_done: AtomicU64,
    t_send_done: AtomicU64,
    overlapped_add_ns: AtomicU64,
    total_add_ns: AtomicU64,
    divide_violations: AtomicU64,
    end_retransmits: AtomicU64,
    global: OnceLock<GlobalParams>,
    addrs: Vec<Mutex<Option<Endpoint>>>,
}

impl RoundState {
    fn new(n_clients: usize, n_workers: usize, rings: Vec<RingMonitor>) -> Self {
        Self {
            start: Instant::now(),
            n_clients,
            phases: (0..n_clients).map(|_| AtomicU8::new(ClientPhase::Idle as u8)).collect(),
            ended: AtomicUsize::new(0),
            done: AtomicUsize::new(0),
            drained_workers: AtomicUsize::new(0),
            divided: AtomicBool::new(false),
            abort: AtomicBool::new(false),
            finished: AtomicBool::new(false),
            worker_busy: (0..n_workers).map(|_| AtomicBool::new(false)).collect(),
            rings,
            t_first_start: AtomicU64::new(UNSET),
            t_all_ends: AtomicU64::new(UNSET),
            t_divide_done: AtomicU64::new(UNSET),
            t_send_done: AtomicU64::new(UNSET),
            overlapped_add_ns: AtomicU64::new(0),
            total_add_ns: AtomicU64::new(0),
            divide_violations: AtomicU64::new(0),
            end_retransmits: AtomicU64::new(0),
            global: OnceLock::new(),
            addrs: (0..n_clients).map(|_| Mutex::new(None)).collect(),
        }
    }

    pub fn phase(&self, client: usize) -> ClientPhase {
        ClientPhase::from_u8(self.phases[client].load(Ordering::Acquire))
    }

    fn set_phase(&self, client: usize, phase: ClientPhase) {
        self.phases[client].store(phase as u8, Ordering::Release);
    }

    /// True iff every client has ended, every RX ring is empty and no
    /// worker is mid-batch.
    pub fn drain_complete(&self) -> bool {
        self.ended.load(Ordering::Acquire) == self.n_clients
            && self.rings.iter().all(RingMonitor::is_empty)
            && self.worker_busy.iter().all(|b| !b.load(Ordering::Acquire))
    }

    fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    fn stamp(&self, slot: &AtomicU64) {
        let _ = slot.compare_exchange(UNSET, self.now_ns(), Ordering::AcqRel, Ordering::Relaxed);
    }

    fn stamp_value(slot: &AtomicU64) -> Option<u64> {
        match slot.load(Ordering::Acquire) {
            UNSET => None,
            v => Some(v),
        }
    }

    fn stopping(&self) -> bool {
        self.abort.load(Ordering::Acquire) || self.finished.load(Ordering::Acquire)
    }

    fn missing(&self, want: ClientPhase) -> Vec<usize> {
        (0..self.n_clients)
            .filter(|&c| (self.phase(c) as u8) < want as u8)
            .collect()
    }
}

/// Idle strategy for polling lanes: a few yields, then short sleeps.
struct Backoff {
    idle: u32,
}

impl Backoff {
    fn new() -> Self {
        Self { idle: 0 }
    }

    fn reset(&mut self) {
        self.idle = 0;
    }

    fn snooze(&mut self) {
        if self.idle < 8 {
            thread::yield_now();
        } else {
            thread::sleep(Duration::from_micros(10));
        }
        self.idle = self.idle.saturating_add(1);
    }
}

/// An encoded datagram bound for one client.
struct Outgoing {
    dest: Endpoint,
    bytes: Vec<u8>,
}

fn push_spin<T>(ring: &mut Producer<T>, mut item: T, state: &RoundState) -> bool {
    loop {
        match ring.push(item) {
            Ok(()) => return true,
            Err(back) => {
                if state.abort.load(Ordering::Acquire) {
                    return false;
                }
                item = back;
                thread::yield_now();
            }
        }
    }
}

/// Result of one served round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub report: RoundReport,
    pub global: GlobalParams,
}

/// Persistent per-client bookkeeping carried across rounds.
struct Carry {
    /// START seen from a client that had already finished the previous round.
    pending_start: Vec<bool>,
    addrs: Vec<Option<Endpoint>>,
}

pub struct UdpServer {
    config: ServerConfig,
    rx: DatagramRx,
    tx: DatagramTx,
    local: Endpoint,
    table: ClientTable,
    acc: Accumulator,
    carry: Carry,
    rounds: u64,
}

impl UdpServer {
    pub fn bind(config: ServerConfig) -> Result<Self, ServerError> {
        config.validate()?;
        let endpoint = UdpEndpoint::bind(config.bind, config.loss)?;
        let local = endpoint.local();
        let (rx, tx) = endpoint.split();
        let acc = Accumulator::new(config.layout, config.n_clients, config.mode)?;
        let table = ClientTable::new(&config.registration, config.n_clients);
        let n = config.n_clients;
        Ok(Self {
            config,
            rx,
            tx,
            local,
            table,
            acc,
            carry: Carry {
                pending_start: vec![false; n],
                addrs: vec![None; n],
            },
            rounds: 0,
        })
    }

    pub fn local(&self) -> Endpoint {
        self.local
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn rounds_served(&self) -> u64 {
        self.rounds
    }

    /// Inbound and outbound datagrams discarded by the loss policy so far.
    pub fn take_drops(&mut self) -> (Vec<DropRecord>, Vec<DropRecord>) {
        (self.rx.take_drops(), self.tx.take_drops())
    }

    /// Source port registered for ring id `client`.
    pub fn client_port(&self, client: usize) -> Option<u16> {
        self.table.ports.get(client).copied()
    }

    /// Runs one full round: receive and aggregate, divide, send globals.
    pub fn serve_round(&mut self) -> Result<RoundOutcome, ServerError> {
        let cfg = self.config.clone();
        let (n, k) = (cfg.n_clients, cfg.n_workers);
        self.acc.reset();

        let mut rx_producers = Vec::with_capacity(n);
        let mut rx_consumers: Vec<Option<Consumer<Vec<u8>>>> = Vec::with_capacity(n);
        for _ in 0..n {
            let (p, c) = ring::channel(cfg.ring_capacity);
            rx_producers.push(p);
            rx_consumers.push(Some(c));
        }
        let monitors = rx_producers.iter().map(|p| p.monitor()).collect();
        let state = RoundState::new(n, k, monitors);
        for (c, addr) in self.carry.addrs.iter().enumerate() {
            *state.addrs[c].lock().unwrap() = *addr;
        }

        let (ctl_tx, ctl_rx) = ring::channel::<Outgoing>(cfg.ring_capacity);
        let mut worker_tx = Vec::with_capacity(k);
        let mut tx_inputs = vec![ctl_rx];
        for _ in 0..k {
            let (p, c) = ring::channel::<Outgoing>(cfg.ring_capacity);
            worker_tx.push(p);
            tx_inputs.push(c);
        }

        let acc = &self.acc;
        let state_ref = &state;
        let rx = &mut self.rx;
        let tx = &mut self.tx;
        let table = &mut self.table;
        let carry = &mut self.carry;

        let (rx_result, tx_result, worker_results) = thread::scope(|s| {
            let mut workers = Vec::with_capacity(k);
            for (i, out) in worker_tx.into_iter().enumerate() {
                let owned: Vec<(usize, Consumer<Vec<u8>>)> = worker_poll_order(i, k, n)
                    .into_iter()
                    .map(|r| (r, rx_consumers[r].take().unwrap()))
                    .collect();
                let cfg = &cfg;
                workers.push(s.spawn(move || worker_lane(i, cfg, acc, state_ref, owned, out)));
            }
            let tx_handle = s.spawn(|| tx_lane(tx, tx_inputs, state_ref, cfg.tx_burst));
            let rx_result = rx_lane(&cfg, rx, table, carry, rx_producers, ctl_tx, state_ref);
            if rx_result.is_err() {
                state_ref.abort.store(true, Ordering::Release);
            }
            state_ref.finished.store(true, Ordering::Release);
            let worker_results: Vec<_> = workers.into_iter().map(|h| h.join()).collect();
            (rx_result, tx_handle.join(), worker_results)
        });

        let tx_result = tx_result.map_err(|_| ServerError::LanePanic("TX"))?;
        for w in worker_results {
            w.map_err(|_| ServerError::LanePanic("worker"))?;
        }
        let rx_stats = rx_result?;
        tx_result?;

        for (c, slot) in state.addrs.iter().enumerate() {
            self.carry.addrs[c] = *slot.lock().unwrap();
        }
        self.rounds += 1;

        let global = state
            .global
            .get()
            .cloned()
            .ok_or(ServerError::LanePanic("divider"))?;
        let span = |a: &AtomicU64, b: &AtomicU64| -> Duration {
            match (RoundState::stamp_value(a), RoundState::stamp_value(b)) {
                (Some(a), Some(b)) => Duration::from_nanos(b.saturating_sub(a)),
                _ => Duration::ZERO,
            }
        };
        let mut counters = rx_stats.counters;
        counters.divide_violations = state.divide_violations.load(Ordering::Relaxed);
        counters.end_retransmits = state.end_retransmits.load(Ordering::Relaxed);
        let report = RoundReport {
            receive_time: span(&state.t_first_start, &state.t_all_ends),
            compute_time: span(&state.t_all_ends, &state.t_divide_done),
            send_time: span(&state.t_divide_done, &state.t_send_done),
            overlapped_add_time: Duration::from_nanos(state.overlapped_add_ns.load(Ordering::Relaxed)),
            total_add_time: Duration::from_nanos(state.total_add_ns.load(Ordering::Relaxed)),
            chunk_loss: rx_stats
                .received_chunks
                .iter()
                .map(|&r| cfg.layout.num_chunks() - r)
                .collect(),
            counters,
        };
        Ok(RoundOutcome { report, global })
    }
}

struct RxStats {
    counters: RoundCounters,
    received_chunks: Vec<usize>,
}

fn rx_lane(
    cfg: &ServerConfig,
    rx: &mut DatagramRx,
    table: &mut ClientTable,
    carry: &mut Carry,
    mut rings: Vec<Producer<Vec<u8>>>,
    mut ctl: Producer<Outgoing>,
    state: &RoundState,
) -> Result<RxStats, ServerError> {
    let n = cfg.n_clients;
    let layout = cfg.layout;
    let mut counters = RoundCounters::default();
    let mut seen: Vec<Vec<bool>> = vec![vec![false; layout.num_chunks()]; n];
    let mut received_chunks = vec![0usize; n];
    let mut first_end: Vec<Option<Instant>> = vec![None; n];
    let mut buf = vec![0u8; MAX_DATAGRAM + 64];
    let mut backoff = Backoff::new();
    let start_ack = wire::encode_control(ControlKind::StartAck);
    let end_ack = wire::encode_control(ControlKind::EndAck);

    let send_ctl = |ctl: &mut Producer<Outgoing>, dest: Endpoint, bytes: &[u8]| {
        push_spin(
            ctl,
            Outgoing {
                dest,
                bytes: bytes.to_vec(),
            },
            state,
        );
    };

    // Clients that asked to start while the previous round was finishing.
    for c in 0..n {
        if std::mem::take(&mut carry.pending_start[c]) {
            if let Some(dest) = *state.addrs[c].lock().unwrap() {
                state.set_phase(c, ClientPhase::Receiving);
                state.stamp(&state.t_first_start);
                send_ctl(&mut ctl, dest, &start_ack);
                counters.start_acks += 1;
            }
        }
    }

    let recv_deadline = state.start + cfg.client_deadline;
    let mut send_deadline: Option<Instant> = None;

    loop {
        if state.done.load(Ordering::Acquire) == n {
            state.stamp(&state.t_send_done);
            break;
        }
        let now = Instant::now();
        if state.ended.load(Ordering::Acquire) < n && now > recv_deadline {
            return Err(ServerError::ClientTimeout {
                phase: "receiving local parameters",
                missing: state.missing(ClientPhase::Ended),
            });
        }
        if state.divided.load(Ordering::Acquire) {
            let deadline = *send_deadline.get_or_insert(now + cfg.client_deadline);
            if now > deadline {
                return Err(ServerError::ClientTimeout {
                    phase: "sending global parameters",
                    missing: state.missing(ClientPhase::Done),
                });
            }
        }
        if state.abort.load(Ordering::Acquire) {
            return Err(ServerError::LanePanic("worker"));
        }

        let Some((len, from)) = rx.poll_recv(&mut buf)? else {
            backoff.snooze();
            continue;
        };
        backoff.reset();
        counters.datagrams += 1;
        let datagram = &buf[..len];
        let packet = match wire::decode_ref(datagram) {
            Ok(p) => p,
            Err(_) => {
                counters.malformed += 1;
                continue;
            }
        };
        let client = match packet {
            PacketRef::Control(ControlKind::Start) => table.demux_or_register(from.port()),
            _ => table.demux(from.port()),
        };
        let Some(c) = client else {
            counters.unknown_source += 1;
            continue;
        };

        match packet {
            PacketRef::Control(ControlKind::Start) => {
                *state.addrs[c].lock().unwrap() = Some(from);
                match state.phase(c) {
                    ClientPhase::Idle => {
                        state.set_phase(c, ClientPhase::Receiving);
                        state.stamp(&state.t_first_start);
                        send_ctl(&mut ctl, from, &start_ack);
                        counters.start_acks += 1;
                    }
                    ClientPhase::Receiving => {
                        send_ctl(&mut ctl, from, &start_ack);
                        counters.start_acks += 1;
                    }
                    ClientPhase::Done => carry.pending_start[c] = true,
                    ClientPhase::Ended | ClientPhase::Sending => {}
                }
            }
            PacketRef::Control(ControlKind::End) => match state.phase(c) {
                ClientPhase::Receiving => {
                    first_end[c] = Some(Instant::now());
                    send_ctl(&mut ctl, from, &end_ack);
                    counters.end_acks += 1;
                    // every data packet from c is already in its ring
                    state.set_phase(c, ClientPhase::Ended);
                    if state.ended.fetch_add(1, Ordering::AcqRel) + 1 == n {
                        state.stamp(&state.t_all_ends);
                    }
                }
                ClientPhase::Ended | ClientPhase::Sending | ClientPhase::Done => {
                    let within = first_end[c]
                        .map(|t| t.elapsed() <= cfg.end_ack_window)
                        .unwrap_or(false);
                    if within {
                        send_ctl(&mut ctl, from, &end_ack);
                        counters.end_acks += 1;
                    } else {
                        counters.late_ends += 1;
                    }
                }
                ClientPhase::Idle => counters.late_ends += 1,
            },
            PacketRef::Control(ControlKind::EndAck) => {
                if state.phase(c) == ClientPhase::Sending {
                    state.set_phase(c, ClientPhase::Done);
                    state.done.fetch_add(1, Ordering::AcqRel);
                }
            }
            PacketRef::Control(ControlKind::StartAck) => counters.malformed += 1,
            PacketRef::Data { index, payload } => {
                if state.phase(c) != ClientPhase::Receiving {
                    counters.out_of_state += 1;
                    continue;
                }
                if !layout.accepts(index, payload.len() / 4) {
                    counters.malformed += 1;
                    continue;
                }
                if seen[c][index as usize] {
                    counters.duplicates += 1;
                    continue;
                }
                let mut item = datagram.to_vec();
                let mut pushed = false;
                for _ in 0..RING_PUSH_RETRIES {
                    match rings[c].push(item) {
                        Ok(()) => {
                            pushed = true;
                            break;
                        }
                        Err(back) => {
                            item = back;
                            thread::yield_now();
                        }
                    }
                }
                if pushed {
                    seen[c][index as usize] = true;
                    received_chunks[c] += 1;
                    counters.data_accepted += 1;
                } else {
                    counters.ring_drops += 1;
                }
            }
        }
    }
    Ok(RxStats {
        counters,
        received_chunks,
    })
}

fn worker_lane(
    id: usize,
    cfg: &ServerConfig,
    acc: &Accumulator,
    state: &RoundState,
    mut rings: Vec<(usize, Consumer<Vec<u8>>)>,
    mut out: Producer<Outgoing>,
) {
    const BATCH: usize = 32;
    let n = cfg.n_clients;
    let mut backoff = Backoff::new();
    let mut overlapped = 0u64;
    let mut total = 0u64;

    // Aggregate concurrently with reception until everything is drained.
    loop {
        if state.abort.load(Ordering::Acquire) {
            return;
        }
        let all_ended = state.ended.load(Ordering::Acquire) == n;
        state.worker_busy[id].store(true, Ordering::Release);
        let mut did = false;
        for (_, ring) in rings.iter_mut() {
            for _ in 0..BATCH {
                let Some(datagram) = ring.pop() else { break };
                did = true;
                let t = Instant::now();
                if state.divided.load(Ordering::Acquire) {
                    state.divide_violations.fetch_add(1, Ordering::Relaxed);
                }
                if let Ok(PacketRef::Data { index, payload }) = wire::decode_ref(&datagram) {
                    // RX validated index and length against the layout
                    let _ = acc.add_chunk_le(index, payload);
                }
                let dt = t.elapsed().as_nanos() as u64;
                total += dt;
                if state.ended.load(Ordering::Relaxed) < n {
                    overlapped += dt;
                }
            }
        }
        state.worker_busy[id].store(false, Ordering::Release);
        if all_ended && !did {
            break;
        }
        if did {
            backoff.reset();
        } else {
            backoff.snooze();
        }
    }
    state.overlapped_add_ns.fetch_add(overlapped, Ordering::Relaxed);
    state.total_add_ns.fetch_add(total, Ordering::Relaxed);
    state.drained_workers.fetch_add(1, Ordering::AcqRel);

    if id == 0 {
        while state.drained_workers.load(Ordering::Acquire) < cfg.n_workers {
            if state.abort.load(Ordering::Acquire) {
                return;
            }
            thread::yield_now();
        }
        if !state.drain_complete() {
            state.divide_violations.fetch_add(1, Ordering::Relaxed);
        }
        let global = acc.divide();
        state.stamp(&state.t_divide_done);
        let _ = state.global.set(global);
        for c in 0..n {
            state.set_phase(c, ClientPhase::Sending);
        }
        state.divided.store(true, Ordering::Release);
    } else {
        // spin until the divider publishes the global parameters
        while !state.divided.load(Ordering::Acquire) {
            if state.abort.load(Ordering::Acquire) {
                return;
            }
            thread::yield_now();
        }
    }

    let global = state.global.get().expect("published before divided");
    let mine: Vec<(usize, Endpoint)> = rings
        .iter()
        .filter_map(|(c, _)| state.addrs[*c].lock().unwrap().map(|a| (*c, a)))
        .collect();
    let end = wire::encode_control(ControlKind::End);
    let mut buf = Vec::with_capacity(MAX_DATAGRAM);
    for &(_, dest) in &mine {
        for (index, values) in global.present_chunks() {
            wire::encode_data_into(index, values, &mut buf).expect("layout fits the datagram");
            if !push_spin(&mut out, Outgoing { dest, bytes: buf.clone() }, state) {
                return;
            }
        }
        if !push_spin(&mut out, Outgoing { dest, bytes: end.to_vec() }, state) {
            return;
        }
    }

    // Retransmit END until each of this worker's clients acknowledges.
    let mut last = Instant::now();
    loop {
        if state.stopping() {
            return;
        }
        let pending: Vec<Endpoint> = mine
            .iter()
            .filter(|(c, _)| state.phase(*c) != ClientPhase::Done)
            .map(|&(_, a)| a)
            .collect();
        if pending.is_empty() {
            return;
        }
        if last.elapsed() >= cfg.retransmit_interval {
            for dest in pending {
                push_spin(&mut out, Outgoing { dest, bytes: end.to_vec() }, state);
                state.end_retransmits.fetch_add(1, Ordering::Relaxed);
            }
            last = Instant::now();
        }
        thread::sleep(Duration::from_micros(200));
    }
}

fn tx_lane(
    tx: &mut DatagramTx,
    mut inputs: Vec<Consumer<Outgoing>>,
    state: &RoundState,
    burst: usize,
) -> Result<(), ServerError> {
    const BATCH: usize = 16;
    let mut pacer = Pacer::new(burst, Duration::ZERO);
    let mut backoff = Backoff::new();
    loop {
        let mut did = false;
        // control replies first so acknowledgements overtake bulk data
        while let Some(o) = inputs[0].pop() {
            tx.send_to(&o.bytes, o.dest)?;
            did = true;
        }
        for ring in inputs.iter_mut().skip(1) {
            for _ in 0..BATCH {
                let Some(o) = ring.pop() else { break };
                tx.send_to(&o.bytes, o.dest)?;
                pacer.tick();
                did = true;
            }
        }
        if did {
            backoff.reset();
            continue;
        }
        if state.stopping() && inputs.iter().all(|r| r.is_empty()) {
            return Ok(());
        }
        backoff.snooze();
    }
}
