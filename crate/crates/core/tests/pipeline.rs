use std::thread;
use std::time::Duration;

use fedpipe::client::{ClientConfig, ClientRound, ClientSession};
use fedpipe::harness::{run_udp, UdpRunConfig};
use fedpipe::server::{RoundOutcome, ServerConfig, UdpServer};
use fedpipe::transport::{DropRecord, LossInjector};
use fedpipe::{AggregationMode, ChunkLayout, LossDirection, LossPolicy, CHUNK_CAPACITY};

const TICK: Duration = Duration::from_millis(20);

fn client_vector(round: usize, client: usize, p: usize) -> Vec<f32> {
    (0..p)
        .map(|e| ((e * 31 + client * 17 + round * 7) % 1000) as f32 / 100.0 - 5.0)
        .collect()
}

/// First seed whose drop decisions at `rate` begin with `pattern`.
fn seed_with_pattern(rate: f64, pattern: &[bool]) -> u64 {
    (0u64..)
        .find(|&seed| {
            let mut inj = LossInjector::new(rate, seed);
            pattern.iter().all(|&want| inj.should_drop() == want)
        })
        .unwrap()
}

struct Scenario {
    layout: ChunkLayout,
    n_clients: usize,
    /// Inbound loss on each client, by id.
    client_loss: Vec<LossPolicy>,
    /// Extra wait before each client starts its round.
    delay: Vec<Duration>,
}

struct Observed {
    outcome: RoundOutcome,
    rounds: Vec<ClientRound>,
    client_drops: Vec<Vec<DropRecord>>,
    locals: Vec<Vec<f32>>,
}

fn run_one_round(s: Scenario) -> Observed {
    let mut cfg = ServerConfig::new(s.n_clients, 1, s.layout, AggregationMode::Exact);
    cfg.retransmit_interval = TICK;
    let mut server = UdpServer::bind(cfg).unwrap();
    let addr = server.local();
    let server = thread::spawn(move || server.serve_round().unwrap());

    let p = s.layout.param_count();
    let locals: Vec<Vec<f32>> = (0..s.n_clients).map(|k| client_vector(0, k, p)).collect();
    let clients: Vec<_> = (0..s.n_clients)
        .map(|k| {
            let mut c = ClientConfig::new(addr, s.layout);
            c.retransmit_interval = TICK;
            c.loss = s.client_loss[k];
            let delay = s.delay[k];
            let local = locals[k].clone();
            thread::spawn(move || {
                let mut session = ClientSession::connect(c).unwrap();
                thread::sleep(delay);
                let round = session.run_round(&local).unwrap();
                session.linger(TICK * 5).unwrap();
                let drops = session.endpoint_mut().rx.take_drops();
                (round, drops)
            })
        })
        .collect();
    let (rounds, client_drops) = clients.into_iter().map(|h| h.join().unwrap()).unzip();
    Observed {
        outcome: server.join().unwrap(),
        rounds,
        client_drops,
        locals,
    }
}

fn lossless(n: usize) -> Vec<LossPolicy> {
    vec![LossPolicy::lossless(); n]
}

#[test]
fn smoke_ten_clients() {
    let layout = ChunkLayout::with_default_capacity(10_000).unwrap();
    let cfg = UdpRunConfig::new(ServerConfig::new(10, 5, layout, AggregationMode::Exact), 3);
    let records = run_udp(&cfg, &|r: usize, c: usize, _: Option<&[f32]>| client_vector(r, c, 10_000)).unwrap();
    assert_eq!(records.len(), 3);
    for rec in &records {
        let report = &rec.outcome.report;
        assert!(rec.outcome.global.counts.iter().all(|&k| k == 10));
        assert_eq!(report.counters.divide_violations, 0);
        assert_eq!(report.counters.data_accepted, 10 * layout.num_chunks() as u64);
        assert!(report.chunk_loss.iter().all(|&l| l == 0));
        assert!(report.total_add_time >= report.overlapped_add_time);
        for c in &rec.clients {
            assert_eq!(c.merged, rec.outcome.global.values);
        }
    }
}

#[test]
fn clients_adopt_the_global_vector() {
    let layout = ChunkLayout::with_default_capacity(1000).unwrap();
    let cfg = UdpRunConfig::new(ServerConfig::new(4, 2, layout, AggregationMode::Exact), 4);
    let records = run_udp(&cfg, &|r: usize, c: usize, prev: Option<&[f32]>| {
        // each round moves the previous global by a client-specific offset
        let base = prev.map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; 1000]);
        base.iter().map(|v| v + (r * 4 + c) as f32).collect()
    })
    .unwrap();
    let mut expected = 0.0f32;
    for rec in &records {
        expected += (rec.round * 4) as f32 + 1.5;
        assert!(rec.outcome.global.values.iter().all(|&v| v == expected), "round {}", rec.round);
    }
}

#[test]
fn one_chunk_round_sends_one_of_each() {
    let layout = ChunkLayout::with_default_capacity(CHUNK_CAPACITY).unwrap();
    let obs = run_one_round(Scenario {
        layout,
        n_clients: 1,
        client_loss: lossless(1),
        delay: vec![Duration::ZERO],
    });
    let r = &obs.rounds[0];
    assert_eq!((r.starts_sent, r.data_sent, r.ends_sent), (1, 1, 1));
    let c = obs.outcome.report.counters;
    // START, data, END, and the END_ACK answering the server's END
    assert_eq!((c.datagrams, c.data_accepted, c.start_acks, c.end_acks), (4, 1, 1, 1));
    assert_eq!(r.merged, obs.locals[0]);
}

#[test]
fn lost_start_ack_is_retransmitted() {
    let layout = ChunkLayout::with_default_capacity(CHUNK_CAPACITY).unwrap();
    let rate = 0.3;
    let seed = seed_with_pattern(rate, &[true, false, false, false, false, false]);
    let obs = run_one_round(Scenario {
        layout,
        n_clients: 1,
        client_loss: vec![LossPolicy::new(rate, seed, LossDirection::Inbound)],
        delay: vec![Duration::ZERO],
    });
    let r = &obs.rounds[0];
    assert!(r.starts_sent >= 2, "starts sent: {}", r.starts_sent);
    assert!(obs.outcome.report.counters.start_acks >= 2);
    assert_eq!(obs.outcome.global.counts, vec![1]);
    assert_eq!(r.merged, obs.locals[0]);
}

#[test]
fn lost_end_ack_is_answered_again() {
    let layout = ChunkLayout::with_default_capacity(CHUNK_CAPACITY).unwrap();
    let rate = 0.3;
    let seed = seed_with_pattern(rate, &[false, true, false, false, false, false, false, false]);
    // client 1 starts late so client 0 must get its END_ACK from a retransmission
    let obs = run_one_round(Scenario {
        layout,
        n_clients: 2,
        client_loss: vec![LossPolicy::new(rate, seed, LossDirection::Inbound), LossPolicy::lossless()],
        delay: vec![Duration::ZERO, Duration::from_millis(300)],
    });
    assert!(obs.rounds[0].ends_sent >= 2, "ends sent: {}", obs.rounds[0].ends_sent);
    let c = obs.outcome.report.counters;
    assert!(c.end_acks >= 3, "end acks: {}", c.end_acks);
    assert_eq!(c.late_ends, 0);
    assert_eq!(obs.outcome.global.counts, vec![2]);
}

#[test]
fn dropped_global_chunk_keeps_local_values() {
    let layout = ChunkLayout::with_default_capacity(5 * CHUNK_CAPACITY).unwrap();
    let rate = 0.2;
    // inbound order: START_ACK, END_ACK, global chunks 0..5, END
    let seed = seed_with_pattern(rate, &[false, false, false, false, false, true, false, false, false, false]);
    let obs = run_one_round(Scenario {
        layout,
        n_clients: 2,
        client_loss: vec![LossPolicy::new(rate, seed, LossDirection::Inbound), LossPolicy::lossless()],
        delay: vec![Duration::ZERO; 2],
    });
    let drops = &obs.client_drops[0];
    assert_eq!(drops.len(), 1, "{drops:?}");
    let lost = drops[0].lead.expect("data datagram") as usize;
    assert_eq!(lost, 3);
    let r = &obs.rounds[0];
    assert_eq!(r.chunks_received(), 4);
    assert!(!r.received[lost]);
    for c in 0..layout.num_chunks() {
        let range = layout.range(c);
        let want = if c == lost { &obs.locals[0][range.clone()] } else { &obs.outcome.global.values[range.clone()] };
        assert_eq!(&r.merged[range], want, "chunk {c}");
    }
    assert_eq!(obs.rounds[1].merged, obs.outcome.global.values);
}

#[test]
fn no_global_chunks_means_local_model() {
    let layout = ChunkLayout::with_default_capacity(CHUNK_CAPACITY).unwrap();
    let rate = 0.3;
    let seed = seed_with_pattern(rate, &[false, false, true, false, false, false]);
    let obs = run_one_round(Scenario {
        layout,
        n_clients: 2,
        client_loss: vec![LossPolicy::new(rate, seed, LossDirection::Inbound), LossPolicy::lossless()],
        delay: vec![Duration::ZERO; 2],
    });
    assert_eq!(obs.rounds[0].chunks_received(), 0);
    assert_eq!(obs.rounds[0].merged, obs.locals[0]);
    assert_ne!(obs.outcome.global.values, obs.locals[0]);
}

#[test]
fn lossy_rounds_keep_divide_safety() {
    let layout = ChunkLayout::with_default_capacity(20 * CHUNK_CAPACITY).unwrap();
    let mut server = ServerConfig::new(6, 3, layout, AggregationMode::Approximate);
    server.retransmit_interval = TICK;
    server.loss = LossPolicy::new(0.1, 9, LossDirection::Both);
    let mut cfg = UdpRunConfig::new(server, 10);
    cfg.retransmit_interval = TICK;
    let p = layout.param_count();
    let records = run_udp(&cfg, &|r: usize, c: usize, _: Option<&[f32]>| client_vector(r, c, p)).unwrap();
    for rec in &records {
        let rep = &rec.outcome.report;
        assert_eq!(rep.counters.divide_violations, 0);
        let lost: usize = rep.chunk_loss.iter().sum();
        let missing: usize = rec.outcome.global.counts.iter().map(|&k| 6 - k as usize).sum();
        assert_eq!(lost, missing, "round {}", rec.round);
    }
}
