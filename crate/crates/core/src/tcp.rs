//! Thread-per-connection TCP aggregation server, the comparison point for
//! the pipelined UDP server.
//!
//! Each round every client opens a connection, sends its whole vector as one
//! length-prefixed frame and reads the global vector back on the same
//! connection. Handlers add into the shared [`Accumulator`]; the last handler
//! to finish divides and wakes the rest.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::aggregator::{Accumulator, AggregateError, AggregationMode};
use crate::metrics::{RoundCounters, RoundReport};
use crate::server::RoundOutcome;
use crate::wire::ChunkLayout;

pub const FRAME_HEADER: usize = 4;

#[derive(Debug, Error)]
pub enum TcpError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frame of {got} bytes, expected {expected}")]
    FrameLength { got: usize, expected: usize },
    #[error("only {connected} of {expected} clients connected before the deadline")]
    AcceptTimeout { connected: usize, expected: usize },
    #[error("handler lane panicked")]
    LanePanic,
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| io::Error::other("frame body over 4 GiB"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one frame, refusing bodies longer than `max_len`.
pub fn read_frame<R: Read>(r: &mut R, max_len: usize) -> io::Result<Vec<u8>> {
    let mut hdr = [0u8; FRAME_HEADER];
    r.read_exact(&mut hdr)?;
    let len = u32::from_le_bytes(hdr) as usize;
    if len > max_len {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit {max_len}"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

pub fn params_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_params(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

/// Client half: one full round trip on a fresh connection.
pub fn tcp_exchange(server: SocketAddr, params: &[f32], timeout: Duration) -> Result<Vec<f32>, TcpError> {
    let mut stream = TcpStream::connect_timeout(&server, timeout)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    write_frame(&mut stream, &params_to_le(params))?;
    let body = read_frame(&mut stream, params.len() * 4)?;
    if body.len() != params.len() * 4 {
        return Err(TcpError::FrameLength {
            got: body.len(),
            expected: params.len() * 4,
        });
    }
    Ok(le_to_params(&body))
}

#[derive(Debug, Clone)]
pub struct TcpServerConfig {
    pub n_clients: usize,
    pub param_count: usize,
    pub mode: AggregationMode,
    pub bind: SocketAddr,
    /// Limit on accepting all connections, and on each read or write.
    pub deadline: Duration,
}

impl TcpServerConfig {
    pub fn new(n_clients: usize, param_count: usize, mode: AggregationMode) -> Self {
        Self {
            n_clients,
            param_count,
            mode,
            bind: "127.0.0.1:0".parse().unwrap(),
            deadline: Duration::from_secs(30),
        }
    }
}

#[derive(Default)]
struct Rendezvous {
    arrived: usize,
    last_arrival: Option<Instant>,
    divided: Option<(crate::aggregator::GlobalParams, Instant)>,
}

pub struct TcpServer {
    config: TcpServerConfig,
    listener: TcpListener,
    acc: Accumulator,
    rounds: u64,
}

impl TcpServer {
    pub fn bind(config: TcpServerConfig) -> Result<Self, TcpError> {
        if config.n_clients == 0 || config.param_count == 0 {
            return Err(TcpError::Config("need at least one client and one parameter".into()));
        }
        let listener = TcpListener::bind(config.bind)?;
        listener.set_nonblocking(true)?;
        let layout = ChunkLayout::with_default_capacity(config.param_count)
            .map_err(|e| TcpError::Config(e.to_string()))?;
        let acc = Accumulator::new(layout, config.n_clients, config.mode)?;
        Ok(Self {
            config,
            listener,
            acc,
            rounds: 0,
        })
    }

    pub fn local(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn config(&self) -> &TcpServerConfig {
        &self.config
    }

    pub fn rounds_served(&self) -> u64 {
        self.rounds
    }

    fn accept_all(&self) -> Result<(Vec<TcpStream>, Instant), TcpError> {
        let n = self.config.n_clients;
        let mut streams = Vec::with_capacity(n);
        let mut first = None;
        let give_up = Instant::now() + self.config.deadline;
        while streams.len() < n {
            match self.listener.accept() {
                Ok((s, _)) => {
                    first.get_or_insert_with(Instant::now);
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    s.set_read_timeout(Some(self.config.deadline))?;
                    s.set_write_timeout(Some(self.config.deadline))?;
                    streams.push(s);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= give_up {
                        return Err(TcpError::AcceptTimeout {
                            connected: streams.len(),
                            expected: n,
                        });
                    }
                    thread::sleep(Duration::from_micros(200));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok((streams, first.expect("at least one connection")))
    }

    /// Accepts one connection per client, aggregates, and answers each
    /// client that delivered a full frame. Clients whose frame never arrives
    /// whole are left out of every divisor.
    pub fn serve_round(&mut self) -> Result<RoundOutcome, TcpError> {
        self.acc.reset();
        let (streams, started) = self.accept_all()?;
        let n = streams.len();
        let expected = self.config.param_count * 4;
        let layout = *self.acc.layout();
        let acc = &self.acc;
        let meet = Mutex::new(Rendezvous::default());
        let wake = Condvar::new();

        struct HandlerResult {
            delivered: bool,
            add_time: Duration,
            sent_at: Option<Instant>,
        }

        let results: Vec<HandlerResult> = thread::scope(|s| {
            let handles: Vec<_> = streams
                .into_iter()
                .map(|mut stream| {
                    let (meet, wake) = (&meet, &wake);
                    s.spawn(move || {
                        let body = read_frame(&mut stream, expected).ok().filter(|b| b.len() == expected);
                        let mut add_time = Duration::ZERO;
                        if let Some(body) = &body {
                            let t = Instant::now();
                            for chunk in 0..layout.num_chunks() {
                                let r = layout.range(chunk);
                                acc.add_chunk_le(chunk as u32, &body[r.start * 4..r.end * 4])
                                    .expect("layout-shaped chunk");
                            }
                            add_time = t.elapsed();
                        } else {
                            let _ = stream.shutdown(Shutdown::Both);
                        }

                        let mut g = meet.lock().unwrap();
                        g.arrived += 1;
                        if g.arrived == n {
                            g.last_arrival = Some(Instant::now());
                            let global = acc.divide();
                            g.divided = Some((global, Instant::now()));
                            wake.notify_all();
                        }
                        while g.divided.is_none() {
                            g = wake.wait(g).unwrap();
                        }
                        let reply = body.as_ref().map(|_| {
                            params_to_le(&g.divided.as_ref().expect("divided").0.values)
                        });
                        drop(g);

                        let sent_at = reply.and_then(|bytes| {
                            write_frame(&mut stream, &bytes).ok().map(|_| Instant::now())
                        });
                        HandlerResult {
                            delivered: body.is_some(),
                            add_time,
                            sent_at,
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| TcpError::LanePanic))
                .collect::<Result<_, _>>()
        })?;

        let r = meet.into_inner().unwrap();
        let last_arrival = r.last_arrival.expect("every handler arrived");
        let (global, divided_at) = r.divided.expect("divided");
        let finished = results.iter().filter_map(|h| h.sent_at).max().unwrap_or(divided_at);
        let delivered = results.iter().filter(|h| h.delivered).count() as u64;
        self.rounds += 1;
        Ok(RoundOutcome {
            report: RoundReport {
                receive_time: last_arrival - started,
                compute_time: divided_at - last_arrival,
                send_time: finished - divided_at,
                overlapped_add_time: Duration::ZERO,
                total_add_time: results.iter().map(|h| h.add_time).sum(),
                chunk_loss: results
                    .iter()
                    .map(|h| if h.delivered { 0 } else { layout.num_chunks() })
                    .collect(),
                counters: RoundCounters {
                    data_accepted: delivered,
                    malformed: n as u64 - delivered,
                    ..Default::default()
                },
            },
            global,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spawn_round(cfg: TcpServerConfig) -> (SocketAddr, thread::JoinHandle<RoundOutcome>) {
        let mut server = TcpServer::bind(cfg).unwrap();
        let addr = server.local().unwrap();
        (addr, thread::spawn(move || server.serve_round().unwrap()))
    }

    #[test]
    fn two_clients_average() {
        let (addr, h) = spawn_round(TcpServerConfig::new(2, 2, AggregationMode::Exact));
        let a = thread::spawn(move || tcp_exchange(addr, &[2.0, 2.0], Duration::from_secs(5)).unwrap());
        let b = tcp_exchange(addr, &[4.0, 6.0], Duration::from_secs(5)).unwrap();
        assert_eq!(b, vec![3.0, 4.0]);
        assert_eq!(a.join().unwrap(), vec![3.0, 4.0]);
        assert_eq!(h.join().unwrap().global.counts, vec![2]);
    }

    #[test]
    fn disconnected_client_leaves_divisor() {
        let p = 800;
        let (addr, h) = spawn_round(TcpServerConfig::new(10, p, AggregationMode::Exact));
        let quitter = TcpStream::connect(addr).unwrap();
        drop(quitter);
        let clients: Vec<_> = (0..9)
            .map(|k| {
                thread::spawn(move || {
                    let v = vec![k as f32; p];
                    tcp_exchange(addr, &v, Duration::from_secs(5)).unwrap()
                })
            })
            .collect();
        for c in clients {
            assert_eq!(c.join().unwrap(), vec![4.0; p]);
        }
        let out = h.join().unwrap();
        assert!(out.global.counts.iter().all(|&k| k == 9));
        assert_eq!(out.report.chunk_loss.iter().filter(|&&l| l > 0).count(), 1);
    }

    #[test]
    fn partial_frame_is_dropped() {
        let (addr, h) = spawn_round(TcpServerConfig::new(2, 4, AggregationMode::Exact));
        let mut short = TcpStream::connect(addr).unwrap();
        write_frame(&mut short, &[0u8; 8]).unwrap();
        let ok = tcp_exchange(addr, &[1.0, 2.0, 3.0, 4.0], Duration::from_secs(5)).unwrap();
        assert_eq!(ok, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(h.join().unwrap().global.counts, vec![1]);
    }

    #[test]
    fn accept_deadline() {
        let mut cfg = TcpServerConfig::new(1, 4, AggregationMode::Exact);
        cfg.deadline = Duration::from_millis(50);
        let mut server = TcpServer::bind(cfg).unwrap();
        assert!(matches!(
            server.serve_round(),
            Err(TcpError::AcceptTimeout { connected: 0, expected: 1 })
        ));
    }

    proptest! {
        #[test]
        fn frame_round_trip(body in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let mut buf = Vec::new();
            write_frame(&mut buf, &body).unwrap();
            prop_assert_eq!(buf.len(), body.len() + FRAME_HEADER);
            let back = read_frame(&mut buf.as_slice(), body.len()).unwrap();
            prop_assert_eq!(back, body);
        }

        #[test]
        fn params_round_trip(v in proptest::collection::vec(any::<f32>(), 0..256)) {
            let back = le_to_params(&params_to_le(&v));
            prop_assert_eq!(
                back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &[0u8; 16]).unwrap();
        assert!(read_frame(&mut buf.as_slice(), 8).is_err());
    }
}
