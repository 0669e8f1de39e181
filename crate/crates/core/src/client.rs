//! Client side of the START / data / END exchange.
//!
//! A session sends START until acknowledged, streams its chunks in index
//! order, then sends END until acknowledged. It then collects global chunks
//! until the server's END, answers with END_ACK and merges: elements whose
//! chunk arrived take the global value, the rest keep the local value.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::transport::{Endpoint, LossPolicy, Pacer, TransportError, UdpEndpoint};
use crate::wire::{self, ChunkLayout, ControlKind, PacketRef, MAX_DATAGRAM};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("parameter vector has {got} elements, layout expects {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("operation not valid in state {0:?}")]
    State(SessionState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Idle,
    SendingLocals,
    ReceivingGlobals,
    Done,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub server: Endpoint,
    /// Local bind address; its port is this client's identity at the server.
    pub bind: SocketAddr,
    pub layout: ChunkLayout,
    /// START and END retransmission period.
    pub retransmit_interval: Duration,
    /// Limit on each wait for the server.
    pub deadline: Duration,
    pub loss: LossPolicy,
    /// Data packets sent before yielding the lane.
    pub send_burst: usize,
}

impl ClientConfig {
    pub fn new(server: Endpoint, layout: ChunkLayout) -> Self {
        Self {
            server,
            bind: "127.0.0.1:0".parse().unwrap(),
            layout,
            retransmit_interval: Duration::from_millis(100),
            deadline: Duration::from_secs(30),
            loss: LossPolicy::lossless(),
            send_burst: 32,
        }
    }

    /// Binds to `base_port + id` so the server can demux by source port.
    pub fn with_fixed_port(mut self, base_port: u16, id: u16) -> Self {
        self.bind.set_port(base_port + id);
        self
    }
}

/// Transfer statistics for one round, as seen by the client.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientRound {
    pub merged: Vec<f32>,
    /// Global chunks received, by chunk index.
    pub received: Vec<bool>,
    /// First START sent to server END received.
    pub response_time: Duration,
    pub starts_sent: u32,
    pub ends_sent: u32,
    pub data_sent: u32,
}

impl ClientRound {
    pub fn chunks_received(&self) -> usize {
        self.received.iter().filter(|&&r| r).count()
    }
}

pub struct ClientSession {
    config: ClientConfig,
    endpoint: UdpEndpoint,
    state: SessionState,
    buf: Vec<u8>,
    globals: Vec<f32>,
    received: Vec<bool>,
    globals_complete: bool,
    started_at: Option<Instant>,
    response_time: Duration,
    starts_sent: u32,
    ends_sent: u32,
    data_sent: u32,
}

enum Event {
    StartAck,
    EndAck,
    ServerEnd,
    Other,
}

impl ClientSession {
    pub fn connect(config: ClientConfig) -> Result<Self, ClientError> {
        let endpoint = UdpEndpoint::bind(config.bind, config.loss)?;
        let p = config.layout.param_count();
        let n = config.layout.num_chunks();
        Ok(Self {
            config,
            endpoint,
            state: SessionState::Idle,
            buf: vec![0u8; MAX_DATAGRAM + 64],
            globals: vec![0.0; p],
            received: vec![false; n],
            globals_complete: false,
            started_at: None,
            response_time: Duration::ZERO,
            starts_sent: 0,
            ends_sent: 0,
            data_sent: 0,
        })
    }

    pub fn local(&self) -> Endpoint {
        self.endpoint.local()
    }

    pub fn set_server(&mut self, server: Endpoint) {
        self.config.server = server;
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn endpoint_mut(&mut self) -> &mut UdpEndpoint {
        &mut self.endpoint
    }

    fn send_control(&mut self, kind: ControlKind) -> Result<(), ClientError> {
        self.endpoint
            .send_to(&wire::encode_control(kind), self.config.server)?;
        Ok(())
    }

    /// Handles one inbound datagram. Global data is buffered whenever it
    /// arrives after our END; a server END is always answered.
    fn handle(&mut self, len: usize, from: Endpoint) -> Result<Event, ClientError> {
        if from != self.config.server {
            return Ok(Event::Other);
        }
        let layout = self.config.layout;
        let event = match wire::decode_ref(&self.buf[..len]) {
            Ok(PacketRef::Control(ControlKind::StartAck)) => Event::StartAck,
            Ok(PacketRef::Control(ControlKind::EndAck)) => Event::EndAck,
            Ok(PacketRef::Control(ControlKind::End)) => Event::ServerEnd,
            Ok(PacketRef::Data { index, payload }) => {
                if self.ends_sent > 0 && layout.accepts(index, payload.len() / 4) {
                    let range = layout.range(index as usize);
                    for (dst, v) in self.globals[range].iter_mut().zip(wire::payload_values(payload)) {
                        *dst = v;
                    }
                    self.received[index as usize] = true;
                }
                Event::Other
            }
            _ => Event::Other,
        };
        if matches!(event, Event::ServerEnd) {
            self.send_control(ControlKind::EndAck)?;
        }
        Ok(event)
    }

    fn wait(&mut self, timeout: Duration) -> Result<Option<Event>, ClientError> {
        let Some((len, from)) = self.endpoint.recv_timeout(&mut self.buf, timeout)? else {
            return Ok(None);
        };
        self.handle(len, from).map(Some)
    }

    /// Sends the local parameters reliably and waits for the server's
    /// END_ACK. Leaves the session in `ReceivingGlobals`.
    pub fn send_locals(&mut self, params: &[f32]) -> Result<(), ClientError> {
        if !matches!(self.state, SessionState::Idle | SessionState::Done) {
            return Err(ClientError::State(self.state));
        }
        let layout = self.config.layout;
        if params.len() != layout.param_count() {
            return Err(ClientError::WrongLength {
                got: params.len(),
                expected: layout.param_count(),
            });
        }
        self.state = SessionState::SendingLocals;
        self.received.iter_mut().for_each(|r| *r = false);
        self.globals_complete = false;
        self.starts_sent = 0;
        self.ends_sent = 0;
        self.data_sent = 0;
        let result = self.send_locals_inner(params, layout);
        if result.is_err() {
            self.state = SessionState::Idle;
        }
        result
    }

    fn send_locals_inner(&mut self, params: &[f32], layout: ChunkLayout) -> Result<(), ClientError> {
        let period = self.config.retransmit_interval;
        let begun = Instant::now();
        self.started_at = Some(begun);
        self.send_control(ControlKind::Start)?;
        self.starts_sent += 1;
        let mut last = Instant::now();
        loop {
            if begun.elapsed() > self.config.deadline {
                return Err(ClientError::Timeout("START_ACK"));
            }
            let left = period.saturating_sub(last.elapsed());
            match self.wait(left)? {
                Some(Event::StartAck) => break,
                Some(_) => {}
                None => {
                    self.send_control(ControlKind::Start)?;
                    self.starts_sent += 1;
                    last = Instant::now();
                }
            }
        }

        let mut pacer = Pacer::new(self.config.send_burst, Duration::ZERO);
        let mut out = Vec::with_capacity(MAX_DATAGRAM);
        for (index, chunk) in layout.chunks(params) {
            wire::encode_data_into(index, chunk, &mut out).expect("layout fits the datagram");
            self.endpoint.send_to(&out, self.config.server)?;
            self.data_sent += 1;
            pacer.tick();
        }

        let begun = Instant::now();
        self.send_control(ControlKind::End)?;
        self.ends_sent += 1;
        let mut last = Instant::now();
        loop {
            if begun.elapsed() > self.config.deadline {
                return Err(ClientError::Timeout("END_ACK"));
            }
            let left = period.saturating_sub(last.elapsed());
            match self.wait(left)? {
                Some(Event::EndAck) => break,
                Some(Event::ServerEnd) => {
                    // The server only finishes sending globals after our END.
                    self.globals_complete = true;
                    self.response_time = self.started_at.map(|t| t.elapsed()).unwrap_or_default();
                    break;
                }
                Some(_) => {}
                None => {
                    self.send_control(ControlKind::End)?;
                    self.ends_sent += 1;
                    last = Instant::now();
                }
            }
        }
        self.state = SessionState::ReceivingGlobals;
        Ok(())
    }

    /// Collects global chunks until the server's END and merges them over
    /// `local`. Chunks that never arrived keep their local values.
    pub fn receive_globals(&mut self, local: &[f32]) -> Result<ClientRound, ClientError> {
        if self.state != SessionState::ReceivingGlobals {
            return Err(ClientError::State(self.state));
        }
        let layout = self.config.layout;
        if local.len() != layout.param_count() {
            return Err(ClientError::WrongLength {
                got: local.len(),
                expected: layout.param_count(),
            });
        }
        let begun = Instant::now();
        while !self.globals_complete {
            let left = self.config.deadline.saturating_sub(begun.elapsed());
            if left.is_zero() {
                self.state = SessionState::Idle;
                return Err(ClientError::Timeout("server END"));
            }
            if let Some(Event::ServerEnd) = self.wait(left)? {
                self.globals_complete = true;
                self.response_time = self.started_at.map(|t| t.elapsed()).unwrap_or_default();
            }
        }
        let mut merged = local.to_vec();
        for c in 0..layout.num_chunks() {
            if self.received[c] {
                let r = layout.range(c);
                merged[r.clone()].copy_from_slice(&self.globals[r]);
            }
        }
        self.state = SessionState::Done;
        Ok(ClientRound {
            merged,
            received: self.received.clone(),
            response_time: self.response_time,
            starts_sent: self.starts_sent,
            ends_sent: self.ends_sent,
            data_sent: self.data_sent,
        })
    }

    /// One full round: send `params`, receive and merge the globals.
    pub fn run_round(&mut self, params: &[f32]) -> Result<ClientRound, ClientError> {
        self.send_locals(params)?;
        self.receive_globals(params)
    }

    /// Keeps answering retransmitted server ENDs until none has arrived for
    /// `quiet`, so a lost END_ACK after the final round cannot strand the
    /// server.
    pub fn linger(&mut self, quiet: Duration) -> Result<(), ClientError> {
        let mut last = Instant::now();
        loop {
            let left = quiet.saturating_sub(last.elapsed());
            if left.is_zero() {
                return Ok(());
            }
            if let Some(Event::ServerEnd) = self.wait(left)? {
                last = Instant::now();
            }
        }
    }
}

/// Merges received global chunks over local values.
pub fn merge_with_fallback(
    layout: &ChunkLayout,
    global: &[f32],
    received: &[bool],
    local: &[f32],
) -> Vec<f32> {
    let mut merged = local.to_vec();
    for (c, &got) in received.iter().enumerate() {
        if got {
            let r = layout.range(c);
            merged[r.clone()].copy_from_slice(&global[r]);
        }
    }
    merged
}
