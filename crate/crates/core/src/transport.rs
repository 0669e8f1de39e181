//! Datagram endpoints over UDP sockets with seeded loss injection.

use std::fmt;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::Duration;

use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;

/// Socket buffer size requested at bind time.
pub const SOCKET_BUFFER_BYTES: usize = 4 << 20;

const SEND_RETRIES: usize = 10_000;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("socket error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid endpoint {0}: port must be nonzero")]
    ZeroPort(SocketAddr),
    #[error("cannot resolve {0}")]
    Resolve(String),
    #[error("datagram of {0} bytes exceeds the 1472-byte limit")]
    Oversize(usize),
}

/// A UDP peer address. Port 0 is not a valid peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint(SocketAddr);

impl Endpoint {
    pub fn new(addr: SocketAddr) -> Result<Self, TransportError> {
        if addr.port() == 0 {
            return Err(TransportError::ZeroPort(addr));
        }
        Ok(Self(addr))
    }

    pub fn resolve(spec: &str) -> Result<Self, TransportError> {
        let addr = spec
            .to_socket_addrs()
            .map_err(|_| TransportError::Resolve(spec.to_string()))?
            .next()
            .ok_or_else(|| TransportError::Resolve(spec.to_string()))?;
        Self::new(addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.0
    }

    pub fn port(&self) -> u16 {
        self.0.port()
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// splitmix64 generator; small enough to reproduce in any language.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossDirection {
    Outbound,
    Inbound,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPolicy {
    pub drop_rate: f64,
    pub seed: u64,
    pub direction: LossDirection,
}

impl LossPolicy {
    pub fn new(drop_rate: f64, seed: u64, direction: LossDirection) -> Self {
        assert!(
            (0.0..=1.0).contains(&drop_rate),
            "drop rate {drop_rate} outside [0, 1]"
        );
        Self {
            drop_rate,
            seed,
            direction,
        }
    }

    pub fn lossless() -> Self {
        Self::new(0.0, 0, LossDirection::Both)
    }

    /// Injector for outbound datagrams, if this policy drops any.
    pub fn outbound(&self) -> Option<LossInjector> {
        match self.direction {
            LossDirection::Outbound | LossDirection::Both if self.drop_rate > 0.0 => {
                Some(LossInjector::new(self.drop_rate, self.seed))
            }
            _ => None,
        }
    }

    /// Injector for inbound datagrams. Under `Both` the inbound stream is
    /// keyed on a derived seed so the two directions are independent.
    pub fn inbound(&self) -> Option<LossInjector> {
        match self.direction {
            LossDirection::Inbound if self.drop_rate > 0.0 => {
                Some(LossInjector::new(self.drop_rate, self.seed))
            }
            LossDirection::Both if self.drop_rate > 0.0 => Some(LossInjector::new(
                self.drop_rate,
                self.seed ^ 0xD1B5_4A32_D192_ED03,
            )),
            _ => None,
        }
    }
}

/// Decides drops as a pure function of (seed, packet ordinal).
#[derive(Debug, Clone)]
pub struct LossInjector {
    rng: SplitMix64,
    drop_rate: f64,
    ordinal: u64,
}

impl LossInjector {
    pub fn new(drop_rate: f64, seed: u64) -> Self {
        Self {
            rng: SplitMix64::new(seed),
            drop_rate,
            ordinal: 0,
        }
    }

    /// Consumes one ordinal and reports whether that packet is dropped.
    pub fn should_drop(&mut self) -> bool {
        self.ordinal += 1;
        let draw = (self.rng.next_u64() & ((1 << 24) - 1)) as f64 / (1u64 << 24) as f64;
        draw < self.drop_rate
    }

    pub fn ordinal(&self) -> u64 {
        self.ordinal
    }
}

/// One datagram discarded by a loss injector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropRecord {
    /// 1-based position in the injector's stream.
    pub ordinal: u64,
    /// Source for inbound drops, destination for outbound drops.
    pub peer: SocketAddr,
    /// Leading 32-bit word of the datagram (the chunk index for data).
    pub lead: Option<u32>,
    pub len: usize,
}

impl DropRecord {
    fn new(ordinal: u64, peer: SocketAddr, bytes: &[u8]) -> Self {
        Self {
            ordinal,
            peer,
            lead: bytes
                .get(..4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap())),
            len: bytes.len(),
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub send_dropped: u64,
    pub received: u64,
    pub recv_dropped: u64,
}

/// Sends a bounded burst of datagrams, then yields the lane.
#[derive(Debug, Clone, Copy)]
pub struct Pacer {
    pub burst: usize,
    pub gap: Duration,
    count: usize,
}

impl Pacer {
    pub fn new(burst: usize, gap: Duration) -> Self {
        Self {
            burst: burst.max(1),
            gap,
            count: 0,
        }
    }

    pub fn unpaced() -> Self {
        Self::new(usize::MAX, Duration::ZERO)
    }

    pub fn tick(&mut self) {
        self.count += 1;
        if self.count >= self.burst {
            self.count = 0;
            if self.gap.is_zero() {
                std::thread::yield_now();
            } else {
                std::thread::sleep(self.gap);
            }
        }
    }
}

fn bind_socket(addr: SocketAddr) -> Result<UdpSocket, TransportError> {
    let socket = Socket::new(Domain::for_address(addr), Type::DGRAM, Some(Protocol::UDP))?;
    // The kernel clamps to its configured maximum; a smaller buffer is not fatal.
    let _ = socket.set_recv_buffer_size(SOCKET_BUFFER_BYTES);
    let _ = socket.set_send_buffer_size(SOCKET_BUFFER_BYTES);
    socket.bind(&addr.into())?;
    Ok(socket.into())
}

/// Sending half of an endpoint.
#[derive(Debug)]
pub struct DatagramTx {
    socket: UdpSocket,
    loss: Option<LossInjector>,
    drops: Vec<DropRecord>,
    stats: LinkStats,
}

impl DatagramTx {
    /// Hands `datagram` to the OS unless the loss policy drops it.
    /// Returns whether the datagram left this endpoint.
    pub fn send_to(&mut self, datagram: &[u8], dest: Endpoint) -> Result<bool, TransportError> {
        if datagram.len() > crate::wire::MAX_DATAGRAM {
            return Err(TransportError::Oversize(datagram.len()));
        }
        if let Some(loss) = self.loss.as_mut() {
            if loss.should_drop() {
                self.stats.send_dropped += 1;
                self.drops
                    .push(DropRecord::new(loss.ordinal(), dest.addr(), datagram));
                return Ok(false);
            }
        }
        let mut attempts = 0;
        loop {
            match self.socket.send_to(datagram, dest.addr()) {
                Ok(_) => break,
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock && attempts < SEND_RETRIES =>
                {
                    attempts += 1;
                    std::thread::yield_now();
                }
                // Port-unreachable from an earlier datagram; UDP is fire-and-forget.
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => break,
                Err(e) => return Err(e.into()),
            }
        }
        self.stats.sent += 1;
        Ok(true)
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    pub fn take_drops(&mut self) -> Vec<DropRecord> {
        std::mem::take(&mut self.drops)
    }
}

/// Receiving half of an endpoint.
#[derive(Debug)]
pub struct DatagramRx {
    socket: UdpSocket,
    loss: Option<LossInjector>,
    drops: Vec<DropRecord>,
    stats: LinkStats,
    blocking: bool,
}

impl DatagramRx {
    fn set_blocking(&mut self, blocking: bool) -> io::Result<()> {
        if self.blocking != blocking {
            self.socket.set_nonblocking(!blocking)?;
            self.blocking = blocking;
        }
        Ok(())
    }

    fn accept(&mut self, buf: &[u8], from: SocketAddr) -> bool {
        if let Some(loss) = self.loss.as_mut() {
            if loss.should_drop() {
                self.stats.recv_dropped += 1;
                self.drops.push(DropRecord::new(loss.ordinal(), from, buf));
                return false;
            }
        }
        self.stats.received += 1;
        true
    }

    /// Returns the next datagram if one is queued; never blocks.
    pub fn poll_recv(&mut self, buf: &mut [u8]) -> Result<Option<(usize, Endpoint)>, TransportError> {
        self.set_blocking(false)?;
        loop {
            match self.socket.recv_from(buf) {
                Ok((n, from)) => {
                    if from.port() == 0 {
                        continue;
                    }
                    if self.accept(&buf[..n], from) {
                        return Ok(Some((n, Endpoint(from))));
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(None),
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::ConnectionRefused | io::ErrorKind::ConnectionReset
                    ) =>
                {
                    continue
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Waits up to `timeout` for a datagram that survives the loss policy.
    pub fn recv_timeout(
        &mut self,
        buf: &mut [u8],
        timeout: Duration,
    ) -> Result<Option<(usize, Endpoint)>, TransportError> {
        let deadline = std::time::Instant::now() + timeout;
        self.set_blocking(true)?;
        loop {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.socket
                .set_read_timeout(Some(left.max(Duration::from_micros(1))))?;
            match self.socket.recv_from(buf) {
                Ok((n, from)) => {
                    if from.port() != 0 && self.accept(&buf[..n], from) {
                        return Ok(Some((n, Endpoint(from))));
                    }
                }
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    return Ok(None)
                }
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::ConnectionRefused | io::ErrorKind::ConnectionReset
                    ) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    pub fn take_drops(&mut self) -> Vec<DropRecord> {
        std::mem::take(&mut self.drops)
    }
}

/// A bound UDP endpoint. Split it to hand the receive and send sides to
/// different lanes.
#[derive(Debug)]
pub struct UdpEndpoint {
    local: Endpoint,
    pub rx: DatagramRx,
    pub tx: DatagramTx,
}

impl UdpEndpoint {
    pub fn bind(addr: SocketAddr, policy: LossPolicy) -> Result<Self, TransportError> {
        let socket = bind_socket(addr)?;
        socket.set_nonblocking(true)?;
        let local = Endpoint::new(socket.local_addr()?)?;
        let send_socket = socket.try_clone()?;
        Ok(Self {
            local,
            rx: DatagramRx {
                socket,
                loss: policy.inbound(),
                drops: Vec::new(),
                stats: LinkStats::default(),
                blocking: false,
            },
            tx: DatagramTx {
                socket: send_socket,
                loss: policy.outbound(),
                drops: Vec::new(),
                stats: LinkStats::default(),
            },
        })
    }

    pub fn local(&self) -> Endpoint {
        self.local
    }

    pub fn send_to(&mut self, datagram: &[u8], dest: Endpoint) -> Result<bool, TransportError> {
        self.tx.send_to(datagram, dest)
    }

    pub fn poll_recv(&mut self, buf: &mut [u8]) -> Result<Option<(usize, Endpoint)>, TransportError> {
        self.rx.poll_recv(buf)
    }

    pub fn recv_timeout(
        &mut self,
        buf: &mut [u8],
        timeout: Duration,
    ) -> Result<Option<(usize, Endpoint)>, TransportError> {
        self.rx.recv_timeout(buf, timeout)
    }

    pub fn split(self) -> (DatagramRx, DatagramTx) {
        (self.rx, self.tx)
    }

    pub fn stats(&self) -> LinkStats {
        let (r, s) = (self.rx.stats(), self.tx.stats());
        LinkStats {
            sent: s.sent,
            send_dropped: s.send_dropped,
            received: r.received,
            recv_dropped: r.recv_dropped,
        }
    }
}
