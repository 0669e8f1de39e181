//! UDP payload format.
//!
//! A data datagram is a 4-byte little-endian chunk index followed by up to
//! [`CHUNK_CAPACITY`] little-endian `f32` values. A control datagram is
//! exactly 8 bytes: the sentinel word `0xFFFF_FFFF` and a kind word.
//! Any leading word in `0xFFFF_FF00..=0xFFFF_FFFF` is reserved for control,
//! so a single decode path keyed on the first word demultiplexes both.

use std::ops::Range;

use thiserror::Error;

/// Values per full data packet: (1500 MTU - 20 IP - 8 UDP - 4 index) / 4.
pub const CHUNK_CAPACITY: usize = 367;
/// Largest UDP payload that fits a 1500-byte MTU.
pub const MAX_DATAGRAM: usize = 1472;
pub const INDEX_BYTES: usize = 4;
pub const CONTROL_LEN: usize = 8;
pub const CONTROL_SENTINEL: u32 = 0xFFFF_FFFF;
/// First index value reserved for control packets.
pub const RESERVED_INDEX: u32 = 0xFFFF_FF00;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("data chunk carries no values")]
    EmptyChunk,
    #[error("data chunk carries {0} values, datagram limit is {max}", max = (MAX_DATAGRAM - INDEX_BYTES) / 4)]
    OversizeChunk(usize),
    #[error("chunk index {0:#x} collides with the control range")]
    ReservedIndex(u32),
    #[error("datagram of {0} bytes is not a valid packet length")]
    BadLength(usize),
    #[error("unknown control kind {0}")]
    UnknownControl(u32),
    #[error("reserved leading word {0:#x}")]
    BadSentinel(u32),
    #[error("invalid chunk layout: {0}")]
    Layout(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlKind {
    Start,
    StartAck,
    End,
    EndAck,
}

impl ControlKind {
    pub const ALL: [ControlKind; 4] = [
        ControlKind::Start,
        ControlKind::StartAck,
        ControlKind::End,
        ControlKind::EndAck,
    ];

    pub fn code(self) -> u32 {
        match self {
            ControlKind::Start => 0,
            ControlKind::StartAck => 1,
            ControlKind::End => 2,
            ControlKind::EndAck => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self, WireError> {
        match code {
            0 => Ok(ControlKind::Start),
            1 => Ok(ControlKind::StartAck),
            2 => Ok(ControlKind::End),
            3 => Ok(ControlKind::EndAck),
            other => Err(WireError::UnknownControl(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataChunk {
    pub index: u32,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Packet {
    Data(DataChunk),
    Control(ControlKind),
}

/// Borrowed view of a datagram, used on the hot path to avoid copying
/// payload values out of the receive buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PacketRef<'a> {
    Data { index: u32, payload: &'a [u8] },
    Control(ControlKind),
}

pub fn encode_control(kind: ControlKind) -> [u8; CONTROL_LEN] {
    let mut out = [0u8; CONTROL_LEN];
    out[..4].copy_from_slice(&CONTROL_SENTINEL.to_le_bytes());
    out[4..].copy_from_slice(&kind.code().to_le_bytes());
    out
}

fn check_data(index: u32, len: usize) -> Result<(), WireError> {
    if len == 0 {
        return Err(WireError::EmptyChunk);
    }
    if INDEX_BYTES + 4 * len > MAX_DATAGRAM {
        return Err(WireError::OversizeChunk(len));
    }
    if index >= RESERVED_INDEX {
        return Err(WireError::ReservedIndex(index));
    }
    Ok(())
}

/// Appends the encoded data packet to `out`, which is cleared first.
pub fn encode_data_into(index: u32, values: &[f32], out: &mut Vec<u8>) -> Result<(), WireError> {
    check_data(index, values.len())?;
    out.clear();
    out.reserve(INDEX_BYTES + 4 * values.len());
    out.extend_from_slice(&index.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_data(chunk: &DataChunk) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    encode_data_into(chunk.index, &chunk.values, &mut out)?;
    Ok(out)
}

pub fn encode(packet: &Packet) -> Result<Vec<u8>, WireError> {
    match packet {
        Packet::Data(chunk) => encode_data(chunk),
        Packet::Control(kind) => Ok(encode_control(*kind).to_vec()),
    }
}

pub fn decode_ref(bytes: &[u8]) -> Result<PacketRef<'_>, WireError> {
    if bytes.len() < INDEX_BYTES {
        return Err(WireError::BadLength(bytes.len()));
    }
    let lead = u32::from_le_bytes(bytes[..4].try_into().unwrap());
    if lead >= RESERVED_INDEX {
        if bytes.len() != CONTROL_LEN {
            return Err(WireError::BadLength(bytes.len()));
        }
        if lead != CONTROL_SENTINEL {
            return Err(WireError::BadSentinel(lead));
        }
        let code = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        return ControlKind::from_code(code).map(PacketRef::Control);
    }
    let payload = &bytes[INDEX_BYTES..];
    if payload.is_empty() || !payload.len().is_multiple_of(4) || bytes.len() > MAX_DATAGRAM {
        return Err(WireError::BadLength(bytes.len()));
    }
    Ok(PacketRef::Data {
        index: lead,
        payload,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Packet, WireError> {
    Ok(match decode_ref(bytes)? {
        PacketRef::Control(kind) => Packet::Control(kind),
        PacketRef::Data { index, payload } => Packet::Data(DataChunk {
            index,
            values: payload_values(payload).collect(),
        }),
    })
}

/// Iterates the little-endian `f32` values of a data payload.
pub fn payload_values(payload: &[u8]) -> impl ExactSizeIterator<Item = f32> + '_ {
    payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Mapping of a flat parameter vector onto fixed-capacity chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    param_count: usize,
    chunk_capacity: usize,
    num_chunks: usize,
    last_chunk_len: usize,
}

impl ChunkLayout {
    pub fn new(param_count: usize, chunk_capacity: usize) -> Result<Self, WireError> {
        if param_count == 0 {
            return Err(WireError::Layout("parameter count must be at least 1"));
        }
        if chunk_capacity == 0 {
            return Err(WireError::Layout("chunk capacity must be at least 1"));
        }
        if INDEX_BYTES + 4 * chunk_capacity > MAX_DATAGRAM {
            return Err(WireError::Layout("chunk capacity exceeds the datagram limit"));
        }
        let num_chunks = param_count.div_ceil(chunk_capacity);
        if num_chunks > RESERVED_INDEX as usize {
            return Err(WireError::Layout("too many chunks for the index field"));
        }
        Ok(Self {
            param_count,
            chunk_capacity,
            num_chunks,
            last_chunk_len: param_count - chunk_capacity * (num_chunks - 1),
        })
    }

    /// Layout using the full-MTU chunk capacity.
    pub fn with_default_capacity(param_count: usize) -> Result<Self, WireError> {
        Self::new(param_count, CHUNK_CAPACITY)
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn chunk_capacity(&self) -> usize {
        self.chunk_capacity
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn last_chunk_len(&self) -> usize {
        self.last_chunk_len
    }

    /// Element range covered by chunk `index`. Panics if out of range.
    pub fn range(&self, index: usize) -> Range<usize> {
        assert!(index < self.num_chunks, "chunk {index} out of range");
        let start = index * self.chunk_capacity;
        start..(start + self.chunk_capacity).min(self.param_count)
    }

    pub fn chunk_len(&self, index: usize) -> usize {
        if index + 1 == self.num_chunks {
            self.last_chunk_len
        } else {
            self.chunk_capacity
        }
    }

    pub fn chunk_of(&self, element: usize) -> usize {
        element / self.chunk_capacity
    }

    /// True if `index` names a chunk and `len` matches its length.
    pub fn accepts(&self, index: u32, len: usize) -> bool {
        (index as usize) < self.num_chunks && self.chunk_len(index as usize) == len
    }

    pub fn chunks<'a>(&self, params: &'a [f32]) -> impl Iterator<Item = (u32, &'a [f32])> + 'a {
        assert_eq!(params.len(), self.param_count, "vector length does not match layout");
        params
            .chunks(self.chunk_capacity)
            .enumerate()
            .map(|(i, c)| (i as u32, c))
    }
}
