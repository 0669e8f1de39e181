//! Shared accumulation state and per-chunk averaging.
//!
//! Every worker lane adds received chunks into one array of `f32` sums.
//! Each chunk also carries a contribution count, so chunks that lost some
//! clients' packets are divided by the number of clients that actually
//! arrived rather than by the round size.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU16, AtomicU32, Ordering};

use thiserror::Error;

use crate::wire::{payload_values, ChunkLayout};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AggregateError {
    #[error("chunk index {index} out of range ({num_chunks} chunks)")]
    ChunkOutOfRange { index: u32, num_chunks: usize },
    #[error("chunk {index} carries {got} values, expected {expected}")]
    WrongLength {
        index: u32,
        got: usize,
        expected: usize,
    },
    #[error("round size must be at least one client")]
    NoClients,
}

/// How concurrent adds to the same element are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationMode {
    /// Each element update is one indivisible read-modify-write.
    Exact,
    /// Separate tear-free load and store; concurrent adds may be lost.
    Approximate,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::Exact => "exact",
            AggregationMode::Approximate => "approx",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(AggregationMode::Exact),
            "approx" | "approximate" => Ok(AggregationMode::Approximate),
            other => Err(format!("unknown mode {other:?} (expected exact or approx)")),
        }
    }
}

/// Float sums stored as raw bits in atomics, plus one counter per chunk.
pub struct Accumulator {
    layout: ChunkLayout,
    mode: AggregationMode,
    n_clients: usize,
    sums: Box<[AtomicU32]>,
    counts: Box<[AtomicU16]>,
}

impl Accumulator {
    pub fn new(
        layout: ChunkLayout,
        n_clients: usize,
        mode: AggregationMode,
    ) -> Result<Self, AggregateError> {
        if n_clients == 0 {
            return Err(AggregateError::NoClients);
        }
        assert!(n_clients <= u16::MAX as usize, "round size exceeds counter width");
        Ok(Self {
            layout,
            mode,
            n_clients,
            sums: (0..layout.param_count())
                .map(|_| AtomicU32::new(0))
                .collect(),
            counts: (0..layout.num_chunks())
                .map(|_| AtomicU16::new(0))
                .collect(),
        })
    }

    pub fn layout(&self) -> &ChunkLayout {
        &self.layout
    }

    pub fn mode(&self) -> AggregationMode {
        self.mode
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    /// Restores the zero state between rounds.
    pub fn reset(&mut self) {
        for s in self.sums.iter_mut() {
            *s.get_mut() = 0;
        }
        for c in self.counts.iter_mut() {
            *c.get_mut() = 0;
        }
    }

    fn check(&self, index: u32, len: usize) -> Result<std::ops::Range<usize>, AggregateError> {
        let i = index as usize;
        if i >= self.layout.num_chunks() {
            return Err(AggregateError::ChunkOutOfRange {
                index,
                num_chunks: self.layout.num_chunks(),
            });
        }
        let expected = self.layout.chunk_len(i);
        if len != expected {
            return Err(AggregateError::WrongLength {
                index,
                got: len,
                expected,
            });
        }
        Ok(self.layout.range(i))
    }

    #[inline]
    fn add_element(&self, slot: &AtomicU32, v: f32) {
        match self.mode {
            AggregationMode::Exact => {
                let _ = slot.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |bits| {
                    Some((f32::from_bits(bits) + v).to_bits())
                });
            }
            AggregationMode::Approximate => {
                let cur = f32::from_bits(slot.load(Ordering::Relaxed));
                slot.store((cur + v).to_bits(), Ordering::Relaxed);
            }
        }
    }

    fn add_values(
        &self,
        index: u32,
        range: std::ops::Range<usize>,
        values: impl Iterator<Item = f32>,
    ) {
        for (slot, v) in self.sums[range].iter().zip(values) {
            self.add_element(slot, v);
        }
        // The divisor is bookkeeping and stays indivisible in both modes.
        let prev = self.counts[index as usize].fetch_add(1, Ordering::Relaxed);
        debug_assert!((prev as usize) < self.n_clients, "chunk {index} over-counted");
    }

    pub fn add_chunk(&self, index: u32, values: &[f32]) -> Result<(), AggregateError> {
        let range = self.check(index, values.len())?;
        self.add_values(index, range, values.iter().copied());
        Ok(())
    }

    /// Adds a chunk straight from its little-endian wire payload.
    pub fn add_chunk_le(&self, index: u32, payload: &[u8]) -> Result<(), AggregateError> {
        let range = self.check(index, payload.len() / 4)?;
        self.add_values(index, range, payload_values(payload));
        Ok(())
    }

    /// Adds `v` to one element under the mode's discipline without touching
    /// any chunk count.
    pub fn add_at(&self, element: usize, v: f32) {
        self.add_element(&self.sums[element], v);
    }

    /// Per-chunk means over the clients that contributed to each chunk.
    /// Callers must ensure all adds happened-before this call.
    pub fn divide(&self) -> GlobalParams {
        let counts = self.counts();
        let mut values = vec![0.0f32; self.layout.param_count()];
        for (chunk, &k) in counts.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let divisor = k as f32;
            let range = self.layout.range(chunk);
            for (out, slot) in values[range.clone()].iter_mut().zip(&self.sums[range]) {
                *out = f32::from_bits(slot.load(Ordering::Relaxed)) / divisor;
            }
        }
        GlobalParams {
            layout: self.layout,
            values,
            counts,
        }
    }

    pub fn counts(&self) -> Vec<u16> {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn sums(&self) -> Vec<f32> {
        self.sums
            .iter()
            .map(|s| f32::from_bits(s.load(Ordering::Relaxed)))
            .collect()
    }
}

impl fmt::Debug for Accumulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Accumulator")
            .field("layout", &self.layout)
            .field("mode", &self.mode)
            .field("n_clients", &self.n_clients)
            .finish_non_exhaustive()
    }
}

/// Result of a round's division. Chunks nobody contributed to are absent
/// and hold zeros that must not be sent.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub layout: ChunkLayout,
    pub values: Vec<f32>,
    pub counts: Vec<u16>,
}

impl GlobalParams {
    pub fn is_present(&self, chunk: usize) -> bool {
        self.counts[chunk] > 0
    }

    pub fn chunk(&self, chunk: usize) -> Option<&[f32]> {
        self.is_present(chunk)
            .then(|| &self.values[self.layout.range(chunk)])
    }

    pub fn present_chunks(&self) -> impl Iterator<Item = (u32, &[f32])> + '_ {
        (0..self.layout.num_chunks())
            .filter_map(move |c| self.chunk(c).map(|v| (c as u32, v)))
    }

    pub fn absent_chunks(&self) -> usize {
        self.counts.iter().filter(|&&k| k == 0).count()
    }
}
