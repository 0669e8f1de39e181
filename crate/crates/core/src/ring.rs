//! Bounded lock-free single-producer/single-consumer ring.
//!
//! [`channel`] returns a [`Producer`] and a [`Consumer`]; neither is
//! `Clone`, so each ring has exactly one of each. A [`RingMonitor`] can
//! observe occupancy from any lane without touching the slots.

use std::cell::UnsafeCell;
use std::fmt;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub const DEFAULT_RING_CAPACITY: usize = 1024;

#[repr(align(64))]
struct CachePadded<T>(T);

struct Shared<T> {
    slots: Box<[UnsafeCell<MaybeUninit<T>>]>,
    mask: usize,
    /// next slot to write; only the producer stores it
    head: CachePadded<AtomicUsize>,
    /// next slot to read; only the consumer stores it
    tail: CachePadded<AtomicUsize>,
}

// Slots are handed between exactly one producer and one consumer, with the
// head/tail release-acquire pair ordering every slot access.
unsafe impl<T: Send> Send for Shared<T> {}
unsafe impl<T: Send> Sync for Shared<T> {}

impl<T> Shared<T> {
    fn len(&self) -> usize {
        let tail = self.tail.0.load(Ordering::Acquire);
        let head = self.head.0.load(Ordering::Acquire);
        head.wrapping_sub(tail)
    }

    fn capacity(&self) -> usize {
        self.mask + 1
    }
}

impl<T> Drop for Shared<T> {
    fn drop(&mut self) {
        let head = *self.head.0.get_mut();
        let mut tail = *self.tail.0.get_mut();
        while tail != head {
            unsafe { self.slots[tail & self.mask].get_mut().assume_init_drop() };
            tail = tail.wrapping_add(1);
        }
    }
}

/// Creates a ring holding `capacity` items, rounded up to a power of two.
pub fn channel<T>(capacity: usize) -> (Producer<T>, Consumer<T>) {
    let cap = capacity.max(1).next_power_of_two();
    let slots = (0..cap)
        .map(|_| UnsafeCell::new(MaybeUninit::uninit()))
        .collect::<Vec<_>>()
        .into_boxed_slice();
    let shared = Arc::new(Shared {
        slots,
        mask: cap - 1,
        head: CachePadded(AtomicUsize::new(0)),
        tail: CachePadded(AtomicUsize::new(0)),
    });
    (
        Producer {
            shared: shared.clone(),
            cached_tail: 0,
        },
        Consumer {
            shared,
            cached_head: 0,
        },
    )
}

pub struct Producer<T> {
    shared: Arc<Shared<T>>,
    cached_tail: usize,
}

impl<T> Producer<T> {
    /// Appends `item`, or hands it back if the ring is full.
    pub fn push(&mut self, item: T) -> Result<(), T> {
        let s = &*self.shared;
        let head = s.head.0.load(Ordering::Relaxed);
        if head.wrapping_sub(self.cached_tail) == s.capacity() {
            self.cached_tail = s.tail.0.load(Ordering::Acquire);
            if head.wrapping_sub(self.cached_tail) == s.capacity() {
                return Err(item);
            }
        }
        unsafe { (*s.slots[head & s.mask].get()).write(item) };
        s.head.0.store(head.wrapping_add(1), Ordering::Release);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shared.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.shared.capacity()
    }

    pub fn monitor(&self) -> RingMonitor
    where
        T: Send + 'static,
    {
        RingMonitor {
            shared: self.shared.clone(),
        }
    }
}

pub struct Consumer<T> {
    shared: Arc<Shared<T>>,
    cached_head: usize,
}

impl<T> Consumer<T> {
    /// Removes the oldest item, if any.
    pub fn pop(&mut self) -> Option<T> {
        let s = &*self.shared;
        let tail = s.tail.0.load(Ordering::Relaxed);
        if tail == self.cached_head {
            self.cached_head = s.head.0.load(Ordering::Acquire);
            if tail == self.cached_head {
                return None;
            }
        }
        let item = unsafe { (*s.slots[tail & s.mask].get()).assume_init_read() };
        s.tail.0.store(tail.wrapping_add(1), Ordering::Release);
        Some(item)
    }

    pub fn len(&self) -> usize {
        self.shared.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.shared.capacity()
    }

    pub fn monitor(&self) -> RingMonitor
    where
        T: Send + 'static,
    {
        RingMonitor {
            shared: self.shared.clone(),
        }
    }
}

/// Occupancy probe for a ring; does not participate in push or pop.
#[derive(Clone)]
pub struct RingMonitor {
    shared: Arc<dyn Occupancy>,
}

trait Occupancy: Send + Sync {
    fn len(&self) -> usize;
}

impl<T: Send> Occupancy for Shared<T> {
    fn len(&self) -> usize {
        Shared::len(self)
    }
}

impl RingMonitor {
    pub fn len(&self) -> usize {
        self.shared.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T> fmt::Debug for Producer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Producer")
            .field("len", &self.len())
            .field("capacity", &self.capacity())
            .finish()
    }
}

impl<T> fmt::Debug for Consumer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Consumer")
            .field("len", &self.len())
            .field("capacity", &self.capacity())
            .finish()
    }
}

impl fmt::Debug for RingMonitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RingMonitor").field("len", &self.len()).finish()
    }
}
