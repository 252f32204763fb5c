//! Record transport model: per-channel burst FIFOs on the producer side, a
//! large shared FIFO in front of the readout link, and the k-way time merge
//! that serializes the per-channel streams.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use thiserror::Error;

use crate::ttrecords::T2Event;

/// Largest number of streams the merger accepts: 64 detector channels plus
/// the sync channel.
pub const MAX_MERGE_STREAMS: usize = 65;
/// Default per-channel burst FIFO depth.
pub const FRONT_FIFO_DEPTH: usize = 2048;
/// Default main FIFO depth (2^28 records).
pub const MAIN_FIFO_DEPTH: u64 = 268_435_456;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("input stream {stream} is not time-sorted")]
    UnsortedInput { stream: usize },
    #[error("{count} input streams exceed the supported maximum of {MAX_MERGE_STREAMS}")]
    TooManyStreams { count: usize },
    #[error("FIFO capacity must be at least 1")]
    ZeroCapacity,
}

/// Outcome of offering one record to a bounded FIFO.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    Dropped,
}

/// Bounded per-channel FIFO. Records arriving while the buffer is full are
/// dropped on the producer side; accepted records keep their order. A sticky
/// flag and a counter record that drops happened.
#[derive(Debug)]
pub struct FrontFifo<T> {
    buf: VecDeque<T>,
    capacity: usize,
    dropped: u64,
    drop_flag: bool,
}

impl<T> FrontFifo<T> {
    pub fn new(capacity: usize) -> Result<Self, StreamError> {
        if capacity == 0 {
            return Err(StreamError::ZeroCapacity);
        }
        Ok(FrontFifo {
            buf: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            dropped: 0,
            drop_flag: false,
        })
    }

    pub fn push(&mut self, record: T) -> PushOutcome {
        if self.buf.len() >= self.capacity {
            self.dropped += 1;
            self.drop_flag = true;
            return PushOutcome::Dropped;
        }
        self.buf.push_back(record);
        PushOutcome::Accepted
    }

    pub fn pop(&mut self) -> Option<T> {
        self.buf.pop_front()
    }

    /// Moves all buffered records into `out`, preserving order.
    pub fn drain_into(&mut self, out: &mut Vec<T>) {
        out.extend(self.buf.drain(..));
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn dropped_count(&self) -> u64 {
        self.dropped
    }

    pub fn drop_flag(&self) -> bool {
        self.drop_flag
    }
}

/// Fill-level model of the shared readout FIFO. Only occupancy is tracked;
/// the records themselves flow elsewhere.
#[derive(Debug)]
pub struct MainFifo {
    capacity: u64,
    backlog: u64,
    accepted: u64,
}

/// Result of running a producer stream against the consumer link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrainOutcome {
    Completed,
    /// The FIFO overflowed; `at_record` is the 1-based index of the first
    /// record that found it full. The measurement must be aborted.
    Aborted { at_record: u64 },
}

impl MainFifo {
    pub fn new(capacity: u64) -> Result<Self, StreamError> {
        if capacity == 0 {
            return Err(StreamError::ZeroCapacity);
        }
        Ok(MainFifo {
            capacity,
            backlog: 0,
            accepted: 0,
        })
    }

    pub fn backlog(&self) -> u64 {
        self.backlog
    }

    /// Records accepted so far.
    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    /// Offers a batch of produced records, then lets the consumer remove up
    /// to `drain_capacity` records.
    pub fn offer(&mut self, produced: u64, drain_capacity: u64) -> DrainOutcome {
        let room = self.capacity - self.backlog;
        if produced > room {
            return DrainOutcome::Aborted {
                at_record: self.accepted + room + 1,
            };
        }
        self.backlog += produced;
        self.accepted += produced;
        self.backlog -= self.backlog.min(drain_capacity);
        DrainOutcome::Completed
    }

    /// Offers the records produced during one second, then lets the consumer
    /// remove up to `consumer_rate` records.
    pub fn offer_second(&mut self, produced: u64, consumer_rate: u64) -> DrainOutcome {
        self.offer(produced, consumer_rate)
    }
}

/// Runs a per-second producer record count sequence against the consumer
/// link and reports whether the FIFO ever overflowed.
pub fn drain_main(
    fifo: &mut MainFifo,
    consumer_rate: u64,
    per_second_counts: impl IntoIterator<Item = u64>,
) -> DrainOutcome {
    for produced in per_second_counts {
        if let DrainOutcome::Aborted { at_record } = fifo.offer_second(produced, consumer_rate) {
            return DrainOutcome::Aborted { at_record };
        }
    }
    DrainOutcome::Completed
}

/// Anything the merger can order: a timestamp plus a channel index used to
/// break equal-time ties.
pub trait MergeItem {
    fn time_ps(&self) -> u64;
    fn channel_key(&self) -> u8;
}

impl MergeItem for T2Event {
    fn time_ps(&self) -> u64 {
        self.time_ps
    }

    fn channel_key(&self) -> u8 {
        T2Event::channel_key(self)
    }
}

/// Merges up to 65 individually time-sorted streams into one stream, ordered
/// by time and, for equal times, by ascending channel index. Returns an error
/// naming the first stream found out of order.
pub fn merge_sorted<T: MergeItem>(inputs: Vec<Vec<T>>) -> Result<Vec<T>, StreamError> {
    if inputs.len() > MAX_MERGE_STREAMS {
        return Err(StreamError::TooManyStreams {
            count: inputs.len(),
        });
    }
    let total: usize = inputs.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total);

    let mut sources: Vec<std::vec::IntoIter<T>> =
        inputs.into_iter().map(Vec::into_iter).collect();
    let mut heap: BinaryHeap<Reverse<(u64, u8, usize)>> = BinaryHeap::with_capacity(sources.len());
    let mut heads: Vec<Option<T>> = Vec::with_capacity(sources.len());
    for (idx, source) in sources.iter_mut().enumerate() {
        let head = source.next();
        if let Some(item) = &head {
            heap.push(Reverse((item.time_ps(), item.channel_key(), idx)));
        }
        heads.push(head);
    }

    while let Some(Reverse((time, _, idx))) = heap.pop() {
        let item = heads[idx].take().expect("heap entry without a head item");
        if let Some(next) = sources[idx].next() {
            if next.time_ps() < time {
                return Err(StreamError::UnsortedInput { stream: idx });
            }
            heap.push(Reverse((next.time_ps(), next.channel_key(), idx)));
            heads[idx] = Some(next);
        }
        out.push(item);
    }
    Ok(out)
}

/// Orders the output of four per-module sorted streams whose union is not
/// globally sorted, as a cross-module merge.
pub fn sort_t2dm<T: MergeItem>(modules: [Vec<T>; 4]) -> Result<Vec<T>, StreamError> {
    merge_sorted(modules.into())
}
