//! Transforms between wire-format record streams and absolute-time events.
//!
//! T2 words carry 25-bit timetags that roll over every 167.77 us; rollover
//! records make the expansion to exact 64-bit picosecond times lossless.
//! The T3 transform replays a T2 event stream against its sync channel and
//! rewrites every detection as (sync counter, start-stop bin).

use super::{
    decode, encode, Mode, RecordError, ResolutionCode, TtRecord, T2_TAG_MASK, T2_UNIT_PS,
    T2_WRAP_TAGS, T3_SYNC_WRAP,
};

/// What produced an event on the tagger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Click on detector input `channel`.
    Detection { channel: u8 },
    /// Edge on the sync input.
    Sync,
    /// Edge on marker input `id` (1..=4).
    Marker { id: u8 },
}

/// An absolute-time tagger event. Times are exact picoseconds from the start
/// of the measurement; the codec quantizes them down to the 5 ps grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct T2Event {
    pub time_ps: u64,
    pub kind: EventKind,
}

impl T2Event {
    pub fn detection(time_ps: u64, channel: u8) -> Self {
        T2Event {
            time_ps,
            kind: EventKind::Detection { channel },
        }
    }

    pub fn sync(time_ps: u64) -> Self {
        T2Event {
            time_ps,
            kind: EventKind::Sync,
        }
    }

    pub fn marker(time_ps: u64, id: u8) -> Self {
        T2Event {
            time_ps,
            kind: EventKind::Marker { id },
        }
    }

    /// Ordering key used when merging equal-time events from several
    /// channels: detector index first, then sync, then markers.
    pub fn channel_key(&self) -> u8 {
        match self.kind {
            EventKind::Detection { channel } => channel,
            EventKind::Sync => 64,
            EventKind::Marker { id } => 64 + id,
        }
    }
}

/// Expands a T2 word stream into absolute-time events, dissolving rollover
/// records into the timebase.
pub fn expand_t2(words: impl IntoIterator<Item = u32>) -> Result<Vec<T2Event>, RecordError> {
    let mut base_tags: u64 = 0;
    let mut out = Vec::new();
    for word in words {
        match decode(word, Mode::T2)? {
            TtRecord::Overflow2 { count } => base_tags += count as u64 * T2_WRAP_TAGS,
            TtRecord::Detection2 { channel, timetag } => out.push(T2Event::detection(
                (base_tags + timetag as u64) * T2_UNIT_PS,
                channel,
            )),
            TtRecord::Sync2 { timetag } => {
                out.push(T2Event::sync((base_tags + timetag as u64) * T2_UNIT_PS))
            }
            TtRecord::Marker2 { id, timetag } => out.push(T2Event::marker(
                (base_tags + timetag as u64) * T2_UNIT_PS,
                id,
            )),
            other => unreachable!("decode(T2) returned {other:?}"),
        }
    }
    Ok(out)
}

/// Incremental inverse of [`expand_t2`]: emits rollover records exactly when
/// the 25-bit timetag would wrap, coalescing consecutive rollovers into one
/// maximal-count record.
#[derive(Debug, Default)]
pub struct T2Compressor {
    blocks: u64,
    last_time_ps: u64,
    index: usize,
}

impl T2Compressor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: &T2Event, out: &mut Vec<u32>) -> Result<(), RecordError> {
        if event.time_ps < self.last_time_ps {
            return Err(RecordError::UnsortedInput { index: self.index });
        }
        self.last_time_ps = event.time_ps;
        self.index += 1;

        let tags = event.time_ps / T2_UNIT_PS;
        let block = tags / T2_WRAP_TAGS;
        let mut pending = block - self.blocks;
        while pending > 0 {
            let count = pending.min(T2_TAG_MASK as u64) as u32;
            out.push(encode(&TtRecord::Overflow2 { count }, Mode::T2)?);
            pending -= count as u64;
        }
        self.blocks = block;

        let timetag = (tags % T2_WRAP_TAGS) as u32;
        let record = match event.kind {
            EventKind::Detection { channel } => TtRecord::Detection2 { channel, timetag },
            EventKind::Sync => TtRecord::Sync2 { timetag },
            EventKind::Marker { id } => TtRecord::Marker2 { id, timetag },
        };
        out.push(encode(&record, Mode::T2)?);
        Ok(())
    }
}

/// Packs a time-sorted event sequence into T2 words.
pub fn compress_t2<'a>(
    events: impl IntoIterator<Item = &'a T2Event>,
) -> Result<Vec<u32>, RecordError> {
    let mut compressor = T2Compressor::new();
    let mut out = Vec::new();
    for event in events {
        compressor.push(event, &mut out)?;
    }
    Ok(out)
}

/// Keeps every `divider`-th sync edge, starting with the first. The divider
/// must be a power of two not larger than 16.
pub fn apply_sync_divider(sync_times: &[u64], divider: u32) -> Result<Vec<u64>, RecordError> {
    validate_divider(divider)?;
    Ok(sync_times
        .iter()
        .step_by(divider as usize)
        .copied()
        .collect())
}

pub(crate) fn validate_divider(divider: u32) -> Result<(), RecordError> {
    if divider == 0 || divider > 16 || !divider.is_power_of_two() {
        return Err(RecordError::InvalidDivider(divider));
    }
    Ok(())
}

/// Bookkeeping of a T2 -> T3 conversion.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct T3ConversionStats {
    /// Detections and markers dropped because no effective sync preceded them
    /// or their start-stop time exceeded the covered span.
    pub dropped: u64,
    /// Effective sync edges consumed.
    pub effective_syncs: u64,
}

/// Result of a whole-stream T2 -> T3 conversion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct T3Stream {
    pub words: Vec<u32>,
    pub stats: T3ConversionStats,
}

/// Streaming T2 -> T3 converter.
///
/// Consumes an absolute-time event stream containing explicit sync edges and
/// emits T3 words. Sync edges themselves are not forwarded; the sync divider
/// is applied first, so `nsync` counts effective sync edges modulo 1024. A
/// rollover record is emitted as soon as the effective sync counter wraps,
/// which keeps `1024 * rollovers + nsync` an exact reconstruction of the
/// effective sync index for every later record.
#[derive(Debug)]
pub struct T3Converter {
    resolution: ResolutionCode,
    divider: u32,
    span_ps: u64,
    true_syncs: u64,
    current: Option<EffectiveSync>,
    stats: T3ConversionStats,
    index: usize,
    last_time_ps: u64,
}

#[derive(Debug, Clone, Copy)]
struct EffectiveSync {
    index: u64,
    time_ps: u64,
}

impl T3Converter {
    pub fn new(resolution: ResolutionCode, divider: u32) -> Result<Self, RecordError> {
        validate_divider(divider)?;
        Ok(T3Converter {
            resolution,
            divider,
            span_ps: resolution.t3_span_ps(),
            true_syncs: 0,
            current: None,
            stats: T3ConversionStats::default(),
            index: 0,
            last_time_ps: 0,
        })
    }

    pub fn stats(&self) -> T3ConversionStats {
        self.stats
    }

    pub fn push(&mut self, event: &T2Event, out: &mut Vec<u32>) -> Result<(), RecordError> {
        if event.time_ps < self.last_time_ps {
            return Err(RecordError::UnsortedInput { index: self.index });
        }
        self.last_time_ps = event.time_ps;
        self.index += 1;

        match event.kind {
            EventKind::Sync => {
                let true_index = self.true_syncs;
                self.true_syncs += 1;
                if !true_index.is_multiple_of(self.divider as u64) {
                    return Ok(());
                }
                let index = true_index / self.divider as u64;
                self.stats.effective_syncs += 1;
                if index > 0 && index.is_multiple_of(T3_SYNC_WRAP) {
                    out.push(encode(&TtRecord::Overflow3 { count: 1 }, Mode::T3)?);
                }
                self.current = Some(EffectiveSync {
                    index,
                    time_ps: event.time_ps,
                });
            }
            EventKind::Detection { channel } => match self.current {
                Some(sync) => {
                    let dt_ps = event.time_ps - sync.time_ps;
                    if dt_ps >= self.span_ps {
                        self.stats.dropped += 1;
                    } else {
                        out.push(encode(
                            &TtRecord::Detection3 {
                                channel,
                                nsync: (sync.index % T3_SYNC_WRAP) as u16,
                                dtime: (dt_ps / self.resolution.resolution_ps()) as u16,
                            },
                            Mode::T3,
                        )?);
                    }
                }
                None => self.stats.dropped += 1,
            },
            EventKind::Marker { id } => match self.current {
                Some(sync) => out.push(encode(
                    &TtRecord::Marker3 {
                        id,
                        nsync: (sync.index % T3_SYNC_WRAP) as u16,
                    },
                    Mode::T3,
                )?),
                None => self.stats.dropped += 1,
            },
        }
        Ok(())
    }
}

/// Converts a whole T2 event stream into T3 words.
pub fn t2_to_t3<'a>(
    events: impl IntoIterator<Item = &'a T2Event>,
    divider: u32,
    resolution: ResolutionCode,
) -> Result<T3Stream, RecordError> {
    let mut converter = T3Converter::new(resolution, divider)?;
    let mut words = Vec::new();
    for event in events {
        converter.push(event, &mut words)?;
    }
    Ok(T3Stream {
        words,
        stats: converter.stats(),
    })
}
