//! Time-tag record codec.
//!
//! Records are uniform 32-bit words in one of two framings: T2 (free-running
//! timestamps in 5 ps units with explicit rollover records) and T3
//! (sync-relative start-stop times). The bit layout is shared:
//!
//! ```text
//! T2: [31 special] [30:25 channel] [24:0 timetag]
//! T3: [31 special] [30:25 channel] [24:10 dtime] [9:0 nsync]
//! ```
//!
//! Special records are flagged by bit 31; channel 0x3F then marks a rollover
//! record, channel 0 a sync record (T2 only) and channels 1..=4 marker inputs.

mod file;
mod stream;

pub use file::{read_record_file, write_record_file, FileError, FileHeader, RecordFileReader, RecordFileWriter, FILE_MAGIC, HEADER_LEN};
pub use stream::{
    apply_sync_divider, compress_t2, expand_t2, t2_to_t3, EventKind, T2Compressor, T2Event,
    T3ConversionStats, T3Converter, T3Stream,
};

use thiserror::Error;

/// Timetag unit of the T2 framing, in picoseconds.
pub const T2_UNIT_PS: u64 = 5;
/// Width of the T2 timetag field.
pub const T2_TAG_BITS: u32 = 25;
/// T2 timetag rollover period in timetag units (2^25).
pub const T2_WRAP_TAGS: u64 = 1 << T2_TAG_BITS;
/// T2 timetag rollover period in picoseconds (167.77 us).
pub const T2_WRAP_PS: u64 = T2_WRAP_TAGS * T2_UNIT_PS;
/// Number of sync periods after which the T3 sync counter rolls over (2^10).
pub const T3_SYNC_WRAP: u64 = 1 << 10;
/// Number of start-stop bins in the T3 framing (2^15).
pub const T3_DTIME_SPAN: u64 = 1 << 15;

const SPECIAL_BIT: u32 = 1 << 31;
const CHANNEL_SHIFT: u32 = 25;
const CHANNEL_MASK: u32 = 0x3F;
const OVERFLOW_CHANNEL: u8 = 0x3F;
const MAX_MARKER_ID: u8 = 4;
const T2_TAG_MASK: u32 = (1 << T2_TAG_BITS) - 1;
const T3_NSYNC_MASK: u32 = 0x3FF;
const T3_DTIME_SHIFT: u32 = 10;
const T3_DTIME_MASK: u32 = 0x7FFF;

/// Errors raised by the record codec and the derived stream transforms.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("word 0x{word:08x} is not a valid {mode} record")]
    InvalidRecord { word: u32, mode: Mode },
    #[error("{field} = {value} outside [{min}, {max}]")]
    Range {
        field: &'static str,
        value: u64,
        min: u64,
        max: u64,
    },
    #[error("record {kind} cannot be encoded as {mode}")]
    ModeMismatch { kind: &'static str, mode: Mode },
    #[error("input events not time-sorted at index {index}")]
    UnsortedInput { index: usize },
    #[error("sync divider {0} invalid (must be a power of two <= 16)")]
    InvalidDivider(u32),
}

/// Record framing selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    T2,
    T3,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::T2 => f.write_str("T2"),
            Mode::T3 => f.write_str("T3"),
        }
    }
}

/// Binning code of the start-stop time axis. The bin width doubles with every
/// code step, from 5 ps (code 0) up to 41.94 us (code 23).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolutionCode(u8);

impl ResolutionCode {
    pub const MAX_CODE: u8 = 23;
    pub const BASE: Self = ResolutionCode(0);

    pub fn new(code: u8) -> Result<Self, RecordError> {
        if code > Self::MAX_CODE {
            return Err(RecordError::Range {
                field: "resolution code",
                value: code as u64,
                min: 0,
                max: Self::MAX_CODE as u64,
            });
        }
        Ok(ResolutionCode(code))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// Bin width in picoseconds: 5 * 2^code.
    pub fn resolution_ps(self) -> u64 {
        T2_UNIT_PS << self.0
    }

    /// Covered start-stop span in picoseconds: 32768 bins of the current width.
    pub fn t3_span_ps(self) -> u64 {
        T3_DTIME_SPAN * self.resolution_ps()
    }
}

/// One decoded 32-bit record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtRecord {
    /// T2 detection on a detector channel; `timetag` is in 5 ps units and
    /// wraps every 2^25 tags.
    Detection2 { channel: u8, timetag: u32 },
    /// T2 timetag rollover; `count` rollovers elapsed since the last record.
    Overflow2 { count: u32 },
    /// T2 sync input edge.
    Sync2 { timetag: u32 },
    /// T2 auxiliary marker input edge (ids 1..=4).
    Marker2 { id: u8, timetag: u32 },
    /// T3 detection: `dtime` start-stop bins after effective sync `nsync`
    /// (modulo 1024).
    Detection3 { channel: u8, nsync: u16, dtime: u16 },
    /// T3 sync counter rollover; `count` rollovers of 1024 syncs each.
    Overflow3 { count: u16 },
    /// T3 marker edge, tagged with the current sync counter.
    Marker3 { id: u8, nsync: u16 },
}

impl TtRecord {
    pub fn mode(&self) -> Mode {
        match self {
            TtRecord::Detection2 { .. }
            | TtRecord::Overflow2 { .. }
            | TtRecord::Sync2 { .. }
            | TtRecord::Marker2 { .. } => Mode::T2,
            TtRecord::Detection3 { .. } | TtRecord::Overflow3 { .. } | TtRecord::Marker3 { .. } => {
                Mode::T3
            }
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            TtRecord::Detection2 { .. } => "Detection2",
            TtRecord::Overflow2 { .. } => "Overflow2",
            TtRecord::Sync2 { .. } => "Sync2",
            TtRecord::Marker2 { .. } => "Marker2",
            TtRecord::Detection3 { .. } => "Detection3",
            TtRecord::Overflow3 { .. } => "Overflow3",
            TtRecord::Marker3 { .. } => "Marker3",
        }
    }
}

fn check(field: &'static str, value: u64, min: u64, max: u64) -> Result<(), RecordError> {
    if value < min || value > max {
        return Err(RecordError::Range {
            field,
            value,
            min,
            max,
        });
    }
    Ok(())
}

/// Packs a record into its 32-bit wire form, validating field ranges.
pub fn encode(record: &TtRecord, mode: Mode) -> Result<u32, RecordError> {
    if record.mode() != mode {
        return Err(RecordError::ModeMismatch {
            kind: record.kind(),
            mode,
        });
    }
    let word = match *record {
        TtRecord::Detection2 { channel, timetag } => {
            check("channel", channel as u64, 0, 63)?;
            check("timetag", timetag as u64, 0, (T2_TAG_MASK) as u64)?;
            (channel as u32) << CHANNEL_SHIFT | timetag
        }
        TtRecord::Overflow2 { count } => {
            check("overflow count", count as u64, 1, T2_TAG_MASK as u64)?;
            SPECIAL_BIT | (OVERFLOW_CHANNEL as u32) << CHANNEL_SHIFT | count
        }
        TtRecord::Sync2 { timetag } => {
            check("timetag", timetag as u64, 0, T2_TAG_MASK as u64)?;
            SPECIAL_BIT | timetag
        }
        TtRecord::Marker2 { id, timetag } => {
            check("marker id", id as u64, 1, MAX_MARKER_ID as u64)?;
            check("timetag", timetag as u64, 0, T2_TAG_MASK as u64)?;
            SPECIAL_BIT | (id as u32) << CHANNEL_SHIFT | timetag
        }
        TtRecord::Detection3 {
            channel,
            nsync,
            dtime,
        } => {
            check("channel", channel as u64, 0, 63)?;
            check("nsync", nsync as u64, 0, T3_NSYNC_MASK as u64)?;
            check("dtime", dtime as u64, 0, T3_DTIME_MASK as u64)?;
            (channel as u32) << CHANNEL_SHIFT | (dtime as u32) << T3_DTIME_SHIFT | nsync as u32
        }
        TtRecord::Overflow3 { count } => {
            check("overflow count", count as u64, 1, T3_NSYNC_MASK as u64)?;
            SPECIAL_BIT | (OVERFLOW_CHANNEL as u32) << CHANNEL_SHIFT | count as u32
        }
        TtRecord::Marker3 { id, nsync } => {
            check("marker id", id as u64, 1, MAX_MARKER_ID as u64)?;
            check("nsync", nsync as u64, 0, T3_NSYNC_MASK as u64)?;
            SPECIAL_BIT | (id as u32) << CHANNEL_SHIFT | nsync as u32
        }
    };
    Ok(word)
}

/// Classifies and unpacks a 32-bit wire word.
///
/// Any (special, channel) prefix outside the documented table, as well as
/// special records with impossible payloads (zero rollover count, nonzero
/// dtime bits on T3 markers or rollovers), decodes to `InvalidRecord`.
pub fn decode(word: u32, mode: Mode) -> Result<TtRecord, RecordError> {
    let special = word & SPECIAL_BIT != 0;
    let channel = ((word >> CHANNEL_SHIFT) & CHANNEL_MASK) as u8;
    let invalid = || RecordError::InvalidRecord { word, mode };
    match mode {
        Mode::T2 => {
            let timetag = word & T2_TAG_MASK;
            if !special {
                return Ok(TtRecord::Detection2 { channel, timetag });
            }
            match channel {
                OVERFLOW_CHANNEL => {
                    if timetag == 0 {
                        Err(invalid())
                    } else {
                        Ok(TtRecord::Overflow2 { count: timetag })
                    }
                }
                0 => Ok(TtRecord::Sync2 { timetag }),
                id @ 1..=MAX_MARKER_ID => Ok(TtRecord::Marker2 { id, timetag }),
                _ => Err(invalid()),
            }
        }
        Mode::T3 => {
            let nsync = (word & T3_NSYNC_MASK) as u16;
            let dtime = ((word >> T3_DTIME_SHIFT) & T3_DTIME_MASK) as u16;
            if !special {
                return Ok(TtRecord::Detection3 {
                    channel,
                    nsync,
                    dtime,
                });
            }
            match channel {
                OVERFLOW_CHANNEL => {
                    if nsync == 0 || dtime != 0 {
                        Err(invalid())
                    } else {
                        Ok(TtRecord::Overflow3 { count: nsync })
                    }
                }
                id @ 1..=MAX_MARKER_ID => {
                    if dtime != 0 {
                        Err(invalid())
                    } else {
                        Ok(TtRecord::Marker3 { id, nsync })
                    }
                }
                _ => Err(invalid()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_ladder_endpoints() {
        assert_eq!(ResolutionCode::new(0).unwrap().resolution_ps(), 5);
        assert_eq!(ResolutionCode::new(1).unwrap().resolution_ps(), 10);
        assert_eq!(ResolutionCode::new(23).unwrap().resolution_ps(), 41_943_040);
        assert!(ResolutionCode::new(24).is_err());
    }

    #[test]
    fn t3_span_endpoints() {
        assert_eq!(ResolutionCode::new(0).unwrap().t3_span_ps(), 163_840);
        assert_eq!(
            ResolutionCode::new(23).unwrap().t3_span_ps(),
            1_374_389_534_720
        );
    }

    #[test]
    fn t2_wrap_constant() {
        assert_eq!(T2_WRAP_PS, 167_772_160);
    }

    #[test]
    fn detection2_roundtrip_at_field_boundaries() {
        for &(channel, timetag) in &[(0u8, 0u32), (0, T2_TAG_MASK), (63, 0), (63, T2_TAG_MASK)] {
            let rec = TtRecord::Detection2 { channel, timetag };
            let word = encode(&rec, Mode::T2).unwrap();
            assert_eq!(decode(word, Mode::T2).unwrap(), rec);
        }
    }

    #[test]
    fn detection3_roundtrip_at_field_boundaries() {
        for &(nsync, dtime) in &[(0u16, 0u16), (1023, 0), (0, 32767), (1023, 32767)] {
            let rec = TtRecord::Detection3 {
                channel: 17,
                nsync,
                dtime,
            };
            let word = encode(&rec, Mode::T3).unwrap();
            assert_eq!(decode(word, Mode::T3).unwrap(), rec);
        }
    }

    #[test]
    fn overflow_count_range_is_enforced() {
        assert!(matches!(
            encode(&TtRecord::Overflow2 { count: 0 }, Mode::T2),
            Err(RecordError::Range { .. })
        ));
        assert!(encode(
            &TtRecord::Overflow2 {
                count: T2_TAG_MASK
            },
            Mode::T2
        )
        .is_ok());
        assert!(matches!(
            encode(&TtRecord::Overflow3 { count: 1024 }, Mode::T3),
            Err(RecordError::Range { .. })
        ));
    }

    #[test]
    fn marker_id_range_is_enforced() {
        assert!(encode(&TtRecord::Marker2 { id: 4, timetag: 9 }, Mode::T2).is_ok());
        assert!(matches!(
            encode(&TtRecord::Marker2 { id: 5, timetag: 9 }, Mode::T2),
            Err(RecordError::Range { .. })
        ));
        assert!(matches!(
            encode(&TtRecord::Marker3 { id: 0, nsync: 0 }, Mode::T3),
            Err(RecordError::Range { .. })
        ));
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let t2 = TtRecord::Sync2 { timetag: 1 };
        assert!(matches!(
            encode(&t2, Mode::T3),
            Err(RecordError::ModeMismatch { .. })
        ));
        let t3 = TtRecord::Overflow3 { count: 1 };
        assert!(matches!(
            encode(&t3, Mode::T2),
            Err(RecordError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn undocumented_prefixes_decode_as_invalid() {
        // Special-flagged channels 5..=62 are reserved in both framings, and
        // channel 0 (sync) does not exist in T3 streams.
        for ch in 5u32..=62 {
            let word = SPECIAL_BIT | ch << CHANNEL_SHIFT | 1;
            assert!(matches!(
                decode(word, Mode::T2),
                Err(RecordError::InvalidRecord { .. })
            ));
            assert!(matches!(
                decode(word, Mode::T3),
                Err(RecordError::InvalidRecord { .. })
            ));
        }
        let sync_prefix = SPECIAL_BIT | 7;
        assert!(decode(sync_prefix, Mode::T2).is_ok());
        assert!(decode(sync_prefix, Mode::T3).is_err());
    }

    #[test]
    fn zero_count_rollover_words_are_invalid() {
        let w2 = SPECIAL_BIT | (OVERFLOW_CHANNEL as u32) << CHANNEL_SHIFT;
        assert!(decode(w2, Mode::T2).is_err());
        assert!(decode(w2, Mode::T3).is_err());
    }
}
