//! Sifting and key-rate evaluation of converted detection streams.
//!
//! Detections arrive as words referenced to the pattern sync, so their
//! position within the repeating symbol pattern is known. Evaluation gates
//! out detections near slot edges, accumulates slot-resolved histograms per
//! wavelength channel, recovers the unknown constant offset between
//! transmitter and receiver slot numbering by searching all cyclic shifts,
//! and reduces each one-second interval to sifted rate, error rate,
//! visibility and secret-key rate.

mod math;

pub use math::{binary_entropy, delta, secret_fraction, secret_rate};

use crate::cowsim::{expected_interference, SlotClass, Symbol, SymbolPattern};
use crate::ttrecords::{decode, Mode, RecordError, ResolutionCode, TtRecord, T3_SYNC_WRAP};

/// Length of one evaluation interval.
pub const INTERVAL_PS: u64 = 1_000_000_000_000;

/// Column header of the per-interval metrics table.
pub const CSV_HEADER: &str = "interval_s,channel,wavelength_nm,sifted_bps,qber,visibility,delta,r,secret_bps,shift,decoy_counts,discarded";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{name} = {value} outside valid domain")]
    Domain { name: &'static str, value: f64 },
    #[error("slot of {slot_ps} ps is not a multiple of the {resolution_ps} ps resolution")]
    ResolutionMismatch { slot_ps: u64, resolution_ps: u64 },
    #[error("guard of {guard_ps} ps leaves no acceptance window in a {slot_ps} ps slot")]
    GateRange { guard_ps: u64, slot_ps: u64 },
    #[error("detection on channel {channel} but only {channels} wavelength channels configured")]
    UnknownChannel { channel: u8, channels: usize },
    #[error("detection stream is not time ordered")]
    UnsortedStream,
    #[error("evaluation requires at least one wavelength channel")]
    NoChannels,
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Acceptance window within each slot: detections closer than `guard_ps`
/// to either slot edge are discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateConfig {
    pub slot_ps: u64,
    pub guard_ps: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            slot_ps: 400,
            guard_ps: 40,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.slot_ps == 0 || 2 * self.guard_ps >= self.slot_ps {
            return Err(EvalError::GateRange {
                guard_ps: self.guard_ps,
                slot_ps: self.slot_ps,
            });
        }
        Ok(())
    }

    /// Whether a detection at this offset within its slot is kept.
    pub fn keeps(&self, offset_ps: u64) -> bool {
        offset_ps >= self.guard_ps && offset_ps < self.slot_ps - self.guard_ps
    }
}

/// Slot-resolved detection counts of one wavelength channel, folded over
/// pattern repetitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotHistogram {
    pub time: Vec<u64>,
    pub phase: Vec<u64>,
}

impl SlotHistogram {
    pub fn new(n_slots: usize) -> SlotHistogram {
        SlotHistogram {
            time: vec![0; n_slots],
            phase: vec![0; n_slots],
        }
    }

    pub fn n_slots(&self) -> usize {
        self.time.len()
    }
}

/// Build a slot histogram from one evaluation interval's worth of
/// sync-referenced records. Detections route to the time or phase arm by
/// channel parity; events inside the guard windows are excluded and counted
/// in the returned tally instead.
pub fn slot_histogram(
    words: impl IntoIterator<Item = u32>,
    resolution: ResolutionCode,
    gate: &GateConfig,
    n_slots: usize,
) -> Result<(SlotHistogram, u64), EvalError> {
    gate.validate()?;
    let resolution_ps = resolution.resolution_ps();
    if !gate.slot_ps.is_multiple_of(resolution_ps) {
        return Err(EvalError::ResolutionMismatch {
            slot_ps: gate.slot_ps,
            resolution_ps,
        });
    }
    let mut hist = SlotHistogram::new(n_slots);
    let mut discarded = 0u64;
    for word in words {
        let (channel, dtime) = match decode(word, Mode::T3)? {
            TtRecord::Detection3 { channel, dtime, .. } => (channel, dtime),
            _ => continue,
        };
        let since_sync = u64::from(dtime) * resolution_ps;
        let slot = ((since_sync / gate.slot_ps) as usize) % n_slots;
        let offset = since_sync % gate.slot_ps;
        if !gate.keeps(offset) {
            discarded += 1;
        } else if channel % 2 == 0 {
            hist.time[slot] += 1;
        } else {
            hist.phase[slot] += 1;
        }
    }
    Ok((hist, discarded))
}

/// Slot roles of one pattern repetition, precomputed for evaluation.
#[derive(Debug, Clone)]
pub struct PatternTables {
    n_slots: usize,
    /// (occupied slot, empty slot) of each data symbol.
    data: Vec<(usize, usize)>,
    decoy_slots: Vec<usize>,
    side_slots: Vec<usize>,
    interfere_slots: Vec<usize>,
}

impl PatternTables {
    pub fn new(pattern: &SymbolPattern) -> PatternTables {
        let mut data = Vec::new();
        let mut decoy_slots = Vec::new();
        for (i, symbol) in pattern.symbols().iter().enumerate() {
            let early = 2 * i;
            let late = early + 1;
            match symbol {
                Symbol::Zero => data.push((early, late)),
                Symbol::One => data.push((late, early)),
                Symbol::Decoy => decoy_slots.extend([early, late]),
            }
        }
        let classes = expected_interference(&pattern.occupancy());
        let side_slots = slots_of(&classes, SlotClass::Side);
        let interfere_slots = slots_of(&classes, SlotClass::Interfere);
        PatternTables {
            n_slots: pattern.n_slots(),
            data,
            decoy_slots,
            side_slots,
            interfere_slots,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }
}

fn slots_of(classes: &[SlotClass], wanted: SlotClass) -> Vec<usize> {
    classes
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == wanted)
        .map(|(i, _)| i)
        .collect()
}

/// Timing-arm counts at one candidate shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TimeEval {
    pub correct: u64,
    pub wrong: u64,
    pub decoy: u64,
}

impl TimeEval {
    pub fn sifted(&self) -> u64 {
        self.correct + self.wrong
    }

    pub fn qber(&self) -> Option<f64> {
        let sifted = self.sifted();
        (sifted > 0).then(|| self.wrong as f64 / sifted as f64)
    }
}

/// Read the timing-arm histogram assuming the receiver's slot numbering
/// lags the transmitter's by `shift` slots.
pub fn evaluate_time(hist: &SlotHistogram, tables: &PatternTables, shift: usize) -> TimeEval {
    let n = tables.n_slots;
    let at = |slot: usize| hist.time[(slot + shift) % n];
    let mut eval = TimeEval::default();
    for &(occupied, wrong) in &tables.data {
        eval.correct += at(occupied);
        eval.wrong += at(wrong);
    }
    for &slot in &tables.decoy_slots {
        eval.decoy += at(slot);
    }
    eval
}

/// Interference visibility estimated from phase-arm counts at one shift:
/// `1 - c_int / (2 c_side)`, clamped to [0, 1]. `None` without side counts.
pub fn evaluate_phase(
    hist: &SlotHistogram,
    tables: &PatternTables,
    shift: usize,
) -> Option<f64> {
    if tables.side_slots.is_empty() || tables.interfere_slots.is_empty() {
        return None;
    }
    let n = tables.n_slots;
    let sum = |slots: &[usize]| -> u64 {
        slots.iter().map(|&s| hist.phase[(s + shift) % n]).sum()
    };
    let side_sum = sum(&tables.side_slots);
    if side_sum == 0 {
        return None;
    }
    let side_mean = side_sum as f64 / tables.side_slots.len() as f64;
    let int_mean = sum(&tables.interfere_slots) as f64 / tables.interfere_slots.len() as f64;
    Some((1.0 - int_mean / (2.0 * side_mean)).clamp(0.0, 1.0))
}

/// Best cyclic shift and the statistics evaluated there.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOutcome {
    pub shift: usize,
    pub time: TimeEval,
    pub visibility: Option<f64>,
}

/// Exhaustively search all cyclic shifts for the alignment between
/// transmitter and receiver slot numbering. Lower error rate wins; an
/// undefined error rate loses to any defined one. Ties fall back to higher
/// visibility, then to the smaller shift.
pub fn shift_search(hist: &SlotHistogram, tables: &PatternTables) -> ShiftOutcome {
    let mut best: Option<ShiftOutcome> = None;
    for shift in 0..tables.n_slots {
        let candidate = ShiftOutcome {
            shift,
            time: evaluate_time(hist, tables, shift),
            visibility: evaluate_phase(hist, tables, shift),
        };
        let replace = match &best {
            None => true,
            Some(current) => beats(&candidate, current),
        };
        if replace {
            best = Some(candidate);
        }
    }
    best.expect("pattern has at least one slot")
}

fn beats(a: &ShiftOutcome, b: &ShiftOutcome) -> bool {
    // Compare error rates exactly as fractions: wrong_a / sifted_a against
    // wrong_b / sifted_b, with an empty sifted set worse than any rate.
    let qber_order = match (a.time.sifted(), b.time.sifted()) {
        (0, 0) => std::cmp::Ordering::Equal,
        (0, _) => std::cmp::Ordering::Greater,
        (_, 0) => std::cmp::Ordering::Less,
        (sa, sb) => {
            (a.time.wrong as u128 * sb as u128).cmp(&(b.time.wrong as u128 * sa as u128))
        }
    };
    match qber_order {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => match (a.visibility, b.visibility) {
            (Some(va), Some(vb)) => va > vb,
            (Some(_), None) => true,
            _ => false,
        },
    }
}

/// Per-interval, per-channel results. Estimators that are undefined for
/// lack of counts stay `None` and render as empty table fields; rates fall
/// back to zero rather than NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub interval_s: u64,
    pub channel: u32,
    pub wavelength_nm: f64,
    pub sifted_bps: f64,
    pub qber: Option<f64>,
    pub visibility: Option<f64>,
    pub delta: Option<f64>,
    pub secret_fraction: Option<f64>,
    pub secret_bps: f64,
    pub shift: u32,
    pub decoy_counts: u64,
    pub discarded: u64,
}

impl Metrics {
    pub fn csv_row(&self) -> String {
        fn opt(value: Option<f64>) -> String {
            value.map(|v| v.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.interval_s,
            self.channel,
            self.wavelength_nm,
            self.sifted_bps,
            opt(self.qber),
            opt(self.visibility),
            opt(self.delta),
            opt(self.secret_fraction),
            self.secret_bps,
            self.shift,
            self.decoy_counts,
            self.discarded
        )
    }
}

/// Static description of one wavelength channel for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMeta {
    pub wavelength_nm: f64,
    pub mu: f64,
}

/// Evaluation parameters shared by live runs and file replays.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub gate: GateConfig,
    pub resolution: ResolutionCode,
    /// Sync period as emitted by the transmitter, before division.
    pub sync_period_ps: u64,
    pub sync_divider: u32,
    /// Number of one-second intervals to report.
    pub intervals: u64,
    pub channels: Vec<ChannelMeta>,
}

#[derive(Debug, Clone)]
struct ChannelAccumulator {
    hist: SlotHistogram,
    discarded: u64,
}

impl ChannelAccumulator {
    fn new(n_slots: usize) -> ChannelAccumulator {
        ChannelAccumulator {
            hist: SlotHistogram::new(n_slots),
            discarded: 0,
        }
    }
}

/// Streaming evaluator: consumes a time-ordered word stream, closes each
/// one-second interval as soon as a detection beyond it arrives, and emits
/// one metrics row per interval and channel. Intervals without any
/// detections still produce a row. Records past the configured number of
/// intervals are ignored, so a trailing partial interval never skews rates.
pub struct IntervalPipeline {
    gate: GateConfig,
    resolution_ps: u64,
    effective_period_ps: u64,
    intervals: u64,
    channels: Vec<ChannelMeta>,
    tables: PatternTables,
    overflow_blocks: u64,
    current_interval: u64,
    accumulators: Vec<ChannelAccumulator>,
    rows: Vec<Metrics>,
}

impl IntervalPipeline {
    pub fn new(config: &EvalConfig, pattern: &SymbolPattern) -> Result<IntervalPipeline, EvalError> {
        config.gate.validate()?;
        let resolution_ps = config.resolution.resolution_ps();
        if !config.gate.slot_ps.is_multiple_of(resolution_ps) {
            return Err(EvalError::ResolutionMismatch {
                slot_ps: config.gate.slot_ps,
                resolution_ps,
            });
        }
        if config.channels.is_empty() {
            return Err(EvalError::NoChannels);
        }
        let tables = PatternTables::new(pattern);
        let accumulators = config
            .channels
            .iter()
            .map(|_| ChannelAccumulator::new(tables.n_slots()))
            .collect();
        Ok(IntervalPipeline {
            gate: config.gate,
            resolution_ps,
            effective_period_ps: config.sync_period_ps * u64::from(config.sync_divider),
            intervals: config.intervals,
            channels: config.channels.clone(),
            tables,
            overflow_blocks: 0,
            current_interval: 0,
            accumulators,
            rows: Vec::new(),
        })
    }

    pub fn push_words(&mut self, words: impl IntoIterator<Item = u32>) -> Result<(), EvalError> {
        for word in words {
            self.push_word(word)?;
        }
        Ok(())
    }

    pub fn push_word(&mut self, word: u32) -> Result<(), EvalError> {
        match decode(word, Mode::T3)? {
            TtRecord::Overflow3 { count } => {
                self.overflow_blocks += u64::from(count);
                Ok(())
            }
            TtRecord::Detection3 {
                channel,
                nsync,
                dtime,
            } => self.detection(channel, nsync, dtime),
            TtRecord::Marker3 { .. } => Ok(()),
            other => Err(EvalError::Record(RecordError::ModeMismatch {
                kind: kind_name(&other),
                mode: Mode::T3,
            })),
        }
    }

    fn detection(&mut self, channel: u8, nsync: u16, dtime: u16) -> Result<(), EvalError> {
        let sync_index = self.overflow_blocks * T3_SYNC_WRAP + u64::from(nsync);
        let since_sync = u64::from(dtime) * self.resolution_ps;
        let time_ps = sync_index * self.effective_period_ps + since_sync;
        let interval = time_ps / INTERVAL_PS;

        if interval < self.current_interval {
            return Err(EvalError::UnsortedStream);
        }
        while self.current_interval < interval.min(self.intervals) {
            self.close_interval();
        }
        if interval >= self.intervals {
            return Ok(());
        }

        let pair = usize::from(channel / 2);
        if pair >= self.channels.len() {
            return Err(EvalError::UnknownChannel {
                channel,
                channels: self.channels.len(),
            });
        }
        let slot = ((since_sync / self.gate.slot_ps) as usize) % self.tables.n_slots();
        let offset = since_sync % self.gate.slot_ps;
        let acc = &mut self.accumulators[pair];
        if !self.gate.keeps(offset) {
            acc.discarded += 1;
        } else if channel.is_multiple_of(2) {
            acc.hist.time[slot] += 1;
        } else {
            acc.hist.phase[slot] += 1;
        }
        Ok(())
    }

    fn close_interval(&mut self) {
        let n_slots = self.tables.n_slots();
        for (index, meta) in self.channels.iter().enumerate() {
            let acc = std::mem::replace(
                &mut self.accumulators[index],
                ChannelAccumulator::new(n_slots),
            );
            let outcome = shift_search(&acc.hist, &self.tables);
            self.rows.push(reduce(
                outcome,
                acc.discarded,
                self.current_interval,
                index as u32,
                meta,
            ));
        }
        self.current_interval += 1;
    }

    /// Close any remaining intervals (as empty if no detections reached
    /// them) and return all rows ordered by interval, then channel.
    pub fn finish(mut self) -> Vec<Metrics> {
        while self.current_interval < self.intervals {
            self.close_interval();
        }
        self.rows
    }
}

fn kind_name(record: &TtRecord) -> &'static str {
    match record {
        TtRecord::Detection2 { .. } => "detection",
        TtRecord::Overflow2 { .. } => "overflow",
        TtRecord::Sync2 { .. } => "sync",
        TtRecord::Marker2 { .. } => "marker",
        TtRecord::Detection3 { .. } => "detection",
        TtRecord::Overflow3 { .. } => "overflow",
        TtRecord::Marker3 { .. } => "marker",
    }
}

/// Reduce one interval of one channel to a metrics row. Secret-key terms
/// are computed only where their inputs are defined; an interval without
/// sifted counts or visibility reports zero secret rate.
fn reduce(
    outcome: ShiftOutcome,
    discarded: u64,
    interval_s: u64,
    channel: u32,
    meta: &ChannelMeta,
) -> Metrics {
    let seconds = INTERVAL_PS as f64 / 1e12;
    let sifted_bps = outcome.time.sifted() as f64 / seconds;
    let qber = outcome.time.qber();
    let visibility = outcome.visibility;
    let delta = visibility.and_then(|v| math::delta(v, meta.mu).ok());
    let fraction = match (qber, visibility) {
        (Some(q), Some(v)) => math::secret_fraction(q, v, meta.mu).ok(),
        _ => None,
    };
    let secret_bps = fraction.map_or(0.0, |r| math::secret_rate(r, sifted_bps));
    Metrics {
        interval_s,
        channel,
        wavelength_nm: meta.wavelength_nm,
        sifted_bps,
        qber,
        visibility,
        delta,
        secret_fraction: fraction,
        secret_bps,
        shift: outcome.shift as u32,
        decoy_counts: outcome.time.decoy,
        discarded,
    }
}
