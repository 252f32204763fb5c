//! Transmitter-side model of a coherent-one-way link.
//!
//! A transmitter emits a repeating pattern of symbols, each spanning two
//! consecutive time slots (early/late). Logical bits occupy exactly one of
//! the two slots; decoy symbols occupy both. The receiver splits the light
//! between a timing arm (direct detection) and a phase arm (delay-line
//! interferometer), so every slot of the pattern can be classified ahead of
//! time: which slot a bit is expected in, and whether neighbouring occupied
//! slots interfere in the phase arm.

mod channel;

pub use channel::{emit_records, simulate_channel, ChannelSim, ChunkOutput};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of symbols in the standard transmission pattern.
pub const STANDARD_PATTERN_LEN: usize = 96;
/// Zero symbols in the standard pattern.
pub const STANDARD_ZEROS: usize = 43;
/// One symbols in the standard pattern.
pub const STANDARD_ONES: usize = 43;
/// Decoy symbols in the standard pattern.
pub const STANDARD_DECOYS: usize = 10;

/// Errors arising from invalid physical or pattern parameters.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("parameter {name} = {value} violates {constraint}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },
    #[error("symbol pattern must not be empty")]
    EmptyPattern,
}

/// One transmitted symbol, spanning an early and a late slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    /// Pulse in the early slot only.
    Zero,
    /// Pulse in the late slot only.
    One,
    /// Pulses in both slots; used to monitor coherence, carries no bit.
    Decoy,
}

impl Symbol {
    /// Occupancy of the (early, late) slot pair.
    pub fn occupancy(self) -> (bool, bool) {
        match self {
            Symbol::Zero => (true, false),
            Symbol::One => (false, true),
            Symbol::Decoy => (true, true),
        }
    }

    /// Whether the symbol encodes a key bit.
    pub fn is_data(self) -> bool {
        !matches!(self, Symbol::Decoy)
    }
}

/// A fixed, repeating sequence of symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolPattern {
    symbols: Vec<Symbol>,
}

impl SymbolPattern {
    pub fn new(symbols: Vec<Symbol>) -> Result<Self, SimError> {
        if symbols.is_empty() {
            return Err(SimError::EmptyPattern);
        }
        Ok(SymbolPattern { symbols })
    }

    /// The standard 96-symbol pattern: 43 zeros, 43 ones and 10 decoys,
    /// arranged by a deterministic shuffle of the given seed. The same seed
    /// always yields the same pattern.
    pub fn standard(seed: u64) -> SymbolPattern {
        let mut symbols = Vec::with_capacity(STANDARD_PATTERN_LEN);
        symbols.extend(std::iter::repeat_n(Symbol::Zero, STANDARD_ZEROS));
        symbols.extend(std::iter::repeat_n(Symbol::One, STANDARD_ONES));
        symbols.extend(std::iter::repeat_n(Symbol::Decoy, STANDARD_DECOYS));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        symbols.shuffle(&mut rng);
        SymbolPattern { symbols }
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of time slots per pattern repetition (two per symbol).
    pub fn n_slots(&self) -> usize {
        2 * self.symbols.len()
    }

    /// Per-slot pulse occupancy over one repetition.
    pub fn occupancy(&self) -> Vec<bool> {
        let mut occ = Vec::with_capacity(self.n_slots());
        for symbol in &self.symbols {
            let (early, late) = symbol.occupancy();
            occ.push(early);
            occ.push(late);
        }
        occ
    }

    /// Counts of (zeros, ones, decoys).
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for symbol in &self.symbols {
            match symbol {
                Symbol::Zero => counts.0 += 1,
                Symbol::One => counts.1 += 1,
                Symbol::Decoy => counts.2 += 1,
            }
        }
        counts
    }
}

/// Phase-arm classification of a slot after the delay-line interferometer.
///
/// The interferometer overlaps each pulse with its predecessor one slot
/// earlier. A slot whose own and preceding slots are both occupied sees
/// interference; a slot adjacent to exactly one pulse sees half the light of
/// a single pulse; an isolated empty slot sees none.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotClass {
    Empty,
    Side,
    Interfere,
}

/// Classify each slot of a circular occupancy sequence. The pattern repeats,
/// so the predecessor of slot 0 is the last slot.
pub fn expected_interference(occupancy: &[bool]) -> Vec<SlotClass> {
    let n = occupancy.len();
    (0..n)
        .map(|i| {
            let prev = occupancy[(i + n - 1) % n];
            let here = occupancy[i];
            match (prev, here) {
                (true, true) => SlotClass::Interfere,
                (false, false) => SlotClass::Empty,
                _ => SlotClass::Side,
            }
        })
        .collect()
}

/// Detector and source parameters for one wavelength channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub wavelength_nm: f64,
    /// Mean photon number per data pulse at the transmitter output.
    pub mu: f64,
    /// Detection efficiency of the timing-arm detector.
    pub eta_time: f64,
    /// Detection efficiency of the phase-arm detector.
    pub eta_phase: f64,
    /// Dark count rate of the timing-arm detector, in Hz.
    pub dcr_time_hz: f64,
    /// Dark count rate of the phase-arm detector, in Hz.
    pub dcr_phase_hz: f64,
    /// RMS timing jitter added to each detection, in ps.
    pub jitter_sigma_ps: f64,
    /// Detector dead time after each registered click, in ps.
    pub dead_time_ps: u64,
    /// Probability of a spurious click in the unoccupied slot of a data
    /// symbol, modelling source extinction and detector afterpulsing.
    pub error_floor: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            wavelength_nm: 1550.0,
            mu: 0.1,
            eta_time: 0.4,
            eta_phase: 0.4,
            dcr_time_hz: 150.0,
            dcr_phase_hz: 150.0,
            jitter_sigma_ps: 30.0,
            dead_time_ps: 50_000,
            error_floor: 0.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), SimError> {
        check_range("wavelength_nm", self.wavelength_nm, 0.0, f64::INFINITY, false)?;
        check_range("mu", self.mu, 0.0, 0.2, true)?;
        check_range("eta_time", self.eta_time, 0.0, 1.0, true)?;
        check_range("eta_phase", self.eta_phase, 0.0, 1.0, true)?;
        check_range("dcr_time_hz", self.dcr_time_hz, 0.0, f64::INFINITY, true)?;
        check_range("dcr_phase_hz", self.dcr_phase_hz, 0.0, f64::INFINITY, true)?;
        check_range("jitter_sigma_ps", self.jitter_sigma_ps, 0.0, f64::INFINITY, true)?;
        check_range("error_floor", self.error_floor, 0.0, 1.0, true)?;
        Ok(())
    }
}

/// Shared optical-path parameters of the link and receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkParams {
    /// Channel attenuation between transmitter and receiver, in dB.
    pub attenuation_db: f64,
    /// Fraction of received light routed to the timing arm.
    pub split_time: f64,
    /// Fraction of received light routed to the phase arm.
    pub split_phase: f64,
    /// Interference visibility of the delay-line interferometer.
    pub dli_visibility: f64,
    /// Whether the monitored interferometer output is the bright port
    /// (constructive for a coherent train) or the dark port.
    pub bright_port: bool,
    /// Slot duration in ps.
    pub slot_ps: u64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            attenuation_db: 0.0,
            split_time: 0.9,
            split_phase: 0.1,
            dli_visibility: 0.95,
            bright_port: false,
            slot_ps: 400,
        }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<(), SimError> {
        check_range("attenuation_db", self.attenuation_db, 0.0, f64::INFINITY, true)?;
        check_range("split_time", self.split_time, 0.0, 1.0, true)?;
        check_range("split_phase", self.split_phase, 0.0, 1.0, true)?;
        if self.split_time + self.split_phase > 1.0 + 1e-9 {
            return Err(SimError::InvalidParam {
                name: "split_time + split_phase",
                value: self.split_time + self.split_phase,
                constraint: "sum <= 1",
            });
        }
        check_range("dli_visibility", self.dli_visibility, 0.0, 1.0, true)?;
        if self.slot_ps < 2 {
            return Err(SimError::InvalidParam {
                name: "slot_ps",
                value: self.slot_ps as f64,
                constraint: ">= 2 ps",
            });
        }
        Ok(())
    }

    /// Linear transmission of the fibre link.
    pub fn transmission(&self) -> f64 {
        10f64.powf(-self.attenuation_db / 10.0)
    }

    /// Duration of one pattern repetition in ps.
    pub fn period_ps(&self, pattern: &SymbolPattern) -> u64 {
        self.slot_ps * pattern.n_slots() as u64
    }
}

fn check_range(
    name: &'static str,
    value: f64,
    min: f64,
    max: f64,
    min_inclusive: bool,
) -> Result<(), SimError> {
    let ok = value.is_finite()
        && value <= max
        && if min_inclusive { value >= min } else { value > min };
    if ok {
        Ok(())
    } else {
        Err(SimError::InvalidParam {
            name,
            value,
            constraint: if max.is_infinite() {
                if min_inclusive {
                    "finite and >= 0"
                } else {
                    "finite and > 0"
                }
            } else {
                "within allowed range"
            },
        })
    }
}
