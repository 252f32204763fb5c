//! Run configuration: a line-based `key = value` format with sections.
//! Unknown sections and keys are rejected with their line number, so typos
//! fail loudly instead of silently running with defaults.
//!
//! ```text
//! [pattern]
//! seed = 1            # or: symbols = ZODZO...
//!
//! [link]
//! attenuation_db = 10
//!
//! [sim]
//! channels = 4
//! duration_s = 2
//! sync_divider = 16
//!
//! [channel]           # defaults for every channel
//! mu = 0.1
//!
//! [channel.2]         # overrides for one channel
//! eta_time = 0.35
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::cowsim::{ChannelParams, LinkParams, SimError, Symbol, SymbolPattern};
use crate::keyeval::{ChannelMeta, EvalConfig, GateConfig};
use crate::ttrecords::{Mode, RecordError, ResolutionCode};

/// Wavelength channels the receiver crate is wired for.
pub const MAX_CHANNELS: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key '{key}' in section [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: invalid value for '{key}': {message}")]
    Value {
        line: usize,
        key: String,
        message: String,
    },
    #[error(transparent)]
    Param(#[from] SimError),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Transmission pattern: either a seed for the standard composition or an
/// explicit symbol string.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternConfig {
    pub seed: u64,
    pub symbols: Option<Vec<Symbol>>,
}

impl Default for PatternConfig {
    fn default() -> Self {
        PatternConfig {
            seed: 1,
            symbols: None,
        }
    }
}

/// Run-level settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: Option<u64>,
    pub duration_s: f64,
    pub channels: usize,
    pub sync_divider: u32,
    pub mode: Mode,
    pub resolution: ResolutionCode,
    pub wavelength_base_nm: f64,
    pub wavelength_step_nm: f64,
    /// Records per second the readout link carries away from the main FIFO.
    pub transfer_rate_hz: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: None,
            duration_s: 1.0,
            channels: 1,
            sync_divider: 1,
            mode: Mode::T3,
            resolution: ResolutionCode::new(3).expect("valid code"),
            wavelength_base_nm: 1550.0,
            wavelength_step_nm: 0.8,
            transfer_rate_hz: 80_000_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ChannelOverride {
    wavelength_nm: Option<f64>,
    mu: Option<f64>,
    eta_time: Option<f64>,
    eta_phase: Option<f64>,
    dcr_time_hz: Option<f64>,
    dcr_phase_hz: Option<f64>,
    jitter_sigma_ps: Option<f64>,
    dead_time_ps: Option<u64>,
    error_floor: Option<f64>,
}

impl ChannelOverride {
    fn apply(&self, params: &mut ChannelParams) {
        if let Some(v) = self.wavelength_nm {
            params.wavelength_nm = v;
        }
        if let Some(v) = self.mu {
            params.mu = v;
        }
        if let Some(v) = self.eta_time {
            params.eta_time = v;
        }
        if let Some(v) = self.eta_phase {
            params.eta_phase = v;
        }
        if let Some(v) = self.dcr_time_hz {
            params.dcr_time_hz = v;
        }
        if let Some(v) = self.dcr_phase_hz {
            params.dcr_phase_hz = v;
        }
        if let Some(v) = self.jitter_sigma_ps {
            params.jitter_sigma_ps = v;
        }
        if let Some(v) = self.dead_time_ps {
            params.dead_time_ps = v;
        }
        if let Some(v) = self.error_floor {
            params.error_floor = v;
        }
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "wavelength_nm" => self.wavelength_nm = Some(parse_num(line, key, value)?),
            "mu" => self.mu = Some(parse_num(line, key, value)?),
            "eta_time" => self.eta_time = Some(parse_num(line, key, value)?),
            "eta_phase" => self.eta_phase = Some(parse_num(line, key, value)?),
            "dcr_time_hz" => self.dcr_time_hz = Some(parse_num(line, key, value)?),
            "dcr_phase_hz" => self.dcr_phase_hz = Some(parse_num(line, key, value)?),
            "jitter_sigma_ps" => self.jitter_sigma_ps = Some(parse_num(line, key, value)?),
            "dead_time_ps" => self.dead_time_ps = Some(parse_num(line, key, value)?),
            "error_floor" => self.error_floor = Some(parse_num(line, key, value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Fully parsed and validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pattern: PatternConfig,
    pub link: LinkParams,
    pub sim: SimConfig,
    pub guard_ps: u64,
    channel_default: ChannelOverride,
    channel_overrides: BTreeMap<usize, ChannelOverride>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pattern: PatternConfig::default(),
            link: LinkParams::default(),
            sim: SimConfig::default(),
            guard_ps: 40,
            channel_default: ChannelOverride::default(),
            channel_overrides: BTreeMap::new(),
        }
    }
}

enum Section {
    Preamble,
    Pattern,
    Link,
    Sim,
    Eval,
    ChannelDefault,
    Channel(usize),
}

impl Section {
    fn name(&self) -> String {
        match self {
            Section::Preamble => "".into(),
            Section::Pattern => "pattern".into(),
            Section::Link => "link".into(),
            Section::Sim => "sim".into(),
            Section::Eval => "eval".into(),
            Section::ChannelDefault => "channel".into(),
            Section::Channel(i) => format!("channel.{i}"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut config = RunConfig::default();
        let mut section = Section::Preamble;

        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    message: "unterminated section header".into(),
                })?;
                section = match name {
                    "pattern" => Section::Pattern,
                    "link" => Section::Link,
                    "sim" => Section::Sim,
                    "eval" => Section::Eval,
                    "channel" => Section::ChannelDefault,
                    other => match other.strip_prefix("channel.") {
                        Some(idx) => Section::Channel(idx.parse().map_err(|_| {
                            ConfigError::UnknownSection {
                                line,
                                name: other.into(),
                            }
                        })?),
                        None => {
                            return Err(ConfigError::UnknownSection {
                                line,
                                name: other.into(),
                            })
                        }
                    },
                };
                continue;
            }

            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: "expected 'key = value'".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            config.assign(&section, line, key, value)?;
        }

        config.validate()?;
        Ok(config)
    }

    fn assign(
        &mut self,
        section: &Section,
        line: usize,
        key: &str,
        value: &str,
    ) -> Result<(), ConfigError> {
        let unknown = || {
            Err(ConfigError::UnknownKey {
                line,
                section: section.name(),
                key: key.into(),
            })
        };
        match section {
            Section::Preamble => Err(ConfigError::Syntax {
                line,
                message: "key outside any section".into(),
            }),
            Section::Pattern => match key {
                "seed" => {
                    self.pattern.seed = parse_num(line, key, value)?;
                    Ok(())
                }
                "symbols" => {
                    self.pattern.symbols = Some(parse_symbols(line, value)?);
                    Ok(())
                }
                _ => unknown(),
            },
            Section::Link => match key {
                "attenuation_db" => {
                    self.link.attenuation_db = parse_num(line, key, value)?;
                    Ok(())
                }
                "split_time" => {
                    self.link.split_time = parse_num(line, key, value)?;
                    Ok(())
                }
                "split_phase" => {
                    self.link.split_phase = parse_num(line, key, value)?;
                    Ok(())
                }
                "dli_visibility" => {
                    self.link.dli_visibility = parse_num(line, key, value)?;
                    Ok(())
                }
                "bright_port" => {
                    self.link.bright_port = parse_bool(line, key, value)?;
                    Ok(())
                }
                "slot_ps" => {
                    self.link.slot_ps = parse_num(line, key, value)?;
                    Ok(())
                }
                _ => unknown(),
            },
            Section::Sim => match key {
                "seed" => {
                    self.sim.seed = Some(parse_num(line, key, value)?);
                    Ok(())
                }
                "duration_s" => {
                    self.sim.duration_s = parse_num(line, key, value)?;
                    Ok(())
                }
                "channels" => {
                    self.sim.channels = parse_num(line, key, value)?;
                    Ok(())
                }
                "sync_divider" => {
                    self.sim.sync_divider = parse_num(line, key, value)?;
                    Ok(())
                }
                "mode" => {
                    self.sim.mode = match value {
                        "t2" | "T2" => Mode::T2,
                        "t3" | "T3" => Mode::T3,
                        other => {
                            return Err(ConfigError::Value {
                                line,
                                key: key.into(),
                                message: format!("expected t2 or t3, got '{other}'"),
                            })
                        }
                    };
                    Ok(())
                }
                "resolution_code" => {
                    let code: u8 = parse_num(line, key, value)?;
                    self.sim.resolution = ResolutionCode::new(code)?;
                    Ok(())
                }
                "wavelength_base_nm" => {
                    self.sim.wavelength_base_nm = parse_num(line, key, value)?;
                    Ok(())
                }
                "wavelength_step_nm" => {
                    self.sim.wavelength_step_nm = parse_num(line, key, value)?;
                    Ok(())
                }
                "transfer_rate_hz" => {
                    self.sim.transfer_rate_hz = parse_num(line, key, value)?;
                    Ok(())
                }
                _ => unknown(),
            },
            Section::Eval => match key {
                "guard_ps" => {
                    self.guard_ps = parse_num(line, key, value)?;
                    Ok(())
                }
                _ => unknown(),
            },
            Section::ChannelDefault => {
                if self.channel_default.set(line, key, value)? {
                    Ok(())
                } else {
                    unknown()
                }
            }
            Section::Channel(index) => {
                let entry = self.channel_overrides.entry(*index).or_default();
                if entry.set(line, key, value)? {
                    Ok(())
                } else {
                    unknown()
                }
            }
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.sim.channels == 0 || self.sim.channels > MAX_CHANNELS {
            return Err(SimError::InvalidParam {
                name: "channels",
                value: self.sim.channels as f64,
                constraint: "between 1 and 32",
            }
            .into());
        }
        if !self.sim.duration_s.is_finite() || self.sim.duration_s <= 0.0 {
            return Err(SimError::InvalidParam {
                name: "duration_s",
                value: self.sim.duration_s,
                constraint: "finite and > 0",
            }
            .into());
        }
        if !self.sim.sync_divider.is_power_of_two() || self.sim.sync_divider > 16 {
            return Err(RecordError::InvalidDivider(self.sim.sync_divider).into());
        }
        if self.sim.transfer_rate_hz == 0 {
            return Err(SimError::InvalidParam {
                name: "transfer_rate_hz",
                value: 0.0,
                constraint: "finite and > 0",
            }
            .into());
        }
        if let Some(max) = self.channel_overrides.keys().next_back() {
            if *max >= self.sim.channels {
                return Err(SimError::InvalidParam {
                    name: "channel override index",
                    value: *max as f64,
                    constraint: "below the channel count",
                }
                .into());
            }
        }
        self.link.validate()?;
        self.gate().validate().map_err(|_| SimError::InvalidParam {
            name: "guard_ps",
            value: self.guard_ps as f64,
            constraint: "below half a slot",
        })?;
        for index in 0..self.sim.channels {
            self.channel_params(index).validate()?;
        }
        Ok(())
    }

    /// Resolved detector parameters for one channel: defaults, then the
    /// `[channel]` section, then the `[channel.N]` section.
    pub fn channel_params(&self, index: usize) -> ChannelParams {
        let mut params = ChannelParams {
            wavelength_nm: self.sim.wavelength_base_nm
                + self.sim.wavelength_step_nm * index as f64,
            ..ChannelParams::default()
        };
        self.channel_default.apply(&mut params);
        if let Some(over) = self.channel_overrides.get(&index) {
            over.apply(&mut params);
        }
        params
    }

    pub fn build_pattern(&self) -> SymbolPattern {
        match &self.pattern.symbols {
            Some(symbols) => SymbolPattern::new(symbols.clone()).expect("validated nonempty"),
            None => SymbolPattern::standard(self.pattern.seed),
        }
    }

    pub fn gate(&self) -> GateConfig {
        GateConfig {
            slot_ps: self.link.slot_ps,
            guard_ps: self.guard_ps,
        }
    }

    /// Whole completed seconds in the configured duration; evaluation
    /// reports exactly this many intervals.
    pub fn intervals(&self) -> u64 {
        self.sim.duration_s.floor() as u64
    }

    pub fn duration_ps(&self) -> u64 {
        (self.sim.duration_s * 1e12).round() as u64
    }

    pub fn eval_config(&self, pattern: &SymbolPattern) -> EvalConfig {
        EvalConfig {
            gate: self.gate(),
            resolution: self.sim.resolution,
            sync_period_ps: self.link.period_ps(pattern),
            sync_divider: self.sim.sync_divider,
            intervals: self.intervals(),
            channels: (0..self.sim.channels)
                .map(|i| {
                    let params = self.channel_params(i);
                    ChannelMeta {
                        wavelength_nm: params.wavelength_nm,
                        mu: params.mu,
                    }
                })
                .collect(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        line,
        key: key.into(),
        message: e.to_string(),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ConfigError::Value {
            line,
            key: key.into(),
            message: format!("expected true or false, got '{other}'"),
        }),
    }
}

fn parse_symbols(line: usize, value: &str) -> Result<Vec<Symbol>, ConfigError> {
    if value.is_empty() {
        return Err(ConfigError::Value {
            line,
            key: "symbols".into(),
            message: "pattern must not be empty".into(),
        });
    }
    value
        .chars()
        .map(|c| match c {
            'Z' => Ok(Symbol::Zero),
            'O' => Ok(Symbol::One),
            'D' => Ok(Symbol::Decoy),
            other => Err(ConfigError::Value {
                line,
                key: "symbols".into(),
                message: format!("expected Z, O or D, got '{other}'"),
            }),
        })
        .collect()
}
