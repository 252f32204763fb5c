//! End-to-end runs: per-channel click generation, the capture chain (burst
//! FIFOs, time-ordered merge, main FIFO, record encoding), file output and
//! streaming evaluation, processed in fixed-size time chunks so memory use
//! stays bounded for long runs.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::analysis::{
    analyze_dnl, analyze_jitter, nearest_differences, AnalysisHistogram, DnlStats, JitterStats,
};
use crate::config::RunConfig;
use crate::cowsim::{ChannelSim, SimError};
use crate::keyeval::{EvalError, IntervalPipeline, Metrics, CSV_HEADER};
use crate::streams::{
    merge_sorted, DrainOutcome, FrontFifo, MainFifo, StreamError, FRONT_FIFO_DEPTH,
    MAIN_FIFO_DEPTH,
};
use crate::ttrecords::{
    decode, expand_t2, FileError, FileHeader, Mode, RecordError, RecordFileReader,
    RecordFileWriter, ResolutionCode, T2Compressor, T2Event, T3Converter, TtRecord, T3_SYNC_WRAP,
};

/// Simulation advances in chunks of this many picoseconds.
const CHUNK_PS: u64 = 100_000_000_000;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("file {field} ({file}) does not match the configuration ({config})")]
    HeaderMismatch {
        field: &'static str,
        file: u64,
        config: u64,
    },
    #[error("attenuations must be finite, nonnegative and ascending")]
    SweepOrder,
}

/// Everything a run produces besides the record file itself.
#[derive(Debug)]
pub struct RunOutput {
    pub rows: Vec<Metrics>,
    /// Events that reached the merger (detections and syncs).
    pub merged_events: u64,
    /// Record words emitted downstream of the main FIFO.
    pub words: u64,
    /// Records dropped by full per-channel burst FIFOs.
    pub front_dropped: u64,
    /// Detections the sync-referenced conversion could not place.
    pub conversion_dropped: u64,
    /// Set when the main FIFO overflowed; capture stops at that record.
    pub aborted_at: Option<u64>,
    pub wall: Duration,
}

impl RunOutput {
    pub fn events_per_second(&self) -> f64 {
        self.merged_events as f64 / self.wall.as_secs_f64().max(1e-9)
    }
}

/// Run a simulation with the default main FIFO depth.
pub fn run_simulation(
    config: &RunConfig,
    seed: u64,
    tag_path: Option<&Path>,
) -> Result<RunOutput, RunError> {
    run_capped(config, seed, tag_path, MAIN_FIFO_DEPTH)
}

/// Run with an explicit main FIFO depth, for exercising the overflow abort.
pub fn run_capped(
    config: &RunConfig,
    seed: u64,
    tag_path: Option<&Path>,
    main_fifo_depth: u64,
) -> Result<RunOutput, RunError> {
    let started = Instant::now();
    let pattern = config.build_pattern();
    let link = config.link.clone();
    let channels = config.sim.channels;
    let period_ps = link.period_ps(&pattern);
    let divider = config.sim.sync_divider;
    // The divider acts at the source: only every n-th sync edge reaches the
    // tagger, so generated sync events are already divided.
    let effective_period_ps = period_ps * u64::from(divider);
    let duration_ps = config.duration_ps();
    let mode = config.sim.mode;

    let mut sims = (0..channels)
        .map(|i| {
            ChannelSim::new(
                i as u32,
                &pattern,
                &config.channel_params(i),
                &link,
                seed,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let header = FileHeader {
        mode,
        resolution: match mode {
            Mode::T2 => ResolutionCode::new(0)?,
            Mode::T3 => config.sim.resolution,
        },
        channel_count: (2 * channels) as u32,
        sync_divider: divider,
        sync_period_ps: period_ps,
    };
    let mut writer = tag_path
        .map(|path| RecordFileWriter::create(path, &header))
        .transpose()?;

    let mut pipeline = IntervalPipeline::new(&config.eval_config(&pattern), &pattern)?;
    let mut compressor = T2Compressor::new();
    // Syncs are pre-divided, so the converter sees every one of them.
    let mut converter = T3Converter::new(config.sim.resolution, 1)?;
    let mut main_fifo = MainFifo::new(main_fifo_depth)?;
    let mut fifos = (0..=2 * channels)
        .map(|_| FrontFifo::new(FRONT_FIFO_DEPTH))
        .collect::<Result<Vec<_>, _>>()?;

    let mut sync_index = 0u64;
    let mut merged_events = 0u64;
    let mut words_total = 0u64;
    let mut aborted_at = None;
    let mut words = Vec::new();
    let mut t0 = 0u64;

    while t0 < duration_ps && aborted_at.is_none() {
        let t1 = t0.saturating_add(CHUNK_PS).min(duration_ps);
        let chunks: Vec<_> = sims.par_iter_mut().map(|sim| sim.next_chunk(t1)).collect();

        let mut inputs = Vec::with_capacity(2 * channels + 1);
        let mut syncs = Vec::new();
        while sync_index * effective_period_ps < t1 {
            syncs.push(T2Event::sync(sync_index * effective_period_ps));
            sync_index += 1;
        }
        inputs.push(through_fifo(syncs, &mut fifos[0], effective_period_ps));
        for (i, chunk) in chunks.into_iter().enumerate() {
            let time_ch = (2 * i) as u8;
            let time_events = chunk
                .time_clicks
                .iter()
                .map(|&t| T2Event::detection(t, time_ch))
                .collect();
            let phase_events = chunk
                .phase_clicks
                .iter()
                .map(|&t| T2Event::detection(t, time_ch + 1))
                .collect();
            inputs.push(through_fifo(time_events, &mut fifos[1 + 2 * i], period_ps));
            inputs.push(through_fifo(phase_events, &mut fifos[2 + 2 * i], period_ps));
        }

        let merged = merge_sorted(inputs)?;
        merged_events += merged.len() as u64;

        words.clear();
        match mode {
            Mode::T3 => {
                for event in &merged {
                    converter.push(event, &mut words)?;
                }
            }
            Mode::T2 => {
                for event in &merged {
                    compressor.push(event, &mut words)?;
                }
            }
        }

        let drain = (u128::from(config.sim.transfer_rate_hz) * u128::from(t1 - t0)
            / 1_000_000_000_000) as u64;
        let prior = main_fifo.accepted();
        if let DrainOutcome::Aborted { at_record } = main_fifo.offer(words.len() as u64, drain)
        {
            words.truncate((at_record - 1 - prior) as usize);
            aborted_at = Some(at_record);
        }

        if let Some(w) = writer.as_mut() {
            w.write_all(&words)?;
        }
        words_total += words.len() as u64;

        match mode {
            Mode::T3 => pipeline.push_words(words.iter().copied())?,
            Mode::T2 => {
                // The captured words carry 5 ps absolute tags; evaluation
                // still needs sync-referenced detections, so an aborted
                // chunk is left out of the metrics just as it is missing
                // from the capture.
                if aborted_at.is_none() {
                    let mut t3_words = Vec::new();
                    for event in &merged {
                        converter.push(event, &mut t3_words)?;
                    }
                    pipeline.push_words(t3_words.iter().copied())?;
                }
            }
        }

        t0 = t1;
    }

    if let Some(w) = writer {
        w.finish()?;
    }

    Ok(RunOutput {
        rows: pipeline.finish(),
        merged_events,
        words: words_total,
        front_dropped: fifos.iter().map(FrontFifo::dropped_count).sum(),
        conversion_dropped: converter.stats().dropped,
        aborted_at,
        wall: started.elapsed(),
    })
}

/// Pass one chunk of a sorted event stream through its burst FIFO in
/// per-sync-period batches: each batch is pushed while the previous one has
/// already been consumed, so only a burst larger than the FIFO itself drops
/// records.
fn through_fifo(
    events: Vec<T2Event>,
    fifo: &mut FrontFifo<T2Event>,
    batch_period_ps: u64,
) -> Vec<T2Event> {
    let mut staged = Vec::with_capacity(events.len());
    let mut current_batch = None;
    for event in events {
        let batch = Some(event.time_ps / batch_period_ps);
        if batch != current_batch {
            fifo.drain_into(&mut staged);
            current_batch = batch;
        }
        fifo.push(event);
    }
    fifo.drain_into(&mut staged);
    staged
}

pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[Metrics]) -> Result<(), RunError> {
    Ok(std::fs::write(path, metrics_csv(rows))?)
}

/// Replay a record file through the interval evaluator. Framing comes from
/// the file header; pattern, detector physics and reporting duration come
/// from the configuration, which must describe the same link.
pub fn evaluate_file(path: &Path, config: &RunConfig) -> Result<Vec<Metrics>, RunError> {
    let reader = RecordFileReader::open(path)?;
    let header = *reader.header();
    let pattern = config.build_pattern();
    let config_period = config.link.period_ps(&pattern);
    if header.sync_period_ps != config_period {
        return Err(RunError::HeaderMismatch {
            field: "sync period",
            file: header.sync_period_ps,
            config: config_period,
        });
    }
    let expected_inputs = 2 * config.sim.channels as u64;
    if u64::from(header.channel_count) > expected_inputs {
        return Err(RunError::HeaderMismatch {
            field: "channel count",
            file: u64::from(header.channel_count),
            config: expected_inputs,
        });
    }

    let mut eval = config.eval_config(&pattern);
    eval.sync_divider = header.sync_divider;
    match header.mode {
        Mode::T3 => {
            eval.resolution = header.resolution;
            let mut pipeline = IntervalPipeline::new(&eval, &pattern)?;
            for word in reader {
                pipeline.push_word(word?)?;
            }
            Ok(pipeline.finish())
        }
        Mode::T2 => {
            eval.resolution = config.sim.resolution;
            let mut pipeline = IntervalPipeline::new(&eval, &pattern)?;
            let words = reader.collect::<Result<Vec<_>, _>>()?;
            let events = expand_t2(words)?;
            let mut converter = T3Converter::new(config.sim.resolution, 1)?;
            let mut t3_words = Vec::new();
            for event in &events {
                converter.push(event, &mut t3_words)?;
            }
            pipeline.push_words(t3_words)?;
            Ok(pipeline.finish())
        }
    }
}

/// One aggregated sweep result; `channel: None` is the sum over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub attenuation_db: f64,
    pub channel: Option<u32>,
    pub wavelength_nm: Option<f64>,
    pub sifted_bps: f64,
    pub qber: Option<f64>,
    pub visibility: Option<f64>,
    pub secret_bps: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "attenuation_db,channel,wavelength_nm,sifted_bps,qber,visibility,secret_bps";

/// Repeat the configured run at each attenuation and reduce every point to
/// per-channel interval means plus a total row. All points reuse the same
/// seed, so they share their random substreams and ratios between points
/// fluctuate less than the points themselves.
pub fn run_sweep(
    config: &RunConfig,
    seed: u64,
    attenuations: &[f64],
) -> Result<Vec<SweepRow>, RunError> {
    let ordered = attenuations.windows(2).all(|w| w[0] <= w[1]);
    let in_range = attenuations.iter().all(|a| a.is_finite() && *a >= 0.0);
    if !ordered || !in_range {
        return Err(RunError::SweepOrder);
    }
    let mut rows = Vec::new();
    for &attenuation_db in attenuations {
        let mut point = config.clone();
        point.link.attenuation_db = attenuation_db;
        let output = run_simulation(&point, seed, None)?;

        let mut total_sifted = 0.0;
        let mut total_secret = 0.0;
        let mut total_qber_weight = 0.0;
        let mut total_qber_sum = 0.0;
        let mut total_vis_weight = 0.0;
        let mut total_vis_sum = 0.0;
        for channel in 0..point.sim.channels as u32 {
            let per_channel: Vec<&Metrics> = output
                .rows
                .iter()
                .filter(|r| r.channel == channel)
                .collect();
            let intervals = per_channel.len().max(1) as f64;
            let sifted = per_channel.iter().map(|r| r.sifted_bps).sum::<f64>() / intervals;
            let secret = per_channel.iter().map(|r| r.secret_bps).sum::<f64>() / intervals;
            let (q_sum, q_weight) = weighted(&per_channel, |r| r.qber);
            let (v_sum, v_weight) = weighted(&per_channel, |r| r.visibility);
            rows.push(SweepRow {
                attenuation_db,
                channel: Some(channel),
                wavelength_nm: per_channel.first().map(|r| r.wavelength_nm),
                sifted_bps: sifted,
                qber: ratio(q_sum, q_weight),
                visibility: ratio(v_sum, v_weight),
                secret_bps: secret,
            });
            total_sifted += sifted;
            total_secret += secret;
            total_qber_sum += q_sum;
            total_qber_weight += q_weight;
            total_vis_sum += v_sum;
            total_vis_weight += v_weight;
        }
        rows.push(SweepRow {
            attenuation_db,
            channel: None,
            wavelength_nm: None,
            sifted_bps: total_sifted,
            qber: ratio(total_qber_sum, total_qber_weight),
            visibility: ratio(total_vis_sum, total_vis_weight),
            secret_bps: total_secret,
        });
    }
    Ok(rows)
}

fn weighted(rows: &[&Metrics], field: impl Fn(&Metrics) -> Option<f64>) -> (f64, f64) {
    let mut sum = 0.0;
    let mut weight = 0.0;
    for row in rows {
        if let Some(value) = field(row) {
            sum += value * row.sifted_bps;
            weight += row.sifted_bps;
        }
    }
    (sum, weight)
}

fn ratio(sum: f64, weight: f64) -> Option<f64> {
    (weight > 0.0).then(|| sum / weight)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let channel = row
            .channel
            .map(|c| c.to_string())
            .unwrap_or_else(|| "total".into());
        let wavelength = row.wavelength_nm.map(|w| w.to_string()).unwrap_or_default();
        let qber = row.qber.map(|q| q.to_string()).unwrap_or_default();
        let visibility = row.visibility.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.attenuation_db,
            channel,
            wavelength,
            row.sifted_bps,
            qber,
            visibility,
            row.secret_bps
        ));
    }
    out
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), RunError> {
    Ok(std::fs::write(path, sweep_csv(rows))?)
}

/// Absolute detection times of the requested channels, one sorted series
/// per entry of `wanted`, skipping every other record kind.
fn channel_times(path: &Path, wanted: &[u8]) -> Result<(FileHeader, Vec<Vec<u64>>), RunError> {
    let reader = RecordFileReader::open(path)?;
    let header = *reader.header();
    let mut series = vec![Vec::new(); wanted.len()];
    let mut blocks = 0u64;
    let effective_period_ps = header.sync_period_ps * u64::from(header.sync_divider);
    let resolution_ps = header.resolution.resolution_ps();
    for word in reader {
        let (channel, t) = match decode(word?, header.mode)? {
            TtRecord::Detection2 { channel, timetag } => {
                (channel, (blocks * (1 << 25) + u64::from(timetag)) * 5)
            }
            TtRecord::Detection3 {
                channel,
                nsync,
                dtime,
            } => {
                let sync = blocks * T3_SYNC_WRAP + u64::from(nsync);
                (
                    channel,
                    sync * effective_period_ps + u64::from(dtime) * resolution_ps,
                )
            }
            TtRecord::Overflow2 { count } => {
                blocks += u64::from(count);
                continue;
            }
            TtRecord::Overflow3 { count } => {
                blocks += u64::from(count);
                continue;
            }
            TtRecord::Sync2 { .. } | TtRecord::Marker2 { .. } | TtRecord::Marker3 { .. } => {
                continue
            }
        };
        for (slot, &want) in wanted.iter().enumerate() {
            if want == channel {
                series[slot].push(t);
            }
        }
    }
    Ok((header, series))
}

/// Histogram the delay from each detection on one channel to the nearest
/// detection on the other, keeping matches within one sync period, and
/// report the shape of the delay distribution.
pub fn jitter_from_file(
    path: &Path,
    channel_a: u8,
    channel_b: u8,
    bin_ps: u64,
) -> Result<Option<JitterStats>, RunError> {
    let (header, series) = channel_times(path, &[channel_a, channel_b])?;
    let window_ps = header.sync_period_ps * u64::from(header.sync_divider);
    let diffs = nearest_differences(&series[0], &series[1], window_ps);
    Ok(analyze_jitter(&AnalysisHistogram::from_values(diffs, bin_ps)))
}

/// Fold one channel's detections into a repeating bin window and report
/// the bin-to-bin count uniformity.
pub fn dnl_from_file(
    path: &Path,
    channel: u8,
    bin_ps: u64,
    bins: usize,
) -> Result<Option<DnlStats>, RunError> {
    let (_, series) = channel_times(path, &[channel])?;
    Ok(analyze_dnl(&AnalysisHistogram::folded(&series[0], bin_ps, bins)))
}

/// Print a human-readable listing of a record file. Returns the number of
/// records listed.
pub fn decode_listing(
    path: &Path,
    out: &mut dyn Write,
    limit: Option<u64>,
) -> Result<u64, RunError> {
    let reader = RecordFileReader::open(path)?;
    let header = *reader.header();
    writeln!(
        out,
        "# mode={} resolution_ps={} channels={} sync_divider={} sync_period_ps={}",
        header.mode,
        header.resolution.resolution_ps(),
        header.channel_count,
        header.sync_divider,
        header.sync_period_ps
    )?;
    let effective_period_ps = header.sync_period_ps * u64::from(header.sync_divider);
    let resolution_ps = header.resolution.resolution_ps();
    let mut blocks = 0u64;
    let mut listed = 0u64;
    for (index, word) in reader.enumerate() {
        if let Some(limit) = limit {
            if listed >= limit {
                break;
            }
        }
        let word = word?;
        let record = match decode(word, header.mode) {
            Ok(record) => record,
            Err(_) => {
                let offset = crate::ttrecords::HEADER_LEN + 4 * index;
                writeln!(out, "{index} invalid word 0x{word:08x} at byte {offset}")?;
                listed += 1;
                continue;
            }
        };
        match record {
            TtRecord::Detection2 { channel, timetag } => {
                let t = (blocks * (1 << 25) + u64::from(timetag)) * 5;
                writeln!(out, "{index} detection ch={channel} t={t}ps")?;
            }
            TtRecord::Sync2 { timetag } => {
                let t = (blocks * (1 << 25) + u64::from(timetag)) * 5;
                writeln!(out, "{index} sync t={t}ps")?;
            }
            TtRecord::Marker2 { id, timetag } => {
                let t = (blocks * (1 << 25) + u64::from(timetag)) * 5;
                writeln!(out, "{index} marker id={id} t={t}ps")?;
            }
            TtRecord::Overflow2 { count } => {
                blocks += u64::from(count);
                writeln!(out, "{index} overflow +{count}")?;
            }
            TtRecord::Detection3 {
                channel,
                nsync,
                dtime,
            } => {
                let sync = blocks * T3_SYNC_WRAP + u64::from(nsync);
                let t = sync * effective_period_ps + u64::from(dtime) * resolution_ps;
                writeln!(
                    out,
                    "{index} detection ch={channel} nsync={nsync} dtime={dtime} t={t}ps"
                )?;
            }
            TtRecord::Overflow3 { count } => {
                blocks += u64::from(count);
                writeln!(out, "{index} overflow +{count}")?;
            }
            TtRecord::Marker3 { id, nsync } => {
                writeln!(out, "{index} marker id={id} nsync={nsync}")?;
            }
        }
        listed += 1;
    }
    Ok(listed)
}
