//! Full-system checks, one per guarantee the crate makes: key-math accuracy
//! against a high-precision oracle, codec exhaustiveness, merge correctness,
//! end-to-end estimator consistency, alignment recovery, link-budget shape,
//! gating fraction, jitter combination, DNL recovery, determinism and a
//! throughput report.

use std::time::Instant;

use astro_float::{BigFloat, Consts, RoundingMode};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cowtag::analysis::{analyze_dnl, analyze_jitter, difference_histogram, AnalysisHistogram};
use cowtag::config::RunConfig;
use cowtag::cowsim::{simulate_channel, ChannelParams, LinkParams, SymbolPattern};
use cowtag::keyeval::{
    secret_fraction, shift_search, GateConfig, PatternTables, SlotHistogram,
};
use cowtag::run::{metrics_csv, run_simulation, run_sweep};
use cowtag::streams::{merge_sorted, FrontFifo, MergeItem, PushOutcome};
use cowtag::ttrecords::{
    compress_t2, decode, encode, expand_t2, Mode, T2Event, TtRecord, T2_WRAP_PS,
};

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

fn big(value: f64) -> BigFloat {
    BigFloat::from_f64(value, PREC)
}

fn to_f64(value: &BigFloat) -> f64 {
    format!("{value}").parse().unwrap()
}

fn big_entropy(x: &BigFloat, cc: &mut Consts) -> BigFloat {
    let zero = big(0.0);
    let one = big(1.0);
    if *x == zero || *x == one {
        return zero;
    }
    let complement = one.sub(x, PREC, RM);
    x.mul(&x.log2(PREC, RM, cc), PREC, RM)
        .add(
            &complement.mul(&complement.log2(PREC, RM, cc), PREC, RM),
            PREC,
            RM,
        )
        .neg()
}

fn big_delta(visibility: f64, mu: f64, cc: &mut Consts) -> BigFloat {
    let one = big(1.0);
    let two = big(2.0);
    let v = big(visibility);
    let m = big(mu);
    let att = m.neg().exp(PREC, RM, cc);
    let first = two.mul(&v, PREC, RM).sub(&one, PREC, RM).mul(&att, PREC, RM);
    let geometric = v.mul(&one.sub(&v, PREC, RM), PREC, RM).sqrt(PREC, RM);
    let att2 = two.neg().mul(&m, PREC, RM).exp(PREC, RM, cc);
    let tail = one.sub(&att2, PREC, RM).sqrt(PREC, RM);
    first.sub(
        &two.mul(&geometric, PREC, RM).mul(&tail, PREC, RM),
        PREC,
        RM,
    )
}

fn big_fraction(qber: f64, visibility: f64, mu: f64, cc: &mut Consts) -> BigFloat {
    let one = big(1.0);
    let two = big(2.0);
    let q = big(qber);
    let arg = one
        .add(&big_delta(visibility, mu, cc), PREC, RM)
        .div(&two, PREC, RM);
    one.sub(&big_entropy(&q, cc), PREC, RM)
        .sub(&q, PREC, RM)
        .sub(
            &one.sub(&q, PREC, RM).mul(&big_entropy(&arg, cc), PREC, RM),
            PREC,
            RM,
        )
}

#[test]
fn key_math_matches_a_high_precision_oracle() {
    let started = Instant::now();
    let mut cc = Consts::new().unwrap();

    let pinned = to_f64(&big_fraction(0.0, 1.0, 0.1, &mut cc));
    let ours = secret_fraction(0.0, 1.0, 0.1).unwrap();
    assert!(
        ((ours - pinned) / pinned).abs() <= 1e-9,
        "fraction {ours} differs from oracle {pinned}"
    );

    let mut checked = 0;
    for &qber in &[0.0, 0.02, 0.05, 0.08, 0.11] {
        for &visibility in &[0.5, 0.8, 0.9, 0.95, 1.0] {
            for &mu in &[0.02, 0.05, 0.1, 0.2] {
                let oracle = to_f64(&big_fraction(qber, visibility, mu, &mut cc));
                let fast = secret_fraction(qber, visibility, mu).unwrap();
                let tolerance = 1e-9 * oracle.abs().max(1e-3);
                assert!(
                    (fast - oracle).abs() <= tolerance,
                    "fraction({qber}, {visibility}, {mu}) = {fast}, oracle {oracle}"
                );
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 100);
    assert!(started.elapsed().as_secs_f64() < 1.0, "oracle grid too slow");
}

#[derive(Debug, PartialEq, Clone, Copy)]
enum Classified {
    Detection,
    Sync,
    Marker,
    Overflow,
    Invalid,
}

fn classify(record: Result<TtRecord, cowtag::ttrecords::RecordError>) -> Classified {
    match record {
        Ok(TtRecord::Detection2 { .. }) | Ok(TtRecord::Detection3 { .. }) => {
            Classified::Detection
        }
        Ok(TtRecord::Sync2 { .. }) => Classified::Sync,
        Ok(TtRecord::Marker2 { .. }) | Ok(TtRecord::Marker3 { .. }) => Classified::Marker,
        Ok(TtRecord::Overflow2 { .. }) | Ok(TtRecord::Overflow3 { .. }) => Classified::Overflow,
        Err(_) => Classified::Invalid,
    }
}

#[test]
fn codec_classifies_every_prefix_and_roundtrips_random_records() {
    let started = Instant::now();

    // Every (special, channel) prefix, with a payload of 1 so that records
    // whose validity depends on the payload (overflow counts) stay valid.
    for mode in [Mode::T2, Mode::T3] {
        for special in [false, true] {
            for channel in 0u32..64 {
                let word = u32::from(special) << 31 | channel << 25 | 1;
                let expected = match (mode, special, channel) {
                    (_, false, _) => Classified::Detection,
                    (Mode::T2, true, 0) => Classified::Sync,
                    (_, true, 1..=4) => Classified::Marker,
                    (_, true, 63) => Classified::Overflow,
                    _ => Classified::Invalid,
                };
                assert_eq!(
                    classify(decode(word, mode)),
                    expected,
                    "mode {mode} special {special} channel {channel}"
                );
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1_000_000 {
        let record = match rng.random_range(0..8) {
            0 => TtRecord::Detection2 {
                channel: rng.random_range(0..64),
                timetag: rng.random_range(0..1 << 25),
            },
            1 => TtRecord::Sync2 {
                timetag: rng.random_range(0..1 << 25),
            },
            2 => TtRecord::Marker2 {
                id: rng.random_range(1..=4),
                timetag: rng.random_range(0..1 << 25),
            },
            3 => TtRecord::Overflow2 {
                count: rng.random_range(1..1 << 25),
            },
            4 | 5 => TtRecord::Detection3 {
                channel: rng.random_range(0..64),
                nsync: rng.random_range(0..1 << 10),
                dtime: rng.random_range(0..1 << 15),
            },
            6 => TtRecord::Marker3 {
                id: rng.random_range(1..=4),
                nsync: rng.random_range(0..1 << 10),
            },
            _ => TtRecord::Overflow3 {
                count: rng.random_range(1..1 << 10),
            },
        };
        let mode = record.mode();
        let word = encode(&record, mode).unwrap();
        let back = decode(word, mode).unwrap();
        assert_eq!(back, record);
        assert_eq!(encode(&back, mode).unwrap(), word);
    }

    // Expansion undoes compression across several rollover blocks.
    let times = [
        0,
        T2_WRAP_PS - 5,
        T2_WRAP_PS,
        T2_WRAP_PS + 5,
        2 * T2_WRAP_PS + 12_345 * 5,
        5 * T2_WRAP_PS + 40,
    ];
    let events: Vec<T2Event> = times
        .iter()
        .enumerate()
        .map(|(i, &t)| T2Event::detection(t, (i % 3) as u8))
        .collect();
    let words = compress_t2(&events).unwrap();
    assert_eq!(expand_t2(words).unwrap(), events);

    assert!(started.elapsed().as_secs_f64() < 10.0, "codec checks too slow");
}

#[test]
fn merge_matches_a_stable_sort_oracle_and_flags_forced_drops() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let streams: Vec<Vec<T2Event>> = (0..64)
        .map(|channel| {
            let mut t = 0u64;
            (0..100_000)
                .map(|_| {
                    t += rng.random_range(1..=2_000);
                    T2Event::detection(t, channel as u8)
                })
                .collect()
        })
        .collect();

    let mut oracle: Vec<T2Event> = streams.concat();
    oracle.sort_by_key(|event| (event.time_ps(), event.channel_key()));
    let merged = merge_sorted(streams).unwrap();
    assert_eq!(merged.len(), 6_400_000);
    assert_eq!(merged, oracle);

    // A capacity-1 burst FIFO must drop the overflow, flag it, and keep the
    // survivors in their original order.
    let mut fifo = FrontFifo::new(1).unwrap();
    let mut survivors = Vec::new();
    for burst in 0..100u64 {
        for i in 0..3 {
            let outcome = fifo.push(T2Event::detection(burst * 10 + i, 0));
            assert_eq!(
                outcome,
                if i == 0 {
                    PushOutcome::Accepted
                } else {
                    PushOutcome::Dropped
                }
            );
        }
        fifo.drain_into(&mut survivors);
    }
    assert!(fifo.drop_flag());
    assert_eq!(fifo.dropped_count(), 200);
    assert_eq!(survivors.len(), 100);
    assert!(survivors.windows(2).all(|w| w[0].time_ps() < w[1].time_ps()));

    assert!(started.elapsed().as_secs_f64() < 30.0, "merge oracle too slow");
}

#[test]
fn estimators_recover_the_configured_physics() {
    let config = RunConfig::parse(
        "\
[sim]
channels = 1
duration_s = 1

[channel]
dead_time_ps = 500
error_floor = 0.001
",
    )
    .unwrap();
    let output = run_simulation(&config, 424_242, None).unwrap();
    assert_eq!(output.rows.len(), 1);
    let row = &output.rows[0];

    let visibility = row.visibility.expect("interference contrast measured");
    assert!(
        (visibility - 0.95).abs() <= 0.02,
        "visibility {visibility} too far from the source contrast"
    );

    // Per data symbol: the signal bin clicks with 1 - exp(-mu T s eta),
    // the wrong bin from the error floor, and darks land in each gated
    // 320 ps window.
    let p_signal = -(-0.1f64 * 0.9 * 0.4).exp_m1();
    let p_dark = 150.0 * 320e-12;
    let q_pred = (1e-3 + p_dark) / (1e-3 + p_signal + 2.0 * p_dark);
    let qber = row.qber.expect("error rate measured");
    assert!(
        (qber / q_pred - 1.0).abs() <= 0.10,
        "error rate {qber} vs predicted {q_pred}"
    );

    assert!(
        row.secret_bps >= 0.1e6 && row.secret_bps <= 10e6,
        "secret rate {} outside the 0.1-10 Mbit/s bracket",
        row.secret_bps
    );
}

#[test]
fn shift_search_recovers_randomly_injected_alignments() {
    let pattern = SymbolPattern::standard(9);
    let tables = PatternTables::new(&pattern);
    let gate = GateConfig::default();
    let link = LinkParams::default();
    let channel = ChannelParams {
        dcr_time_hz: 0.0,
        dcr_phase_hz: 0.0,
        dead_time_ps: 0,
        ..ChannelParams::default()
    };
    let n_slots = pattern.n_slots();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20u64 {
        let injected = rng.random_range(0..n_slots);
        let clicks =
            simulate_channel(0, &pattern, &channel, &link, 1_000 + trial, 5_000_000_000)
                .unwrap();
        let mut hist = SlotHistogram::new(n_slots);
        for (arm, times) in [
            (&mut hist.time, &clicks.time_clicks),
            (&mut hist.phase, &clicks.phase_clicks),
        ] {
            for &t in times.iter() {
                let slot = (t / link.slot_ps) as usize;
                if gate.keeps(t % link.slot_ps) {
                    arm[(slot + injected) % n_slots] += 1;
                }
            }
        }
        let found = shift_search(&hist, &tables);
        assert!(found.time.sifted() >= 10_000, "trial {trial} underpowered");
        assert_eq!(found.shift, injected, "trial {trial}");
    }
}

#[test]
fn secret_rate_follows_the_link_budget() {
    let started = Instant::now();
    let config = RunConfig::parse(
        "\
[sim]
channels = 9
duration_s = 10
sync_divider = 16

[channel]
eta_time = 0.04
eta_phase = 0.04
dcr_time_hz = 3000
dcr_phase_hz = 10
dead_time_ps = 50000
",
    )
    .unwrap();

    let attenuations = [0.0, 5.0, 10.0, 15.0, 20.0, 26.6];
    let rows = run_sweep(&config, 6, &attenuations).unwrap();
    let totals: Vec<f64> = rows
        .iter()
        .filter(|row| row.channel.is_none())
        .map(|row| row.secret_bps)
        .collect();
    assert_eq!(totals.len(), attenuations.len());

    assert!(
        totals.windows(2).all(|w| w[1] <= w[0]),
        "secret rate must not grow with loss: {totals:?}"
    );
    let decade_low = totals[0] / totals[2];
    assert!(
        (5.0..=20.0).contains(&decade_low),
        "0->10 dB ratio {decade_low}"
    );
    let decade_high = totals[1] / totals[3];
    assert!(
        (5.0..=20.0).contains(&decade_high),
        "5->15 dB ratio {decade_high}"
    );
    assert!(totals[3] > 0.0, "link still above the dark floor at 15 dB");
    assert_eq!(totals[5], 0.0, "dark counts must close the link at 26.6 dB");

    assert!(
        started.elapsed().as_secs_f64() < 300.0,
        "attenuation sweep too slow"
    );
}

#[test]
fn gate_discards_exactly_the_guard_fraction() {
    let gate = GateConfig {
        slot_ps: 400,
        guard_ps: 40,
    };
    let sub_bins = gate.slot_ps / 5;
    let discarded = (0..sub_bins).filter(|i| !gate.keeps(i * 5)).count();
    assert_eq!(sub_bins, 80);
    assert_eq!(discarded, 16);
    let percent = 100.0 * discarded as f64 / sub_bins as f64;
    assert!((percent - 20.0).abs() < 0.1);
}

#[test]
fn difference_histogram_obeys_the_root_two_jitter_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let smear = Normal::new(0.0, 30.0).unwrap();
    let mut first = Vec::with_capacity(1_000_000);
    let mut second = Vec::with_capacity(1_000_000);
    for i in 1..=1_000_000u64 {
        let base = (i * 100_000) as f64;
        let a: f64 = smear.sample(&mut rng);
        let b: f64 = smear.sample(&mut rng);
        first.push((base + a).round() as u64);
        second.push((base + b).round() as u64);
    }
    let stats = analyze_jitter(&difference_histogram(&first, &second, 5)).unwrap();
    assert_eq!(stats.events, 1_000_000);
    let expected = 30.0 * std::f64::consts::SQRT_2;
    assert!(
        (stats.rms_ps / expected - 1.0).abs() <= 0.05,
        "difference width {} vs expected {expected}",
        stats.rms_ps
    );
}

#[test]
fn dnl_analysis_recovers_an_injected_bin_width_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    // One of ten bins is 2% wider and collects proportionally more samples.
    let mut counts = vec![0u64; 10];
    for _ in 0..1_000_000 {
        let u: f64 = rng.random::<f64>() * 10.02;
        let bin = if u < 1.02 {
            0
        } else {
            (((u - 1.02).floor() as usize) + 1).min(9)
        };
        counts[bin] += 1;
    }
    let injected = analyze_dnl(&AnalysisHistogram {
        bin_ps: 5,
        origin_ps: 0,
        counts,
    })
    .unwrap();
    assert!(
        (injected.max_deviation_percent - 2.0).abs() <= 0.5,
        "recovered deviation {}% vs injected +2%",
        injected.max_deviation_percent
    );
    assert!(!injected.low_statistics);

    // A clean uniform histogram stays within 1.5x of the Poisson floor.
    let mut uniform = vec![0u64; 100];
    for _ in 0..1_000_000 {
        uniform[rng.random_range(0..100)] += 1;
    }
    let clean = analyze_dnl(&AnalysisHistogram {
        bin_ps: 5,
        origin_ps: 0,
        counts: uniform,
    })
    .unwrap();
    let floor = 100.0 / (1_000_000f64 / 100.0).sqrt();
    assert!(
        clean.rms_percent <= 1.5 * floor,
        "uniform rms {}% above 1.5x the {floor}% counting floor",
        clean.rms_percent
    );
}

#[test]
fn fixed_seed_runs_are_bit_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::parse(
        "\
[link]
attenuation_db = 10

[sim]
channels = 2
duration_s = 1

[channel]
dead_time_ps = 1000
",
    )
    .unwrap();

    let mut captures = Vec::new();
    for (label, threads) in [("a", 1), ("b", 4), ("c", 4)] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let path = dir.path().join(label).with_extension("ttag");
        let output = pool
            .install(|| run_simulation(&config, 2024, Some(&path)))
            .unwrap();
        captures.push((std::fs::read(&path).unwrap(), metrics_csv(&output.rows)));
    }
    assert_eq!(captures[0], captures[1], "1 vs 4 worker threads");
    assert_eq!(captures[1], captures[2], "repeated 4-thread run");
}

#[test]
fn decode_and_merge_throughput_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let streams: Vec<Vec<T2Event>> = (0..64)
        .map(|channel| {
            let mut t = 0u64;
            (0..156_250)
                .map(|_| {
                    t += rng.random_range(1..=2_000);
                    T2Event::detection(t, channel as u8)
                })
                .collect()
        })
        .collect();
    let total: usize = streams.iter().map(Vec::len).sum();

    let merge_started = Instant::now();
    let merged = merge_sorted(streams).unwrap();
    let merge_elapsed = merge_started.elapsed().as_secs_f64();

    let words = compress_t2(&merged).unwrap();
    let decode_started = Instant::now();
    let expanded = expand_t2(words).unwrap();
    let decode_elapsed = decode_started.elapsed().as_secs_f64();
    assert_eq!(expanded.len(), total);

    let rate = total as f64 / (merge_elapsed + decode_elapsed) / 1e6;
    println!(
        "decode+merge processed {total} records at {rate:.1} M records/s \
         (merge {:.1} M/s, decode {:.1} M/s)",
        total as f64 / merge_elapsed / 1e6,
        total as f64 / decode_elapsed / 1e6
    );
}
