use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use cowtag::config::RunConfig;
use cowtag::run::{
    decode_listing, dnl_from_file, evaluate_file, jitter_from_file, metrics_csv, run_simulation,
    run_sweep, write_metrics_csv, write_sweep_csv,
};

#[derive(Parser)]
#[command(
    name = "cowtag",
    about = "Simulate, capture and evaluate multichannel time-tagged key distribution runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured system and write a record file plus interval metrics
    Simulate {
        /// Configuration file
        #[arg(long)]
        config: PathBuf,
        /// Random seed (overrides the config; a fresh one is drawn if absent)
        #[arg(long)]
        seed: Option<u64>,
        /// Run duration in seconds (overrides the config)
        #[arg(long)]
        duration: Option<f64>,
        /// Output prefix; writes PREFIX.ttag and PREFIX.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat the configured run over a list of link attenuations
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Duration in seconds per attenuation point (overrides the config)
        #[arg(long)]
        duration: Option<f64>,
        /// Comma-separated attenuations in dB, e.g. 0,5,10,15
        #[arg(long, value_delimiter = ',')]
        attenuations: Vec<f64>,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate an existing record file against a configuration
    Eval {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the records of a file with reconstructed absolute times
    Decode {
        #[arg(long)]
        file: PathBuf,
        /// Maximum number of records to list
        #[arg(long)]
        limit: Option<u64>,
    },
    /// Histogram the delay between two channels and report its width
    AnalyzeJitter {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        channel_a: u8,
        #[arg(long)]
        channel_b: u8,
        #[arg(long, default_value_t = 5)]
        bin_ps: u64,
    },
    /// Check one channel's fine-time bin uniformity
    AnalyzeDnl {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        channel: u8,
        #[arg(long, default_value_t = 5)]
        bin_ps: u64,
        #[arg(long, default_value_t = 100)]
        bins: usize,
    },
}

fn resolve_seed(flag: Option<u64>, config: &RunConfig) -> (u64, &'static str) {
    if let Some(seed) = flag {
        return (seed, "from --seed");
    }
    if let Some(seed) = config.sim.seed {
        return (seed, "from config");
    }
    (rand::random(), "freshly drawn")
}

fn apply_duration(config: &mut RunConfig, duration: Option<f64>) -> anyhow::Result<()> {
    if let Some(seconds) = duration {
        anyhow::ensure!(
            seconds.is_finite() && seconds > 0.0,
            "--duration must be a positive number of seconds"
        );
        config.sim.duration_s = seconds;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            config,
            seed,
            duration,
            out,
        } => {
            let mut config = RunConfig::from_file(&config).context("loading config")?;
            apply_duration(&mut config, duration)?;
            let (seed, origin) = resolve_seed(seed, &config);
            println!("seed {seed} ({origin})");
            let tag_path = out.with_extension("ttag");
            let csv_path = out.with_extension("csv");
            let output = run_simulation(&config, seed, Some(&tag_path))?;
            write_metrics_csv(&csv_path, &output.rows)?;
            println!(
                "{} events merged, {} records captured in {:.2} s ({:.1} Mevents/s)",
                output.merged_events,
                output.words,
                output.wall.as_secs_f64(),
                output.events_per_second() / 1e6
            );
            if output.front_dropped > 0 {
                println!("burst FIFOs dropped {} records", output.front_dropped);
            }
            if output.conversion_dropped > 0 {
                println!(
                    "{} detections fell outside the sync span",
                    output.conversion_dropped
                );
            }
            if let Some(at) = output.aborted_at {
                println!("main FIFO overflowed at record {at}; capture truncated");
            }
            if output.rows.is_empty() {
                println!("run shorter than one interval; metrics CSV is header-only");
            } else {
                let secret: f64 = output.rows.iter().map(|r| r.secret_bps).sum();
                let sifted: f64 = output.rows.iter().map(|r| r.sifted_bps).sum();
                println!(
                    "sifted {:.3} Mbit/s, secret {:.3} Mbit/s summed over {} interval rows",
                    sifted / 1e6,
                    secret / 1e6,
                    output.rows.len()
                );
            }
            println!("wrote {} and {}", tag_path.display(), csv_path.display());
        }
        Command::Sweep {
            config,
            seed,
            duration,
            attenuations,
            out,
        } => {
            anyhow::ensure!(!attenuations.is_empty(), "no attenuations given");
            let mut config = RunConfig::from_file(&config).context("loading config")?;
            apply_duration(&mut config, duration)?;
            let (seed, origin) = resolve_seed(seed, &config);
            println!("seed {seed} ({origin})");
            let rows = run_sweep(&config, seed, &attenuations)?;
            write_sweep_csv(&out, &rows)?;
            for row in rows.iter().filter(|r| r.channel.is_none()) {
                println!(
                    "{:>6.2} dB: sifted {:.4} Mbit/s, secret {:.4} Mbit/s",
                    row.attenuation_db,
                    row.sifted_bps / 1e6,
                    row.secret_bps / 1e6
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { file, config, out } => {
            let config = RunConfig::from_file(&config).context("loading config")?;
            let rows = evaluate_file(&file, &config)?;
            match out {
                Some(path) => {
                    write_metrics_csv(&path, &rows)?;
                    println!("wrote {} rows to {}", rows.len(), path.display());
                }
                None => print!("{}", metrics_csv(&rows)),
            }
        }
        Command::Decode { file, limit } => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            decode_listing(&file, &mut lock, limit)?;
            lock.flush()?;
        }
        Command::AnalyzeJitter {
            file,
            channel_a,
            channel_b,
            bin_ps,
        } => match jitter_from_file(&file, channel_a, channel_b, bin_ps)? {
            Some(stats) => println!(
                "{} pairs: centroid {:.1} ps, rms {:.2} ps, fwhm {:.2} ps",
                stats.events, stats.centroid_ps, stats.rms_ps, stats.fwhm_ps
            ),
            None => println!("no coincidences between channels {channel_a} and {channel_b}"),
        },
        Command::AnalyzeDnl {
            file,
            channel,
            bin_ps,
            bins,
        } => match dnl_from_file(&file, channel, bin_ps, bins)? {
            Some(stats) => {
                println!(
                    "{} bins, mean {:.0} counts: rms {:.3}%, peak-to-peak {:.3}%, extreme {:+.3}%",
                    stats.bins,
                    stats.mean_count,
                    stats.rms_percent,
                    stats.pp_percent,
                    stats.max_deviation_percent
                );
                if stats.low_statistics {
                    println!("low statistics: fewer than 10k counts per bin on average");
                }
            }
            None => println!("channel {channel} has no detections"),
        },
    }
    Ok(())
}
