//! Histogram diagnostics for tagger characterization: timing jitter from
//! two-channel coincidences and bin-width uniformity of the time base.

/// Counts over uniform bins of width `bin_ps`, starting at `origin_ps`.
/// Bin `k` covers `[origin + k * bin, origin + (k + 1) * bin)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisHistogram {
    pub bin_ps: u64,
    pub origin_ps: i64,
    pub counts: Vec<u64>,
}

impl AnalysisHistogram {
    /// Histogram arbitrary signed values.
    pub fn from_values(values: impl IntoIterator<Item = i64>, bin_ps: u64) -> AnalysisHistogram {
        assert!(bin_ps > 0, "bin width must be positive");
        let values: Vec<i64> = values.into_iter().collect();
        let Some(&min) = values.iter().min() else {
            return AnalysisHistogram {
                bin_ps,
                origin_ps: 0,
                counts: Vec::new(),
            };
        };
        let max = *values.iter().max().expect("nonempty");
        let origin_ps = min.div_euclid(bin_ps as i64) * bin_ps as i64;
        let bins = ((max - origin_ps) as u64 / bin_ps + 1) as usize;
        let mut counts = vec![0u64; bins];
        for v in values {
            counts[((v - origin_ps) as u64 / bin_ps) as usize] += 1;
        }
        AnalysisHistogram {
            bin_ps,
            origin_ps,
            counts,
        }
    }

    /// Fold absolute times into a repeating window of `bins` bins, for
    /// probing the uniformity of the time base with random arrivals.
    pub fn folded(times: &[u64], bin_ps: u64, bins: usize) -> AnalysisHistogram {
        assert!(bin_ps > 0 && bins > 0, "bin layout must be nonempty");
        let mut counts = vec![0u64; bins];
        for &t in times {
            counts[((t / bin_ps) % bins as u64) as usize] += 1;
        }
        AnalysisHistogram {
            bin_ps,
            origin_ps: 0,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn center(&self, bin: usize) -> f64 {
        self.origin_ps as f64 + (bin as f64 + 0.5) * self.bin_ps as f64
    }
}

/// Pair the i-th entries of two time series and histogram their signed
/// differences `b[i] - a[i]`. Trailing unpaired entries are ignored.
pub fn difference_histogram(a: &[u64], b: &[u64], bin_ps: u64) -> AnalysisHistogram {
    let diffs = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| y as i64 - x as i64);
    AnalysisHistogram::from_values(diffs, bin_ps)
}

/// Signed delay from each time in `a` to the nearest time in `b`, keeping
/// matches with magnitude at most `window_ps`. Both series must be sorted.
/// Suits streams that are not recorded in lockstep: each event is paired
/// with its closest counterpart and unmatched events are dropped.
pub fn nearest_differences(a: &[u64], b: &[u64], window_ps: u64) -> Vec<i64> {
    let mut diffs = Vec::new();
    let mut j = 0usize;
    for &t in a {
        while j + 1 < b.len() && b[j + 1] <= t {
            j += 1;
        }
        let best = [b.get(j), b.get(j + 1)]
            .into_iter()
            .flatten()
            .map(|&n| n as i64 - t as i64)
            .filter(|d| d.unsigned_abs() <= window_ps)
            .min_by_key(|d| d.unsigned_abs());
        diffs.extend(best);
    }
    diffs
}

/// Moments and width of a timing distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterStats {
    pub events: u64,
    pub centroid_ps: f64,
    pub rms_ps: f64,
    pub fwhm_ps: f64,
}

/// Centroid, rms about the centroid, and full width at half maximum with
/// linear interpolation between bin centers. `None` for an empty histogram.
pub fn analyze_jitter(hist: &AnalysisHistogram) -> Option<JitterStats> {
    let total = hist.total();
    if total == 0 {
        return None;
    }
    let n = total as f64;
    let centroid = hist
        .counts
        .iter()
        .enumerate()
        .map(|(k, &c)| c as f64 * hist.center(k))
        .sum::<f64>()
        / n;
    let variance = hist
        .counts
        .iter()
        .enumerate()
        .map(|(k, &c)| c as f64 * (hist.center(k) - centroid).powi(2))
        .sum::<f64>()
        / n;

    let peak = *hist.counts.iter().max().expect("nonempty") as f64;
    let half = peak / 2.0;
    let rising = hist
        .counts
        .iter()
        .position(|&c| c as f64 >= half)
        .expect("peak exists");
    let left = if rising == 0 {
        hist.origin_ps as f64
    } else {
        let below = hist.counts[rising - 1] as f64;
        let above = hist.counts[rising] as f64;
        hist.center(rising - 1) + (half - below) / (above - below) * hist.bin_ps as f64
    };
    let falling = hist
        .counts
        .iter()
        .rposition(|&c| c as f64 >= half)
        .expect("peak exists");
    let right = if falling + 1 == hist.counts.len() {
        hist.origin_ps as f64 + hist.counts.len() as f64 * hist.bin_ps as f64
    } else {
        let above = hist.counts[falling] as f64;
        let below = hist.counts[falling + 1] as f64;
        hist.center(falling) + (above - half) / (above - below) * hist.bin_ps as f64
    };

    Some(JitterStats {
        events: total,
        centroid_ps: centroid,
        rms_ps: variance.sqrt(),
        fwhm_ps: right - left,
    })
}

/// Deviation of per-bin counts from their mean, over the occupied range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DnlStats {
    pub bins: usize,
    pub mean_count: f64,
    /// Root-mean-square deviation from the mean, in percent.
    pub rms_percent: f64,
    /// Peak-to-peak deviation, in percent.
    pub pp_percent: f64,
    /// Largest single-bin deviation by magnitude, signed, in percent.
    pub max_deviation_percent: f64,
    /// Set when counting statistics limit the resolution to worse than
    /// about one percent per bin.
    pub low_statistics: bool,
}

/// Compare per-bin counts against a uniform expectation, trimming leading
/// and trailing empty bins. `None` if nothing was counted.
pub fn analyze_dnl(hist: &AnalysisHistogram) -> Option<DnlStats> {
    let first = hist.counts.iter().position(|&c| c > 0)?;
    let last = hist.counts.iter().rposition(|&c| c > 0)?;
    let counts = &hist.counts[first..=last];
    let bins = counts.len();
    let mean = counts.iter().sum::<u64>() as f64 / bins as f64;

    let mut sum_sq = 0.0;
    let mut max_dev: f64 = 0.0;
    let mut min_dev: f64 = 0.0;
    let mut extreme: f64 = 0.0;
    for &c in counts {
        let dev = (c as f64 - mean) / mean;
        sum_sq += dev * dev;
        max_dev = max_dev.max(dev);
        min_dev = min_dev.min(dev);
        if dev.abs() > extreme.abs() {
            extreme = dev;
        }
    }

    Some(DnlStats {
        bins,
        mean_count: mean,
        rms_percent: (sum_sq / bins as f64).sqrt() * 100.0,
        pp_percent: (max_dev - min_dev) * 100.0,
        max_deviation_percent: extreme * 100.0,
        low_statistics: mean < 10_000.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn difference_histogram_pairs_by_index() {
        let hist = difference_histogram(&[100, 200], &[110, 195], 5);
        assert_eq!(hist.origin_ps, -5);
        assert_eq!(hist.counts, vec![1, 0, 0, 1]);
    }

    #[test]
    fn nearest_differences_straddle_the_probe_and_respect_the_window() {
        let a = [100, 500, 1_000_000];
        let b = [90, 510, 520];
        assert_eq!(nearest_differences(&a, &b, 50), vec![-10, 10]);
        assert!(nearest_differences(&a, &[], 50).is_empty());
    }

    #[test]
    fn nearest_differences_reduce_to_index_pairing_for_paired_streams() {
        let a: Vec<u64> = (0..200u64).map(|i| 1_000 + i * 100_000).collect();
        let b: Vec<u64> = a
            .iter()
            .enumerate()
            .map(|(i, &t)| t.checked_add_signed((i as i64 * 37) % 61 - 30).unwrap())
            .collect();
        let by_index: Vec<i64> = a.iter().zip(&b).map(|(&x, &y)| y as i64 - x as i64).collect();
        assert_eq!(nearest_differences(&a, &b, 500), by_index);
    }

    #[test]
    fn jitter_stats_of_a_known_shape() {
        let hist = AnalysisHistogram {
            bin_ps: 10,
            origin_ps: 0,
            counts: vec![1, 4, 1],
        };
        let stats = analyze_jitter(&hist).unwrap();
        assert_eq!(stats.events, 6);
        assert_abs_diff_eq!(stats.centroid_ps, 15.0, epsilon = 1e-12);
        // Two of six events sit one bin off center.
        assert_abs_diff_eq!(stats.rms_ps, (200.0f64 / 6.0).sqrt(), epsilon = 1e-12);
        // Half maximum of 2 crosses a third of the way up each flank.
        assert_abs_diff_eq!(stats.fwhm_ps, 40.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn single_loaded_bin_reports_bin_width_fwhm_and_zero_rms() {
        let hist = AnalysisHistogram {
            bin_ps: 10,
            origin_ps: 0,
            counts: vec![0, 7, 0],
        };
        let stats = analyze_jitter(&hist).unwrap();
        assert_eq!(stats.rms_ps, 0.0);
        assert_abs_diff_eq!(stats.fwhm_ps, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(stats.centroid_ps, 15.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_histogram_has_no_stats() {
        let hist = AnalysisHistogram::from_values(std::iter::empty(), 5);
        assert!(analyze_jitter(&hist).is_none());
        assert!(analyze_dnl(&hist).is_none());
    }

    #[test]
    fn gaussian_sample_recovers_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let normal = Normal::new(0.0, 30.0).unwrap();
        let values: Vec<i64> = (0..100_000)
            .map(|_| {
                let v: f64 = normal.sample(&mut rng);
                v.round() as i64
            })
            .collect();
        let hist = AnalysisHistogram::from_values(values, 5);
        let stats = analyze_jitter(&hist).unwrap();
        assert!((stats.rms_ps / 30.0 - 1.0).abs() < 0.02, "rms {}", stats.rms_ps);
        let expected_fwhm = 30.0 * (8.0 * 2f64.ln()).sqrt();
        assert!(
            (stats.fwhm_ps / expected_fwhm - 1.0).abs() < 0.03,
            "fwhm {}",
            stats.fwhm_ps
        );
        // Floor binning of integer values biases the centroid by +0.5 ps.
        assert!((stats.centroid_ps - 0.5).abs() < 0.5);
    }

    #[test]
    fn dnl_of_known_counts() {
        let hist = AnalysisHistogram {
            bin_ps: 5,
            origin_ps: 0,
            counts: vec![102, 98, 100, 100],
        };
        let stats = analyze_dnl(&hist).unwrap();
        assert_eq!(stats.bins, 4);
        assert_abs_diff_eq!(stats.rms_percent, 2.0f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(stats.pp_percent, 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(stats.max_deviation_percent, 2.0, epsilon = 1e-9);
        assert!(stats.low_statistics);
    }

    #[test]
    fn dnl_trims_empty_edges() {
        let hist = AnalysisHistogram {
            bin_ps: 5,
            origin_ps: 0,
            counts: vec![0, 0, 50_000, 50_000, 0],
        };
        let stats = analyze_dnl(&hist).unwrap();
        assert_eq!(stats.bins, 2);
        assert_eq!(stats.rms_percent, 0.0);
        assert!(!stats.low_statistics);
    }

    #[test]
    fn folded_histogram_wraps_times() {
        let hist = AnalysisHistogram::folded(&[0, 7, 103, 208], 5, 20);
        assert_eq!(hist.counts[0], 2);
        assert_eq!(hist.counts[1], 2);
        assert_eq!(hist.total(), 4);
    }
}
