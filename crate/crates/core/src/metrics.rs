//! Calibration error estimators and prediction-change diagnostics.
//!
//! All estimators work on top-label confidence (the largest probability of a
//! row) and top-label correctness (argmax equals the label).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logits::{argmax, nll, LabelVector, ProbMatrix, Rows};

pub const DEFAULT_BINS: usize = 15;
pub const KDE_GRID_POINTS: usize = 1024;
pub const KDE_MIN_SAMPLES: usize = 10;
pub const UNCERTAIN_THRESHOLD: f64 = 0.7;

/// Kernel contributions beyond this many bandwidths are below 1e-15.
const KDE_CUTOFF: f64 = 8.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// 0 for empty bins.
    pub mean_confidence: f64,
    /// 0 for empty bins.
    pub accuracy: f64,
}

/// Equal-width reliability bins `((k-1)/K, k/K]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bins: Vec<Bin>,
}

impl BinStats {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Writes one bin per line with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for bin in &self.bins {
            w.serialize(bin)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_inputs(p: &ProbMatrix, y: &LabelVector) -> Result<()> {
    y.check_against(p.n(), p.m())
}

/// Top-label confidence and correctness per row.
pub fn confidence_and_correct(p: &ProbMatrix, y: &LabelVector) -> (Vec<f64>, Vec<bool>) {
    p.rows()
        .zip(y.iter())
        .map(|(row, label)| {
            let j = argmax(row);
            (row[j], j == label)
        })
        .unzip()
}

/// Bin holding confidence `c` under `((k-1)/K, k/K]`; 0 joins the first bin.
fn bin_index(c: f64, num_bins: usize) -> usize {
    let k_f = num_bins as f64;
    let mut k = ((c * k_f).ceil() as isize - 1).clamp(0, num_bins as isize - 1) as usize;
    while k > 0 && c <= k as f64 / k_f {
        k -= 1;
    }
    while k + 1 < num_bins && c > (k + 1) as f64 / k_f {
        k += 1;
    }
    k
}

pub fn reliability_data(p: &ProbMatrix, y: &LabelVector, num_bins: usize) -> Result<BinStats> {
    check_inputs(p, y)?;
    if num_bins < 1 {
        return Err(Error::InvalidConfig("num_bins must be >= 1".into()));
    }
    let (conf, correct) = confidence_and_correct(p, y);
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    for (&c, &ok) in conf.iter().zip(&correct) {
        let k = bin_index(c, num_bins);
        count[k] += 1;
        conf_sum[k] += c;
        hits[k] += usize::from(ok);
    }
    let k_f = num_bins as f64;
    let bins = (0..num_bins)
        .map(|k| {
            let (mean_confidence, accuracy) = if count[k] == 0 {
                (0.0, 0.0)
            } else {
                (
                    conf_sum[k] / count[k] as f64,
                    hits[k] as f64 / count[k] as f64,
                )
            };
            Bin {
                lower: k as f64 / k_f,
                upper: (k + 1) as f64 / k_f,
                count: count[k],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(BinStats { bins })
}

/// Expected calibration error over equal-width bins, each bin weighted by its
/// share of the samples.
pub fn ece(p: &ProbMatrix, y: &LabelVector, num_bins: usize) -> Result<(f64, BinStats)> {
    let stats = reliability_data(p, y, num_bins)?;
    let n = p.n() as f64;
    let value = stats
        .bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
        .sum();
    Ok((value, stats))
}

/// Calibration error over equal-count bins: samples sorted by confidence are
/// cut into `num_bins` contiguous groups (the lowest groups take one extra
/// sample each when `n` does not divide evenly) and the absolute
/// accuracy-confidence gaps are summed without weighting.
pub fn eq_mass_ece(p: &ProbMatrix, y: &LabelVector, num_bins: usize) -> Result<f64> {
    check_inputs(p, y)?;
    let n = p.n();
    if num_bins < 1 || n < num_bins {
        return Err(Error::TooFewSamples(format!(
            "{n} samples cannot fill {num_bins} equal-mass bins"
        )));
    }
    let (conf, correct) = confidence_and_correct(p, y);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]));
    let (base, extra) = (n / num_bins, n % num_bins);
    let mut start = 0;
    let mut total = 0.0;
    for k in 0..num_bins {
        let size = base + usize::from(k < extra);
        let group = &order[start..start + size];
        let c: f64 = group.iter().map(|&i| conf[i]).sum::<f64>() / size as f64;
        let a = group.iter().filter(|&&i| correct[i]).count() as f64 / size as f64;
        total += (a - c).abs();
        start += size;
    }
    Ok(total)
}

/// Kernel bandwidth `1.06 * sd * n^(-1/5)` with the sample standard
/// deviation (`n - 1` denominator).
pub fn kde_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Smoothed calibration error: Nadaraya-Watson regression of correctness on
/// confidence with a Gaussian kernel, compared with the confidence itself and
/// averaged under the kernel density estimate of confidences. The integral is
/// a trapezoid rule on a uniform grid spanning the observed confidences.
pub fn ece_kde(p: &ProbMatrix, y: &LabelVector) -> Result<f64> {
    check_inputs(p, y)?;
    if p.n() < KDE_MIN_SAMPLES {
        return Err(Error::TooFewSamples(format!(
            "ECE-KDE needs at least {KDE_MIN_SAMPLES} samples, got {}",
            p.n()
        )));
    }
    let (conf, correct) = confidence_and_correct(p, y);
    let h = kde_bandwidth(&conf);
    if h <= 0.0 {
        log::warn!("confidences have zero spread; ECE-KDE falls back to |accuracy - confidence|");
        let n = conf.len() as f64;
        let acc = correct.iter().filter(|&&c| c).count() as f64 / n;
        let mean = conf.iter().sum::<f64>() / n;
        return Ok((acc - mean).abs());
    }

    let mut pairs: Vec<(f64, f64)> = conf
        .iter()
        .zip(&correct)
        .map(|(&c, &ok)| (c, if ok { 1.0 } else { 0.0 }))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lo = pairs[0].0;
    let hi = pairs[pairs.len() - 1].0;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let reach = KDE_CUTOFF * h;

    let mut gap_mass = 0.0;
    let mut mass = 0.0;
    for g in 0..KDE_GRID_POINTS {
        let t = lo + step * g as f64;
        let first = pairs.partition_point(|&(c, _)| c < t - reach);
        let mut dens = 0.0;
        let mut hit = 0.0;
        for &(c, ok) in pairs[first..].iter().take_while(|&&(c, _)| c <= t + reach) {
            let u = (t - c) / h;
            let k = (-0.5 * u * u).exp();
            dens += k;
            hit += k * ok;
        }
        if dens <= 0.0 {
            continue;
        }
        let weight = if g == 0 || g == KDE_GRID_POINTS - 1 {
            0.5
        } else {
            1.0
        };
        // kernel normalisation cancels in the ratio below
        gap_mass += weight * dens * (t - hit / dens).abs();
        mass += weight * dens;
    }
    Ok(gap_mass / mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingDiagnostics {
    /// Fraction of rows whose argmax changed.
    pub prediction_change_rate: f64,
    /// The same fraction among rows whose original top probability is below
    /// the threshold.
    pub uncertain_alteration_rate: f64,
    pub uncertain_count: usize,
    /// True when no row fell below the threshold (the rate is then 0).
    pub uncertain_set_empty: bool,
}

pub fn ranking_diagnostics(
    before: &ProbMatrix,
    after: &ProbMatrix,
    threshold: f64,
) -> Result<RankingDiagnostics> {
    if before.n() != after.n() || before.m() != after.m() {
        return Err(Error::DimensionMismatch(format!(
            "before is {}x{}, after is {}x{}",
            before.n(),
            before.m(),
            after.n(),
            after.m()
        )));
    }
    let mut changed = 0usize;
    let mut uncertain = 0usize;
    let mut uncertain_changed = 0usize;
    for (b, a) in before.rows().zip(after.rows()) {
        let jb = argmax(b);
        let flip = jb != argmax(a);
        changed += usize::from(flip);
        if b[jb] < threshold {
            uncertain += 1;
            uncertain_changed += usize::from(flip);
        }
    }
    Ok(RankingDiagnostics {
        prediction_change_rate: changed as f64 / before.n() as f64,
        uncertain_alteration_rate: if uncertain == 0 {
            0.0
        } else {
            uncertain_changed as f64 / uncertain as f64
        },
        uncertain_count: uncertain,
        uncertain_set_empty: uncertain == 0,
    })
}

/// All metrics for one calibrated output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ece: f64,
    pub eq_mass_ece: f64,
    pub ece_kde: f64,
    pub accuracy: f64,
    pub nll: f64,
    pub prediction_change_rate: f64,
    pub uncertain_alteration_rate: f64,
    pub bins: BinStats,
}

/// NaN (with a warning) when a metric needs more samples than available.
fn or_nan_if_small(name: &str, r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::TooFewSamples(msg)) => {
            log::warn!("{name} skipped: {msg}");
            Ok(f64::NAN)
        }
        other => other,
    }
}

/// Scores `calibrated` against labels, with ranking diagnostics relative to
/// the uncalibrated probabilities `before`. Equal-mass ECE and ECE-KDE are
/// NaN on sets too small for them.
pub fn evaluate(
    calibrated: &ProbMatrix,
    y: &LabelVector,
    before: &ProbMatrix,
    num_bins: usize,
) -> Result<MetricReport> {
    let (ece_value, bins) = ece(calibrated, y, num_bins)?;
    let diag = ranking_diagnostics(before, calibrated, UNCERTAIN_THRESHOLD)?;
    Ok(MetricReport {
        ece: ece_value,
        eq_mass_ece: or_nan_if_small("equal-mass ECE", eq_mass_ece(calibrated, y, num_bins))?,
        ece_kde: or_nan_if_small("ECE-KDE", ece_kde(calibrated, y))?,
        accuracy: crate::logits::accuracy(calibrated, y),
        nll: nll(calibrated, y)?,
        prediction_change_rate: diag.prediction_change_rate,
        uncertain_alteration_rate: diag.uncertain_alteration_rate,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Two-class rows with the given top confidences; `correct` picks the
    /// label.
    fn binary_fixture(conf: &[f64], correct: &[bool]) -> (ProbMatrix, LabelVector) {
        let data = conf.iter().flat_map(|&c| [c, 1.0 - c]).collect();
        let labels = correct.iter().map(|&ok| if ok { 0 } else { 1 }).collect();
        (
            ProbMatrix::new(data, conf.len(), 2).unwrap(),
            LabelVector::new(labels, 2).unwrap(),
        )
    }

    /// Direct evaluation of the binned sum from the definition.
    fn brute_force_ece(conf: &[f64], correct: &[bool], k: usize) -> f64 {
        let n = conf.len() as f64;
        let mut total = 0.0;
        for b in 0..k {
            let (lo, hi) = (b as f64 / k as f64, (b + 1) as f64 / k as f64);
            let members: Vec<usize> = (0..conf.len())
                .filter(|&i| (conf[i] > lo || (b == 0 && conf[i] == 0.0)) && conf[i] <= hi)
                .collect();
            if members.is_empty() {
                continue;
            }
            let c = members.iter().map(|&i| conf[i]).sum::<f64>() / members.len() as f64;
            let a = members.iter().filter(|&&i| correct[i]).count() as f64 / members.len() as f64;
            total += members.len() as f64 / n * (a - c).abs();
        }
        total
    }

    #[test]
    fn ece_examples() {
        let (p, y) = binary_fixture(&[0.9; 8], &[true; 8]);
        assert_abs_diff_eq!(ece(&p, &y, 15).unwrap().0, 0.1, epsilon = 1e-12);

        let p = ProbMatrix::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 3).unwrap();
        let y = LabelVector::new(vec![0, 1], 3).unwrap();
        assert_eq!(ece(&p, &y, 15).unwrap().0, 0.0);

        let (p, y) = binary_fixture(&[0.9, 0.9, 0.8, 0.6], &[true, true, false, true]);
        let (value, stats) = ece(&p, &y, 10).unwrap();
        assert_abs_diff_eq!(value, 0.35, epsilon = 1e-12);
        let filled: Vec<(usize, usize, f64, f64)> = stats
            .bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.count > 0)
            .map(|(k, b)| (k, b.count, b.mean_confidence, b.accuracy))
            .collect();
        assert_eq!(
            filled,
            vec![(5, 1, 0.6, 1.0), (7, 1, 0.8, 0.0), (8, 2, 0.9, 1.0)]
        );
        assert_eq!(stats.bins.len(), 10);
        assert_eq!(stats.total(), 4);
        for (k, b) in stats.bins.iter().enumerate() {
            assert_eq!(b.lower, k as f64 / 10.0);
            assert_eq!(b.upper, (k + 1) as f64 / 10.0);
        }
    }

    #[test]
    fn ece_matches_brute_force_on_small_fixtures() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(1..=50);
            // include exact bin edges
            let conf: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(8..=15) as f64 / 15.0
                    } else {
                        rng.random_range(0.5..=1.0)
                    }
                })
                .collect();
            let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            let (p, y) = binary_fixture(&conf, &correct);
            for k in [1, 10, 15] {
                let got = ece(&p, &y, k).unwrap().0;
                assert_abs_diff_eq!(got, brute_force_ece(&conf, &correct, k), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn boundary_values_land_in_the_lower_bin() {
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.5, 10), 4);
        assert_eq!(bin_index(0.5000001, 10), 5);
        for k in 1..=15 {
            assert_eq!(bin_index(k as f64 / 15.0, 15), k - 1);
        }
    }

    #[test]
    fn eq_mass_examples() {
        let pattern: Vec<bool> = (0..16).map(|i| i % 4 != 3).collect();
        let (p, y) = binary_fixture(&[0.75; 16], &pattern);
        assert_eq!(eq_mass_ece(&p, &y, 4).unwrap(), 0.0);

        let conf = [0.9, 0.55, 0.7, 0.8, 0.65];
        let correct = [true, false, true, false, true];
        let (p, y) = binary_fixture(&conf, &correct);
        let mean = conf.iter().sum::<f64>() / 5.0;
        assert_abs_diff_eq!(
            eq_mass_ece(&p, &y, 1).unwrap(),
            (0.6 - mean).abs(),
            epsilon = 1e-12
        );

        assert!(matches!(
            eq_mass_ece(&p, &y, 6),
            Err(Error::TooFewSamples(_))
        ));
    }

    #[test]
    fn eq_mass_matches_sorted_split_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(30);
        let conf: Vec<f64> = (0..30).map(|_| rng.random_range(0.5..1.0)).collect();
        let correct: Vec<bool> = (0..30).map(|_| rng.random_bool(0.6)).collect();
        let (p, y) = binary_fixture(&conf, &correct);
        for k in [1, 4, 7, 15, 30] {
            let mut pairs: Vec<(f64, bool)> =
                conf.iter().copied().zip(correct.iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut oracle = 0.0;
            let mut start = 0;
            for b in 0..k {
                let size = 30 / k + if b < 30 % k { 1 } else { 0 };
                let g = &pairs[start..start + size];
                let c: f64 = g.iter().map(|x| x.0).sum::<f64>() / size as f64;
                let a = g.iter().filter(|x| x.1).count() as f64 / size as f64;
                oracle += (a - c).abs();
                start += size;
            }
            assert_eq!(eq_mass_ece(&p, &y, k).unwrap(), oracle, "k={k}");
        }
    }

    #[test]
    fn bandwidth_rule() {
        // two-point sample {a, b} has sd |a - b| / sqrt(2)
        let vals = [0.5, 0.5 + 0.1 * 2f64.sqrt()];
        let expected = 1.06 * 0.1 * 2f64.powf(-0.2);
        assert_abs_diff_eq!(kde_bandwidth(&vals), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(1.06 * 0.1 * 1000f64.powf(-0.2), 0.026_625, epsilon = 1e-5);
    }

    #[test]
    fn kde_degenerate_and_small_inputs() {
        let (p, y) = binary_fixture(&[0.8; 20], &[true; 20]);
        assert_abs_diff_eq!(ece_kde(&p, &y).unwrap(), 0.2, epsilon = 1e-12);
        let (p, y) = binary_fixture(&[0.8; 5], &[true; 5]);
        assert!(ece_kde(&p, &y).is_err());
    }

    #[test]
    fn diagnostics() {
        let before = ProbMatrix::new(vec![0.6, 0.4, 0.9, 0.1, 0.3, 0.7], 3, 2).unwrap();
        let d = ranking_diagnostics(&before, &before, 0.7).unwrap();
        assert_eq!(
            (d.prediction_change_rate, d.uncertain_alteration_rate),
            (0.0, 0.0)
        );

        let after = ProbMatrix::new(vec![0.4, 0.6, 0.9, 0.1, 0.3, 0.7], 3, 2).unwrap();
        let d = ranking_diagnostics(&before, &after, 0.7).unwrap();
        assert_abs_diff_eq!(d.prediction_change_rate, 1.0 / 3.0);
        // uncertain rows: 0 (0.6) only; 0.7 is not below the threshold
        assert_eq!(d.uncertain_count, 1);
        assert_eq!(d.uncertain_alteration_rate, 1.0);

        let sure = ProbMatrix::new(vec![0.9, 0.1], 1, 2).unwrap();
        let d = ranking_diagnostics(&sure, &sure, 0.7).unwrap();
        assert!(d.uncertain_set_empty);
    }

    #[test]
    fn reliability_csv_has_one_line_per_bin() {
        let (p, y) = binary_fixture(&[0.9, 0.6], &[true, false]);
        let stats = reliability_data(&p, &y, 15).unwrap();
        let mut buf = Vec::new();
        stats.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 16);
        assert!(text.starts_with("lower,upper,count,mean_confidence,accuracy"));
    }

    proptest! {
        #[test]
        fn ece_is_permutation_invariant_and_non_negative(
            rows in prop::collection::vec((0.5f64..1.0, any::<bool>()), 10..60),
            seed in any::<u64>(),
        ) {
            let conf: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let correct: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let (p, y) = binary_fixture(&conf, &correct);
            let perm = crate::data::seeded_permutation(rows.len(), seed);
            let (e1, _) = ece(&p, &y, 15).unwrap();
            let (e2, _) = ece(&p.select_rows(&perm), &y.select(&perm), 15).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&e1));
            prop_assert!(eq_mass_ece(&p, &y, 5).unwrap() >= 0.0);
            prop_assert!(ece_kde(&p, &y).unwrap() >= 0.0);
        }
    }
}
