//! Predictive-distribution evaluation: interval coverage, sample-based CRPS,
//! sharpness, RMSE of the median prediction, the two-sample energy distance,
//! and calibration curves, aggregated over all spatiotemporal cells of a test
//! split into a [`UQReport`].
//!
//! All reported numbers are in physical (denormalized) units; samplers hand
//! back physical ensembles and the ground truth is read straight off the
//! field.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::WindowedSample;
use crate::error::{Error, Result};
use crate::inference::{predictive_summary, ConditionalSampler, PredictiveEnsemble};
use crate::rng::{indexed_seed, Stream};

/// Confidence levels reported by default: 50/70/90/95/99%.
pub const DEFAULT_LEVELS: [f64; 5] = [0.5, 0.7, 0.9, 0.95, 0.99];

/// Levels pinned into the per-cell interval CSV regardless of what the
/// report was asked for.
pub const CELL_CSV_LEVELS: [f64; 3] = [0.5, 0.7, 0.95];

// ── Point metrics ────────────────────────────────────────────────────

/// Count coordinates with `lower <= truth <= upper` (closed interval, so
/// ties at the bounds count as covered). Returns (hits, total).
pub fn coverage(lower: &[f64], upper: &[f64], truth: &[f64]) -> Result<(usize, usize)> {
    if lower.len() != upper.len() || lower.len() != truth.len() {
        return Err(Error::shape(
            "coverage",
            format!(
                "lengths differ: lower {}, upper {}, truth {}",
                lower.len(),
                upper.len(),
                truth.len()
            ),
        ));
    }
    let mut hits = 0;
    for ((&lo, &hi), &y) in lower.iter().zip(upper.iter()).zip(truth.iter()) {
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "inverted interval [{lo}, {hi}]"
            )));
        }
        if lo <= y && y <= hi {
            hits += 1;
        }
    }
    Ok((hits, truth.len()))
}

/// Mean width `upper - lower` over coordinates.
pub fn sharpness(lower: &[f64], upper: &[f64]) -> Result<f64> {
    if lower.len() != upper.len() {
        return Err(Error::shape(
            "sharpness",
            format!("lengths differ: {} vs {}", lower.len(), upper.len()),
        ));
    }
    if lower.is_empty() {
        return Err(Error::InvalidArgument("sharpness of empty interval set".into()));
    }
    let mut sum = 0.0;
    for (&lo, &hi) in lower.iter().zip(upper.iter()) {
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "inverted interval [{lo}, {hi}]"
            )));
        }
        sum += hi - lo;
    }
    Ok(sum / lower.len() as f64)
}

/// Root mean squared error over all cells of all (prediction, truth) pairs.
pub fn rmse<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for (pred, truth) in pairs {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "rmse",
                format!("lengths differ: {} vs {}", pred.len(), truth.len()),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            sq_sum += (p - t) * (p - t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("rmse over zero cells".into()));
    }
    Ok((sq_sum / count as f64).sqrt())
}

// ── CRPS ─────────────────────────────────────────────────────────────

/// Sample CRPS `(1/K)Σ|ŷ⁽ᵏ⁾−y| − (1/2K²)ΣΣ|ŷ⁽ᵏ⁾−ŷ⁽ʲ⁾|` via sorted prefix
/// sums in O(K log K). Agrees with [`crps_sample_quadratic`] to 1e-12.
pub fn crps_sample(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("crps_sample of empty sample set".into()));
    }
    let k = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let term1 = sorted.iter().map(|s| (s - y).abs()).sum::<f64>() / k as f64;
    // Σ_{i<j}(s_j − s_i) = Σ_j (2j − K − 1)·s_j for 1-indexed sorted s.
    let mut pair_sum = 0.0;
    for (idx, &s) in sorted.iter().enumerate() {
        let j = (idx + 1) as f64;
        pair_sum += (2.0 * j - k as f64 - 1.0) * s;
    }
    let term2 = pair_sum / (k as f64 * k as f64);
    Ok(term1 - term2)
}

/// The CRPS double sum exactly as written, including the zero i = j terms.
/// O(K²) reference used to pin down the fast path.
pub fn crps_sample_quadratic(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("crps_sample of empty sample set".into()));
    }
    let k = samples.len() as f64;
    let term1 = samples.iter().map(|s| (s - y).abs()).sum::<f64>() / k;
    let mut double = 0.0;
    for &a in samples {
        for &b in samples {
            double += (a - b).abs();
        }
    }
    Ok(term1 - double / (2.0 * k * k))
}

// ── Energy distance ──────────────────────────────────────────────────

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Two-sample energy distance, V-statistic over all pairs:
/// `2·E‖Z−W‖ − E‖Z−Z′‖ − E‖W−W′‖` with Z from `q` and W from `p`.
///
/// Nonnegative, zero exactly when the two multisets coincide, and equal to
/// twice the gap between the expected energy score of predicting `q` against
/// draws from `p` and the score of `p` against itself.
pub fn energy_distance(q: &PredictiveEnsemble, p: &PredictiveEnsemble) -> Result<f64> {
    if q.k() < 2 || p.k() < 2 {
        return Err(Error::InvalidArgument(format!(
            "energy_distance needs K >= 2 on both sides, got {} and {}",
            q.k(),
            p.k()
        )));
    }
    if q.state_dim() != p.state_dim() {
        return Err(Error::shape(
            "energy_distance",
            format!("state dims differ: {} vs {}", q.state_dim(), p.state_dim()),
        ));
    }
    let (kq, kp) = (q.k() as f64, p.k() as f64);
    let mut cross = 0.0;
    for zi in q.rows() {
        for wj in p.rows() {
            cross += euclidean(zi, wj);
        }
    }
    let mut within_q = 0.0;
    for (i, zi) in q.rows().enumerate() {
        for zj in q.rows().skip(i + 1) {
            within_q += euclidean(zi, zj);
        }
    }
    let mut within_p = 0.0;
    for (i, wi) in p.rows().enumerate() {
        for wj in p.rows().skip(i + 1) {
            within_p += euclidean(wi, wj);
        }
    }
    Ok(2.0 * cross / (kq * kp) - 2.0 * within_q / (kq * kq) - 2.0 * within_p / (kp * kp))
}

// ── Report ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelStat {
    pub level: f64,
    pub value: f64,
}

/// Aggregated evaluation of a sampler over a set of windows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UQReport {
    /// RMSE of the median prediction over all cells.
    pub rmse: f64,
    /// Observed coverage per nominal level.
    pub coverage: Vec<LevelStat>,
    /// Mean per-cell CRPS.
    pub crps: f64,
    /// Mean interval width per level.
    pub sharpness: Vec<LevelStat>,
    /// Number of evaluated (location, time) cells.
    pub cells: usize,
    pub windows: usize,
    pub mc_samples: usize,
}

/// One (time, cell) row of the long-format interval table backing the
/// band plots: truth, median, and the 50/70/95% central intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub t: usize,
    pub cell: usize,
    pub truth: f64,
    pub median: f64,
    pub lo50: f64,
    pub hi50: f64,
    pub lo70: f64,
    pub hi70: f64,
    pub lo95: f64,
    pub hi95: f64,
}

struct WindowEval {
    records: Vec<CellRecord>,
    sq_err: f64,
    crps_sum: f64,
    hits: Vec<usize>,
    width_sums: Vec<f64>,
    cells: usize,
}

fn merged_levels(levels: &[f64]) -> Vec<f64> {
    let mut all = levels.to_vec();
    for &pinned in &CELL_CSV_LEVELS {
        if !all.iter().any(|&l| l == pinned) {
            all.push(pinned);
        }
    }
    all
}

fn evaluate_window(
    sampler: &dyn ConditionalSampler,
    window: &WindowedSample,
    levels: &[f64],
    all_levels: &[f64],
    k: usize,
    window_seed: u64,
) -> Result<WindowEval> {
    let ens = sampler.sample_ensemble(window, k, window_seed)?;
    let summary = predictive_summary(&ens, all_levels)?;
    let truth = window.y.data();
    let m = truth.len();
    if summary.median.len() != m {
        return Err(Error::shape(
            "evaluate",
            format!(
                "sampler produced {} cells, truth has {}",
                summary.median.len(),
                m
            ),
        ));
    }

    let mut sq_err = 0.0;
    for (p, t) in summary.median.iter().zip(truth.iter()) {
        sq_err += (p - t) * (p - t);
    }
    let mut crps_sum = 0.0;
    for j in 0..m {
        crps_sum += crps_sample(&ens.column(j), truth[j])?;
    }
    let mut hits = Vec::with_capacity(levels.len());
    let mut width_sums = Vec::with_capacity(levels.len());
    for &level in levels {
        let iv = summary.interval(level).expect("level present");
        let (h, _) = coverage(&iv.lower, &iv.upper, truth)?;
        hits.push(h);
        width_sums.push(
            iv.upper
                .iter()
                .zip(iv.lower.iter())
                .map(|(u, l)| u - l)
                .sum(),
        );
    }

    let iv50 = summary.interval(0.5).expect("pinned level");
    let iv70 = summary.interval(0.7).expect("pinned level");
    let iv95 = summary.interval(0.95).expect("pinned level");
    let records = (0..m)
        .map(|j| CellRecord {
            t: window.t,
            cell: j,
            truth: truth[j],
            median: summary.median[j],
            lo50: iv50.lower[j],
            hi50: iv50.upper[j],
            lo70: iv70.lower[j],
            hi70: iv70.upper[j],
            lo95: iv95.lower[j],
            hi95: iv95.upper[j],
        })
        .collect();

    Ok(WindowEval {
        records,
        sq_err,
        crps_sum,
        hits,
        width_sums,
        cells: m,
    })
}

/// Evaluate a sampler over test windows: per window draw a K-ensemble,
/// summarize, and accumulate RMSE of the median, coverage and mean interval
/// width per level, and mean CRPS over every cell. Windows evaluate in
/// parallel with per-window derived seeds, so the report is identical
/// regardless of thread count and window order.
pub fn evaluate(
    sampler: &dyn ConditionalSampler,
    windows: &[WindowedSample],
    levels: &[f64],
    k: usize,
    seed: u64,
) -> Result<(UQReport, Vec<CellRecord>)> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("evaluate needs at least one window".into()));
    }
    let all_levels = merged_levels(levels);
    let evals: Vec<WindowEval> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            evaluate_window(
                sampler,
                w,
                levels,
                &all_levels,
                k,
                indexed_seed(seed, Stream::Inference, i as u64),
            )
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut sq_sum = 0.0;
    let mut crps_sum = 0.0;
    let mut hits = vec![0usize; levels.len()];
    let mut width_sums = vec![0.0; levels.len()];
    let mut cells = 0usize;
    for ev in evals {
        sq_sum += ev.sq_err;
        crps_sum += ev.crps_sum;
        for (acc, h) in hits.iter_mut().zip(ev.hits.iter()) {
            *acc += h;
        }
        for (acc, w) in width_sums.iter_mut().zip(ev.width_sums.iter()) {
            *acc += w;
        }
        cells += ev.cells;
        records.extend(ev.records);
    }

    let report = UQReport {
        rmse: (sq_sum / cells as f64).sqrt(),
        coverage: levels
            .iter()
            .zip(hits.iter())
            .map(|(&level, &h)| LevelStat {
                level,
                value: h as f64 / cells as f64,
            })
            .collect(),
        crps: crps_sum / cells as f64,
        sharpness: levels
            .iter()
            .zip(width_sums.iter())
            .map(|(&level, &w)| LevelStat {
                level,
                value: w / cells as f64,
            })
            .collect(),
        cells,
        windows: windows.len(),
        mc_samples: k,
    };
    Ok((report, records))
}

/// Observed coverage per nominal level: for each window draw a K-ensemble,
/// form the central interval at every level, and count truth hits over all
/// cells. Returns one `(level, observed)` pair per requested level.
pub fn calibration_curve(
    sampler: &dyn ConditionalSampler,
    windows: &[WindowedSample],
    levels: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument(
            "calibration_curve needs at least one window".into(),
        ));
    }
    let per_window: Vec<(Vec<usize>, usize)> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| -> Result<(Vec<usize>, usize)> {
            let ens = sampler.sample_ensemble(w, k, indexed_seed(seed, Stream::Inference, i as u64))?;
            let summary = predictive_summary(&ens, levels)?;
            let truth = w.y.data();
            let mut hits = Vec::with_capacity(levels.len());
            for &level in levels {
                let iv = summary.interval(level).expect("level present");
                let (h, _) = coverage(&iv.lower, &iv.upper, truth)?;
                hits.push(h);
            }
            Ok((hits, truth.len()))
        })
        .collect::<Result<_>>()?;

    let mut totals = vec![0usize; levels.len()];
    let mut cells = 0usize;
    for (hits, n) in per_window {
        for (acc, h) in totals.iter_mut().zip(hits.iter()) {
            *acc += h;
        }
        cells += n;
    }
    Ok(levels
        .iter()
        .zip(totals.iter())
        .map(|(&level, &h)| (level, h as f64 / cells as f64))
        .collect())
}

/// Calibration curve as CSV: `level,observed`.
pub fn calibration_to_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("level,observed\n");
    for (level, observed) in curve {
        out.push_str(&format!("{level},{observed}\n"));
    }
    out
}

/// Long-format per-cell interval table as CSV.
pub fn cells_to_csv(records: &[CellRecord]) -> String {
    let mut out = String::from("t,cell,truth,median,lo50,hi50,lo70,hi70,lo95,hi95\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.t, r.cell, r.truth, r.median, r.lo50, r.hi50, r.lo70, r.hi70, r.lo95, r.hi95
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        build_windows, gen_linear_gaussian_field, LinearGaussianConfig,
    };
    use crate::rng::{substream, Stream};
    use rand::Rng;

    #[test]
    fn coverage_hand_cases() {
        assert_eq!(
            coverage(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 0.5]).unwrap(),
            (2, 2)
        );
        assert_eq!(
            coverage(&[0.0, 0.0], &[0.0, 0.0], &[0.5, -0.3]).unwrap(),
            (0, 2)
        );
        assert_eq!(
            coverage(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 2.0]).unwrap(),
            (1, 2)
        );
    }

    #[test]
    fn coverage_counts_boundary_ties() {
        assert_eq!(coverage(&[1.0], &[1.0], &[1.0]).unwrap(), (1, 1));
    }

    #[test]
    fn coverage_rejects_inverted_and_mismatched() {
        assert!(coverage(&[1.0], &[0.0], &[0.5]).is_err());
        assert!(coverage(&[0.0, 0.0], &[1.0], &[0.5]).is_err());
    }

    #[test]
    fn coverage_monotone_under_widening() {
        let mut rng = substream(3, Stream::Inference);
        for _ in 0..200 {
            let n = rng.random_range(1..8usize);
            let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.0)).collect();
            let upper: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let truth: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let widen: f64 = rng.random_range(0.0..1.0);
            let wlower: Vec<f64> = lower.iter().map(|v| v - widen).collect();
            let wupper: Vec<f64> = upper.iter().map(|v| v + widen).collect();
            let (h1, _) = coverage(&lower, &upper, &truth).unwrap();
            let (h2, _) = coverage(&wlower, &wupper, &truth).unwrap();
            assert!(h2 >= h1);
        }
    }

    #[test]
    fn sharpness_hand_cases() {
        assert_eq!(sharpness(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(sharpness(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert!(sharpness(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn rmse_hand_cases() {
        let a = [3.0, 4.0];
        let b = [3.0, 4.0];
        assert_eq!(rmse([(&a[..], &b[..])]).unwrap(), 0.0);

        let pred = [0.0, 0.0];
        let truth = [3.0, 4.0];
        let got = rmse([(&pred[..], &truth[..])]).unwrap();
        assert!((got - 5.0 / 2.0_f64.sqrt()).abs() < 1e-12, "{got}");

        let p1 = [1.5, 2.5];
        let t1 = [0.5, 1.5];
        let got = rmse([(&p1[..], &t1[..])]).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crps_single_sample_is_absolute_error() {
        assert_eq!(crps_sample(&[2.5], 1.0).unwrap(), 1.5);
    }

    #[test]
    fn crps_two_sample_hand_case() {
        // (1/2)(1+1) − (1/8)(0+2+2+0) = 1 − 0.5
        let got = crps_sample(&[0.0, 2.0], 1.0).unwrap();
        assert!((got - 0.5).abs() < 1e-15, "{got}");
    }

    #[test]
    fn crps_fast_equals_quadratic() {
        let mut rng = substream(5, Stream::Inference);
        for &k in &[1usize, 2, 3, 17, 128, 512] {
            let samples: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
            let y: f64 = rng.random_range(-10.0..10.0);
            let fast = crps_sample(&samples, y).unwrap();
            let slow = crps_sample_quadratic(&samples, y).unwrap();
            assert!(
                (fast - slow).abs() < 1e-12,
                "K={k}: fast {fast} vs quadratic {slow}"
            );
        }
    }

    #[test]
    fn crps_gaussian_closed_form() {
        let mut rng = substream(6, Stream::Inference);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let got = crps_sample(&draws, 0.0).unwrap();
        let expected = 2.0 * (-0.0_f64).exp() / (2.0 * std::f64::consts::PI).sqrt()
            - 1.0 / std::f64::consts::PI.sqrt();
        assert!((got - expected).abs() < 0.005, "crps {got} vs {expected}");
    }

    #[test]
    fn crps_nonnegative_and_zero_iff_degenerate_at_truth() {
        let mut rng = substream(7, Stream::Inference);
        for _ in 0..500 {
            let k = rng.random_range(1..20usize);
            let samples: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: f64 = rng.random_range(-3.0..3.0);
            let c = crps_sample(&samples, y).unwrap();
            assert!(c >= -1e-12, "negative crps {c}");
        }
        assert_eq!(crps_sample(&[1.5, 1.5, 1.5], 1.5).unwrap(), 0.0);
        assert!(crps_sample(&[1.5, 1.5, 1.4], 1.5).unwrap() > 0.0);
    }

    fn ens_from_rows(rows: &[&[f64]]) -> PredictiveEnsemble {
        let m = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PredictiveEnsemble::new(rows.len(), m, 0, flat).unwrap()
    }

    #[test]
    fn energy_distance_zero_on_identical_multisets() {
        let a = ens_from_rows(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.0]]);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn energy_distance_point_masses() {
        let zeros = ens_from_rows(&[&[0.0], &[0.0]]);
        let ones = ens_from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(energy_distance(&zeros, &ones).unwrap(), 2.0);
    }

    #[test]
    fn energy_distance_nonnegative_and_symmetric() {
        let mut rng = substream(8, Stream::Inference);
        for _ in 0..300 {
            let m = rng.random_range(1..4usize);
            let ka = rng.random_range(2..12usize);
            let kb = rng.random_range(2..12usize);
            let a = PredictiveEnsemble::new(
                ka,
                m,
                0,
                (0..ka * m).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let b = PredictiveEnsemble::new(
                kb,
                m,
                0,
                (0..kb * m).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let d1 = energy_distance(&a, &b).unwrap();
            let d2 = energy_distance(&b, &a).unwrap();
            assert!(d1 >= -1e-12, "negative energy distance {d1}");
            assert!((d1 - d2).abs() < 1e-12, "asymmetry {d1} vs {d2}");
        }
    }

    #[test]
    fn energy_distance_near_zero_for_same_distribution() {
        let mut rng = substream(9, Stream::Inference);
        let k = 10_000;
        let a = PredictiveEnsemble::new(
            k,
            1,
            0,
            (0..k).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
        )
        .unwrap();
        let b = PredictiveEnsemble::new(
            k,
            1,
            0,
            (0..k).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
        )
        .unwrap();
        let d = energy_distance(&a, &b).unwrap();
        assert!(d < 0.02, "energy distance {d}");
    }

    /// Sampler producing intervals so wide every truth is inside.
    struct HugeSampler {
        m: usize,
    }

    impl ConditionalSampler for HugeSampler {
        fn state_dim(&self) -> usize {
            self.m
        }

        fn sample_ensemble(
            &self,
            window: &WindowedSample,
            k: usize,
            _seed: u64,
        ) -> Result<PredictiveEnsemble> {
            let mut samples = Vec::with_capacity(k * self.m);
            for i in 0..k {
                let v = if i % 2 == 0 { -1e9 } else { 1e9 };
                samples.extend(std::iter::repeat(v).take(self.m));
            }
            PredictiveEnsemble::new(k, self.m, window.t, samples)
        }
    }

    fn oracle_fixture(
        m: usize,
        t_len: usize,
        noise: f64,
    ) -> (Vec<WindowedSample>, crate::data::LinearGaussianOracle) {
        let cfg = LinearGaussianConfig {
            t_len,
            m,
            p_latent: 3,
            ar_coeff: 0.6,
            noise_scale: noise,
        };
        let (field, oracle) =
            gen_linear_gaussian_field(&cfg, &mut substream(31, Stream::Generator)).unwrap();
        let windows = build_windows(&field, &[0, 1, 2], 4).unwrap();
        (windows, oracle)
    }

    #[test]
    fn huge_intervals_cover_everything() {
        let (windows, _) = oracle_fixture(6, 30, 0.3);
        let sampler = HugeSampler { m: 6 };
        let curve = calibration_curve(&sampler, &windows[..10], &[0.5, 0.9], 50, 1).unwrap();
        for (_, observed) in curve {
            assert_eq!(observed, 1.0);
        }
    }

    #[test]
    fn oracle_sampler_is_well_calibrated() {
        // 200 cells x 100 windows = 2e4 cells. The three latent-exposing
        // cells are conditionally deterministic and count as covered ties,
        // inflating observed coverage by at most (3/200)(1-alpha).
        let (windows, oracle) = oracle_fixture(200, 104, 0.5);
        assert!(windows.len() >= 100);
        let curve = calibration_curve(
            &oracle,
            &windows[..100],
            &DEFAULT_LEVELS,
            200,
            7,
        )
        .unwrap();
        for (level, observed) in curve {
            assert!(
                (observed - level).abs() < 0.02,
                "level {level}: observed {observed}"
            );
        }
    }

    #[test]
    fn evaluate_aggregates_and_is_order_invariant() {
        let (windows, oracle) = oracle_fixture(12, 60, 0.4);
        let (report, records) = evaluate(&oracle, &windows[..20], &DEFAULT_LEVELS, 64, 3).unwrap();
        assert_eq!(report.cells, 20 * 12);
        assert_eq!(report.windows, 20);
        assert_eq!(records.len(), 20 * 12);
        assert!(report.rmse > 0.0);
        assert!(report.crps > 0.0);
        for stat in &report.coverage {
            assert!((0.0..=1.0).contains(&stat.value));
        }
        for stat in &report.sharpness {
            assert!(stat.value >= 0.0);
        }
        // Same windows, same seeds: the parallel evaluation is reproducible.
        let (report2, _) = evaluate(&oracle, &windows[..20], &DEFAULT_LEVELS, 64, 3).unwrap();
        assert_eq!(report, report2);
    }

    #[test]
    fn csv_emitters_have_expected_headers() {
        let curve = vec![(0.5, 0.52), (0.9, 0.88)];
        let csv = calibration_to_csv(&curve);
        assert!(csv.starts_with("level,observed\n"));
        assert_eq!(csv.lines().count(), 3);

        let rec = CellRecord {
            t: 4,
            cell: 1,
            truth: 0.5,
            median: 0.4,
            lo50: 0.3,
            hi50: 0.5,
            lo70: 0.2,
            hi70: 0.6,
            lo95: 0.1,
            hi95: 0.7,
        };
        let csv = cells_to_csv(&[rec]);
        assert!(csv.starts_with("t,cell,truth,median,lo50,hi50,lo70,hi70,lo95,hi95\n"));
        assert!(csv.contains("4,1,0.5,0.4,"));
    }
}
