//! Monte Carlo inference: draw K noise realizations, push each through the
//! network, and treat the K outputs as an empirical predictive distribution.
//! Means, variances, medians, and central prediction intervals are plug-in
//! estimates from that sample.
//!
//! Quantiles use the order-statistic definition `inf{t : F̂(t) >= α}`, i.e.
//! the `ceil(α·K)`-th order statistic with no interpolation, which is the
//! estimator whose convergence to the model's conditional quantile is
//! guaranteed as K grows.


use crate::data::{LinearGaussianOracle, NormStats, WindowedSample};
use crate::error::{Error, Result};
use crate::model::{model_forward_value, ModelParams, NoiseDraw};
use crate::rng::{indexed_substream, Stream};

/// Ensemble export file magic.
pub const ENSEMBLE_MAGIC: &[u8; 4] = b"UQPE";

/// Reporting below this many Monte Carlo samples degrades quantile
/// estimates; callers surface a warning rather than an error.
pub const MC_SAMPLE_GUIDELINE: usize = 100;

// ── Predictive ensemble ──────────────────────────────────────────────

/// K decoded states for one input window, rows in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveEnsemble {
    samples: Vec<f64>,
    k: usize,
    m: usize,
    /// Target time index of the originating window.
    pub window_t: usize,
}

impl PredictiveEnsemble {
    pub fn new(k: usize, m: usize, window_t: usize, samples: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("ensemble needs K >= 1".into()));
        }
        if samples.len() != k * m {
            return Err(Error::shape(
                "ensemble",
                format!("{k}x{m} ensemble needs {} values, got {}", k * m, samples.len()),
            ));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("ensemble holds non-finite values".into()));
        }
        Ok(PredictiveEnsemble {
            samples,
            k,
            m,
            window_t,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.m)
    }

    /// Copy of coordinate `j` across all K draws.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.k).map(|i| self.samples[i * self.m + j]).collect()
    }

    /// Apply a per-cell map to every row (used to return to physical units).
    pub fn map_rows(mut self, f: impl Fn(usize, f64) -> f64) -> Self {
        for row in self.samples.chunks_exact_mut(self.m) {
            for (cell, v) in row.iter_mut().enumerate() {
                *v = f(cell, *v);
            }
        }
        self
    }
}

/// Draw K independent noise vectors and run K forward passes. Window and
/// outputs are in the model's (normalized) units. Each draw's generator is
/// derived from (seed, draw index), so the result is identical no matter the
/// execution order.
pub fn mc_sample(
    params: &ModelParams,
    window: &crate::tensor::Tensor,
    k: usize,
    seed: u64,
) -> Result<PredictiveEnsemble> {
    if k == 0 {
        return Err(Error::InvalidArgument("mc_sample needs K >= 1".into()));
    }
    let config = params.config();
    let mut samples = Vec::with_capacity(k * config.state_dim);
    for i in 0..k {
        let mut rng = indexed_substream(seed, Stream::Inference, i as u64);
        let noise = NoiseDraw::standard_normal(config.noise_dim, &mut rng, i as u64);
        let out = model_forward_value(params, window, &noise)?;
        samples.extend_from_slice(out.data());
    }
    PredictiveEnsemble::new(k, config.state_dim, 0, samples)
}

// ── Quantiles ────────────────────────────────────────────────────────

fn quantile_rank(n: usize, alpha: f64) -> usize {
    // ceil(alpha * n), with a snap for products that are integers in exact
    // arithmetic but land just above in binary (0.05 * 200 = 10.000000...2).
    let t = alpha * n as f64;
    let r = t.round();
    let k = if (t - r).abs() < 1e-9 { r } else { t.ceil() };
    (k as usize).clamp(1, n)
}

fn quantile_of_sorted(sorted: &[f64], alpha: f64) -> f64 {
    sorted[quantile_rank(sorted.len(), alpha) - 1]
}

/// Empirical α-quantile `inf{t : F̂(t) >= α}`: the `ceil(α·n)`-th order
/// statistic (1-indexed), no interpolation.
pub fn empirical_quantile(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empirical_quantile of empty input".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile level {alpha} outside (0, 1)"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(quantile_of_sorted(&sorted, alpha))
}

// ── Predictive summary ───────────────────────────────────────────────

/// Central interval at one confidence level, coordinate-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelInterval {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Plug-in moments and central intervals of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub mean: Vec<f64>,
    /// Unbiased (K-1 denominator) per-coordinate variance.
    pub variance: Vec<f64>,
    /// The α = 0.5 quantile, reported as the point prediction.
    pub median: Vec<f64>,
    pub intervals: Vec<LevelInterval>,
}

impl PredictiveSummary {
    pub fn interval(&self, level: f64) -> Option<&LevelInterval> {
        self.intervals.iter().find(|iv| iv.level == level)
    }
}

/// Mean, unbiased variance, median, and the central interval
/// `[q_(1-α)/2, q_(1+α)/2]` per coordinate for every requested level.
/// Requires K >= 2 since the summary always carries a variance.
pub fn predictive_summary(
    ens: &PredictiveEnsemble,
    levels: &[f64],
) -> Result<PredictiveSummary> {
    if ens.k() < 2 {
        return Err(Error::InvalidArgument(
            "predictive_summary needs K >= 2 for the variance".into(),
        ));
    }
    for &level in levels {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "interval level {level} outside (0, 1)"
            )));
        }
    }
    let (k, m) = (ens.k(), ens.state_dim());
    let mut mean = vec![0.0; m];
    let mut variance = vec![0.0; m];
    let mut median = vec![0.0; m];
    let mut intervals: Vec<LevelInterval> = levels
        .iter()
        .map(|&level| LevelInterval {
            level,
            lower: vec![0.0; m],
            upper: vec![0.0; m],
        })
        .collect();

    let mut column = vec![0.0; k];
    for j in 0..m {
        for i in 0..k {
            column[i] = ens.row(i)[j];
        }
        // Moments over the sorted column: the summation order then does not
        // depend on the draw order, so permuting rows leaves the summary
        // bit-identical.
        column.sort_unstable_by(f64::total_cmp);
        let mu = column.iter().sum::<f64>() / k as f64;
        mean[j] = mu;
        variance[j] = column.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (k - 1) as f64;
        median[j] = quantile_of_sorted(&column, 0.5);
        for iv in intervals.iter_mut() {
            iv.lower[j] = quantile_of_sorted(&column, (1.0 - iv.level) / 2.0);
            iv.upper[j] = quantile_of_sorted(&column, (1.0 + iv.level) / 2.0);
        }
    }
    Ok(PredictiveSummary {
        mean,
        variance,
        median,
        intervals,
    })
}

// ── Conditional samplers ─────────────────────────────────────────────

/// Anything that can produce a predictive ensemble for a physical-units
/// window: the trained network, or an exact synthetic oracle standing in for
/// it in calibration tests.
pub trait ConditionalSampler: Sync {
    fn state_dim(&self) -> usize;

    /// K samples of the state for this window, in physical units,
    /// deterministic given `seed`.
    fn sample_ensemble(&self, window: &WindowedSample, k: usize, seed: u64)
        -> Result<PredictiveEnsemble>;
}

/// The trained network as a sampler over physical units: normalizes the
/// sensor window, runs `mc_sample`, and denormalizes the decoded states.
pub struct ModelSampler<'a> {
    params: &'a ModelParams,
    stats: &'a NormStats,
    sensors: &'a [usize],
}

impl<'a> ModelSampler<'a> {
    pub fn new(params: &'a ModelParams, stats: &'a NormStats, sensors: &'a [usize]) -> Result<Self> {
        if params.config().sensors != sensors.len() {
            return Err(Error::Config(format!(
                "model expects {} sensors, got {}",
                params.config().sensors,
                sensors.len()
            )));
        }
        if params.config().state_dim != stats.cells() {
            return Err(Error::Config(format!(
                "model state dim {} does not match normalization over {} cells",
                params.config().state_dim,
                stats.cells()
            )));
        }
        Ok(ModelSampler {
            params,
            stats,
            sensors,
        })
    }
}

impl ConditionalSampler for ModelSampler<'_> {
    fn state_dim(&self) -> usize {
        self.params.config().state_dim
    }

    fn sample_ensemble(
        &self,
        window: &WindowedSample,
        k: usize,
        seed: u64,
    ) -> Result<PredictiveEnsemble> {
        let p = self.sensors.len();
        let mut x = window.x.clone();
        for (flat, v) in x.data_mut().iter_mut().enumerate() {
            let cell = self.sensors[flat % p];
            *v = self.stats.normalize_value(cell, *v);
        }
        let ens = mc_sample(self.params, &x, k, seed)?;
        let mut ens = ens.map_rows(|cell, v| self.stats.denormalize_value(cell, v));
        ens.window_t = window.t;
        Ok(ens)
    }
}

impl ConditionalSampler for LinearGaussianOracle {
    fn state_dim(&self) -> usize {
        LinearGaussianOracle::state_dim(self)
    }

    fn sample_ensemble(
        &self,
        window: &WindowedSample,
        k: usize,
        seed: u64,
    ) -> Result<PredictiveEnsemble> {
        if k == 0 {
            return Err(Error::InvalidArgument("sample_ensemble needs K >= 1".into()));
        }
        let z = self.latent_from_window(window)?;
        let m = LinearGaussianOracle::state_dim(self);
        let mut samples = Vec::with_capacity(k * m);
        for i in 0..k {
            let mut rng = indexed_substream(seed, Stream::Inference, i as u64);
            samples.extend_from_slice(&self.sample_state(&z, &mut rng));
        }
        PredictiveEnsemble::new(k, m, window.t, samples)
    }
}

// ── Ensemble export ──────────────────────────────────────────────────

/// Binary export: magic `UQPE`, u64 K, u64 m, row-major f64, little-endian.
pub fn ensemble_to_bytes(ens: &PredictiveEnsemble) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + ens.samples.len() * 8);
    buf.extend_from_slice(ENSEMBLE_MAGIC);
    buf.extend_from_slice(&(ens.k as u64).to_le_bytes());
    buf.extend_from_slice(&(ens.m as u64).to_le_bytes());
    for &v in &ens.samples {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn ensemble_from_bytes(bytes: &[u8], origin: &str) -> Result<PredictiveEnsemble> {
    let fmt = |detail: String| Error::Format {
        path: origin.into(),
        detail,
    };
    if bytes.len() < 20 {
        return Err(fmt("file shorter than the 20-byte header".into()));
    }
    if &bytes[0..4] != ENSEMBLE_MAGIC {
        return Err(fmt("bad magic, expected UQPE".into()));
    }
    let k = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let m = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = 20 + k * m * 8;
    if bytes.len() != expected {
        return Err(fmt(format!(
            "expected {expected} bytes for K={k}, m={m}, found {}",
            bytes.len()
        )));
    }
    let samples = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PredictiveEnsemble::new(k, m, 0, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation, ModelConfig, TemporalUnitKind};
    use crate::rng::{substream, Stream};
    use crate::tensor::Tensor;
    use rand::Rng;

    fn small_config(noise_dim: usize) -> ModelConfig {
        ModelConfig {
            lag: 3,
            sensors: 2,
            state_dim: 4,
            noise_dim,
            hidden_dim: 8,
            temporal_unit: TemporalUnitKind::Gru,
            decoder_widths: vec![8],
            decoder_activation: Activation::Tanh,
        }
    }

    fn small_window() -> Tensor {
        Tensor::from_vec(vec![3, 2], vec![0.1, 0.4, -0.3, 0.9, 0.2, -0.8]).unwrap()
    }

    #[test]
    fn quantile_inf_definition_hand_case() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&[4.0, 3.0, 2.0, 1.0], 0.5).unwrap(), 2.0);
    }

    #[test]
    fn quantile_upper_tail_hits_max() {
        assert_eq!(empirical_quantile(&[5.0, 1.0, 9.0], 0.99).unwrap(), 9.0);
    }

    #[test]
    fn quantile_rejects_bad_inputs() {
        assert!(empirical_quantile(&[], 0.5).is_err());
        assert!(empirical_quantile(&[1.0], 0.0).is_err());
        assert!(empirical_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn quantile_matches_standard_normal_tails() {
        let mut rng = substream(42, Stream::Inference);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let hi = empirical_quantile(&draws, 0.95).unwrap();
        let lo = empirical_quantile(&draws, 0.05).unwrap();
        assert!((hi - 1.645).abs() < 0.02, "q95 {hi}");
        assert!((lo + 1.645).abs() < 0.02, "q05 {lo}");
    }

    #[test]
    fn quantile_monotone_in_alpha() {
        let mut rng = substream(43, Stream::Inference);
        for _ in 0..1000 {
            let n = rng.random_range(1..40usize);
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a: f64 = rng.random_range(0.01..0.99);
            let b: f64 = rng.random_range(0.01..0.99);
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let qa = empirical_quantile(&values, a).unwrap();
            let qb = empirical_quantile(&values, b).unwrap();
            assert!(qa <= qb, "q({a})={qa} > q({b})={qb} on {values:?}");
        }
    }

    #[test]
    fn quantile_rank_snaps_binary_near_integers() {
        // 0.05 * 200 lands just above 10.0 in f64; the exact product is 10.
        assert_eq!(quantile_rank(200, 0.05), 10);
        assert_eq!(quantile_rank(100, 0.95), 95);
        assert_eq!(quantile_rank(4, 0.5), 2);
        assert_eq!(quantile_rank(500, 0.025), 13);
    }

    #[test]
    fn summary_of_constant_ensemble_is_degenerate() {
        let ens = PredictiveEnsemble::new(5, 2, 0, vec![3.0, -1.0].repeat(5)).unwrap();
        let s = predictive_summary(&ens, &[0.5, 0.95]).unwrap();
        assert_eq!(s.mean, vec![3.0, -1.0]);
        assert_eq!(s.variance, vec![0.0, 0.0]);
        for iv in &s.intervals {
            assert_eq!(iv.lower, iv.upper);
        }
    }

    #[test]
    fn summary_hand_case_half_level() {
        // Coordinate samples (0,1,2,3): q_0.25 = 1st = 0, q_0.75 = 3rd = 2.
        let ens = PredictiveEnsemble::new(4, 1, 0, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = predictive_summary(&ens, &[0.5]).unwrap();
        let iv = s.interval(0.5).unwrap();
        assert_eq!(iv.lower, vec![0.0]);
        assert_eq!(iv.upper, vec![2.0]);
    }

    #[test]
    fn intervals_nest_across_levels() {
        let mut rng = substream(44, Stream::Inference);
        let samples: Vec<f64> = (0..200).map(|_| rng.random_range(-4.0..4.0)).collect();
        let ens = PredictiveEnsemble::new(100, 2, 0, samples).unwrap();
        let s = predictive_summary(&ens, &[0.5, 0.95]).unwrap();
        let narrow = s.interval(0.5).unwrap();
        let wide = s.interval(0.95).unwrap();
        for j in 0..2 {
            assert!(wide.lower[j] <= narrow.lower[j]);
            assert!(narrow.lower[j] <= s.median[j]);
            assert!(s.median[j] <= narrow.upper[j]);
            assert!(narrow.upper[j] <= wide.upper[j]);
        }
    }

    #[test]
    fn summary_requires_two_draws() {
        let ens = PredictiveEnsemble::new(1, 2, 0, vec![1.0, 2.0]).unwrap();
        assert!(predictive_summary(&ens, &[0.5]).is_err());
    }

    #[test]
    fn summary_is_permutation_invariant() {
        use rand::seq::SliceRandom;
        let mut rng = substream(45, Stream::Inference);
        let k = 40;
        let m = 3;
        let samples: Vec<f64> = (0..k * m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ens = PredictiveEnsemble::new(k, m, 0, samples.clone()).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..k).map(|i| ens.row(i).to_vec()).collect();
        rows.shuffle(&mut rng);
        let permuted =
            PredictiveEnsemble::new(k, m, 0, rows.into_iter().flatten().collect()).unwrap();
        let a = predictive_summary(&ens, &[0.5, 0.9]).unwrap();
        let b = predictive_summary(&permuted, &[0.5, 0.9]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_model_yields_identical_rows() {
        let config = small_config(0);
        let params = init_params(&config, &mut substream(7, Stream::ParamInit)).unwrap();
        let ens = mc_sample(&params, &small_window(), 5, 99).unwrap();
        let first = ens.row(0).to_vec();
        for i in 1..5 {
            assert_eq!(ens.row(i), first.as_slice());
        }
    }

    #[test]
    fn k_one_equals_single_forward_and_k_zero_errors() {
        let config = small_config(3);
        let params = init_params(&config, &mut substream(7, Stream::ParamInit)).unwrap();
        assert!(mc_sample(&params, &small_window(), 0, 1).is_err());
        let ens = mc_sample(&params, &small_window(), 1, 1).unwrap();
        assert_eq!(ens.k(), 1);
        assert_eq!(ens.state_dim(), 4);
    }

    #[test]
    fn mc_sample_deterministic_per_seed() {
        let config = small_config(3);
        let params = init_params(&config, &mut substream(7, Stream::ParamInit)).unwrap();
        let a = mc_sample(&params, &small_window(), 16, 5).unwrap();
        let b = mc_sample(&params, &small_window(), 16, 5).unwrap();
        assert_eq!(a, b);
        let c = mc_sample(&params, &small_window(), 16, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ensemble_mean_matches_forward_average() {
        let config = small_config(3);
        let params = init_params(&config, &mut substream(8, Stream::ParamInit)).unwrap();
        let ens = mc_sample(&params, &small_window(), 32, 2).unwrap();
        let s = predictive_summary(&ens, &[0.5]).unwrap();
        let mut manual = vec![0.0; 4];
        for row in ens.rows() {
            for (j, &v) in row.iter().enumerate() {
                manual[j] += v;
            }
        }
        for v in manual.iter_mut() {
            *v /= 32.0;
        }
        // The summary sums each coordinate in sorted order, so agreement with
        // the draw-order average is exact up to float reassociation.
        for (a, b) in s.mean.iter().zip(manual.iter()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn plug_in_quantile_tightens_with_more_draws() {
        // For a fixed sampler and window, |q̂_K − q̂_10K| shrinks as K grows.
        let config = small_config(4);
        let params = init_params(&config, &mut substream(9, Stream::ParamInit)).unwrap();
        let mut rng = substream(10, Stream::Inference);
        let mut err_small = Vec::new();
        let mut err_large = Vec::new();
        for w in 0..20 {
            let data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let window = Tensor::from_vec(vec![3, 2], data).unwrap();
            let reference = mc_sample(&params, &window, 10_000, 1000 + w).unwrap();
            let q_ref = empirical_quantile(&reference.column(0), 0.95).unwrap();
            let small = mc_sample(&params, &window, 100, 2000 + w).unwrap();
            let large = mc_sample(&params, &window, 1000, 3000 + w).unwrap();
            err_small.push((empirical_quantile(&small.column(0), 0.95).unwrap() - q_ref).abs());
            err_large.push((empirical_quantile(&large.column(0), 0.95).unwrap() - q_ref).abs());
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_unstable_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let ms = median(&mut err_small);
        let ml = median(&mut err_large);
        assert!(ms > ml, "median error K=100 ({ms}) should exceed K=1000 ({ml})");
    }

    #[test]
    fn ensemble_bytes_round_trip() {
        let ens =
            PredictiveEnsemble::new(3, 2, 7, vec![1.0, -2.0, 0.5, 0.25, -0.125, 9.0]).unwrap();
        let bytes = ensemble_to_bytes(&ens);
        assert_eq!(bytes.len(), 20 + 6 * 8);
        let back = ensemble_from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.k(), 3);
        assert_eq!(back.state_dim(), 2);
        assert_eq!(back.row(2), &[-0.125, 9.0]);
    }
}
