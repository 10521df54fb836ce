//! Spatiotemporal field data: synthetic generators with known conditional
//! laws, sensor selection, lag-window construction, min-max normalization
//! fitted on the training split, window splits, and field file I/O.
//!
//! Two synthetic families cover the two uncertainty regimes. The traveling
//! wave field is smooth and noiseless, so the target is a deterministic
//! function of the sensor history and predictive spread should collapse with
//! training. The linear-Gaussian field carries heteroscedastic observation
//! noise and exposes the exact conditional law of the state given the sensor
//! window, which makes calibration claims checkable against ground truth.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Field file magic.
pub const FIELD_MAGIC: &[u8; 4] = b"UQSF";
/// Field file format version.
pub const FIELD_VERSION: u32 = 1;

// ── Field ────────────────────────────────────────────────────────────

/// A T×m field, time-major: row t holds all m cells at time t.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    t_len: usize,
    m: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(t_len: usize, m: usize) -> Self {
        Field {
            t_len,
            m,
            data: vec![0.0; t_len * m],
        }
    }

    pub fn from_vec(t_len: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != t_len * m {
            return Err(Error::shape(
                "field",
                format!("{}x{} field needs {} values, got {}", t_len, m, t_len * m, data.len()),
            ));
        }
        Ok(Field { t_len, m, data })
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.m..(t + 1) * self.m]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.m..(t + 1) * self.m]
    }

    pub fn get(&self, t: usize, cell: usize) -> f64 {
        self.data[t * self.m + cell]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Root mean square over all cells and times.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self.data.iter().map(|v| v * v).sum();
        (s / self.data.len() as f64).sqrt()
    }
}

// ── Windowed samples ─────────────────────────────────────────────────

/// One training/evaluation pair in physical units: an L×p window of sensor
/// readings (rows oldest first) and the m-dimensional state at the window's
/// final time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub x: Tensor,
    pub y: Tensor,
    pub t: usize,
}

/// Slide a length-`lag` window over the field: one sample per final time
/// `t in [lag-1, T-1]`, so `T - lag + 1` samples in total.
pub fn build_windows(field: &Field, sensors: &[usize], lag: usize) -> Result<Vec<WindowedSample>> {
    if lag == 0 {
        return Err(Error::InvalidArgument("lag must be positive".into()));
    }
    if field.t_len < lag {
        return Err(Error::InvalidArgument(format!(
            "field has {} steps, lag {} needs at least that many",
            field.t_len, lag
        )));
    }
    for &s in sensors {
        if s >= field.m {
            return Err(Error::InvalidArgument(format!(
                "sensor index {} out of range for {} cells",
                s, field.m
            )));
        }
    }
    let p = sensors.len();
    let mut out = Vec::with_capacity(field.t_len - lag + 1);
    for t in (lag - 1)..field.t_len {
        let mut x = Vec::with_capacity(lag * p);
        for r in 0..lag {
            let row = field.row(t + 1 - lag + r);
            for &s in sensors {
                x.push(row[s]);
            }
        }
        out.push(WindowedSample {
            x: Tensor::from_vec(vec![lag, p], x)?,
            y: Tensor::vector(field.row(t)),
            t,
        });
    }
    Ok(out)
}

// ── Sensor selection ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum SensorMode {
    /// p distinct cells drawn with the seeded generator.
    Random,
    /// `round(i * m / p)` for `i in 0..p`.
    UniformSpaced,
    /// Caller-provided cell indices.
    Fixed(Vec<usize>),
}

pub fn select_sensors<R: Rng>(
    m: usize,
    p: usize,
    mode: &SensorMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if p == 0 {
        return Err(Error::InvalidArgument("sensor count must be positive".into()));
    }
    if p > m {
        return Err(Error::InvalidArgument(format!(
            "cannot place {p} sensors on {m} cells"
        )));
    }
    match mode {
        SensorMode::Random => {
            let mut cells: Vec<usize> = (0..m).collect();
            cells.shuffle(rng);
            cells.truncate(p);
            Ok(cells)
        }
        SensorMode::UniformSpaced => Ok((0..p)
            .map(|i| ((i * m) as f64 / p as f64).round() as usize)
            .collect()),
        SensorMode::Fixed(list) => {
            if list.len() != p {
                return Err(Error::InvalidArgument(format!(
                    "fixed sensor list has {} entries, expected {p}",
                    list.len()
                )));
            }
            let mut seen = vec![false; m];
            for &s in list {
                if s >= m {
                    return Err(Error::InvalidArgument(format!(
                        "sensor index {s} out of range for {m} cells"
                    )));
                }
                if seen[s] {
                    return Err(Error::InvalidArgument(format!("duplicate sensor index {s}")));
                }
                seen[s] = true;
            }
            Ok(list.clone())
        }
    }
}

// ── Splits ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Random,
    TemporalContiguous,
}

/// Assign each window index to train/val/test. Fractions must sum to 1
/// (tolerance 1e-9). Random mode shuffles indices with the seeded generator;
/// temporal mode assigns prefix/middle/suffix.
pub fn split_windows<R: Rng>(
    count: usize,
    fractions: (f64, f64, f64),
    mode: SplitMode,
    rng: &mut R,
) -> Result<Vec<Split>> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::InvalidArgument("split fractions must be nonnegative".into()));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions sum to {}, expected 1",
            ft + fv + fe
        )));
    }
    let n_train = (ft * count as f64).round() as usize;
    let n_val = ((fv * count as f64).round() as usize).min(count - n_train.min(count));
    let n_train = n_train.min(count);
    let mut order: Vec<usize> = (0..count).collect();
    if mode == SplitMode::Random {
        order.shuffle(rng);
    }
    let mut splits = vec![Split::Test; count];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

// ── Normalization ────────────────────────────────────────────────────

/// Per-cell min and max, fitted on rows covered by training windows only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl NormStats {
    /// Fit over the rows where `mask` is true.
    pub fn from_masked_rows(field: &Field, mask: &[bool]) -> Result<Self> {
        if mask.len() != field.t_len {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not match {} rows",
                mask.len(),
                field.t_len
            )));
        }
        let mut lo = vec![f64::INFINITY; field.m];
        let mut hi = vec![f64::NEG_INFINITY; field.m];
        let mut any = false;
        for (t, &keep) in mask.iter().enumerate() {
            if !keep {
                continue;
            }
            any = true;
            for (cell, &v) in field.row(t).iter().enumerate() {
                lo[cell] = lo[cell].min(v);
                hi[cell] = hi[cell].max(v);
            }
        }
        if !any {
            return Err(Error::InvalidArgument(
                "cannot fit normalization: no training rows".into(),
            ));
        }
        Ok(NormStats { lo, hi })
    }

    pub fn cells(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Map a physical value of `cell` to [0,1] on the training range.
    /// Constant cells map to 0.5. Values outside the training range land
    /// outside [0,1]; that is intended for test-time extremes.
    pub fn normalize_value(&self, cell: usize, v: f64) -> f64 {
        let (lo, hi) = (self.lo[cell], self.hi[cell]);
        if hi == lo {
            0.5
        } else {
            (v - lo) / (hi - lo)
        }
    }

    /// Exact inverse of [`NormStats::normalize_value`] on non-constant cells;
    /// constant cells return their training value.
    pub fn denormalize_value(&self, cell: usize, v: f64) -> f64 {
        let (lo, hi) = (self.lo[cell], self.hi[cell]);
        if hi == lo {
            lo
        } else {
            lo + v * (hi - lo)
        }
    }

    /// Denormalize a full state row in place.
    pub fn denormalize_row(&self, row: &mut [f64]) {
        for (cell, v) in row.iter_mut().enumerate() {
            *v = self.denormalize_value(cell, *v);
        }
    }

    /// Width of the physical interval per unit of normalized width.
    pub fn cell_range(&self, cell: usize) -> f64 {
        self.hi[cell] - self.lo[cell]
    }
}

// ── Dataset ──────────────────────────────────────────────────────────

/// A field plus everything the pipeline derives from it: sensor placement,
/// lag, per-window split assignment, and normalization statistics fitted on
/// rows covered by training windows only.
#[derive(Debug, Clone)]
pub struct FieldDataset {
    field: Field,
    sensors: Vec<usize>,
    lag: usize,
    stats: NormStats,
    splits: Vec<Split>,
    provenance: String,
}

impl FieldDataset {
    pub fn new(
        field: Field,
        sensors: Vec<usize>,
        lag: usize,
        splits: Vec<Split>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if lag == 0 || field.t_len < lag {
            return Err(Error::InvalidArgument(format!(
                "lag {} invalid for field with {} steps",
                lag, field.t_len
            )));
        }
        let window_count = field.t_len - lag + 1;
        if splits.len() != window_count {
            return Err(Error::InvalidArgument(format!(
                "split assignment covers {} windows, expected {}",
                splits.len(),
                window_count
            )));
        }
        let mut seen = vec![false; field.m];
        for &s in &sensors {
            if s >= field.m {
                return Err(Error::InvalidArgument(format!(
                    "sensor index {} out of range for {} cells",
                    s, field.m
                )));
            }
            if seen[s] {
                return Err(Error::InvalidArgument(format!("duplicate sensor index {s}")));
            }
            seen[s] = true;
        }
        // Rows touched by any training window: window i covers times i..i+lag-1.
        let mut mask = vec![false; field.t_len];
        for (i, split) in splits.iter().enumerate() {
            if *split == Split::Train {
                for row in mask.iter_mut().skip(i).take(lag) {
                    *row = true;
                }
            }
        }
        let stats = NormStats::from_masked_rows(&field, &mask)?;
        Ok(FieldDataset {
            field,
            sensors,
            lag,
            stats,
            splits,
            provenance: provenance.into(),
        })
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn sensors(&self) -> &[usize] {
        &self.sensors
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn window_count(&self) -> usize {
        self.splits.len()
    }

    /// Window `i` in physical units; the target time is `i + lag - 1`.
    pub fn window(&self, i: usize) -> WindowedSample {
        let t = i + self.lag - 1;
        let p = self.sensors.len();
        let mut x = Vec::with_capacity(self.lag * p);
        for r in 0..self.lag {
            let row = self.field.row(i + r);
            for &s in &self.sensors {
                x.push(row[s]);
            }
        }
        WindowedSample {
            x: Tensor::from_vec(vec![self.lag, p], x).expect("window shape"),
            y: Tensor::vector(self.field.row(t)),
            t,
        }
    }

    /// Window `i` with sensor readings and target mapped to normalized units.
    pub fn window_normalized(&self, i: usize) -> WindowedSample {
        let mut sample = self.window(i);
        let p = self.sensors.len();
        for (flat, v) in sample.x.data_mut().iter_mut().enumerate() {
            let cell = self.sensors[flat % p];
            *v = self.stats.normalize_value(cell, *v);
        }
        for (cell, v) in sample.y.data_mut().iter_mut().enumerate() {
            *v = self.stats.normalize_value(cell, *v);
        }
        sample
    }

    /// Indices of windows in the given split, ascending.
    pub fn windows_in(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

// ── Wave field generator ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    OneDim(usize),
    TwoDim(usize, usize),
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        match self {
            GridSpec::OneDim(n) => *n,
            GridSpec::TwoDim(nx, ny) => nx * ny,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveFieldConfig {
    pub t_len: usize,
    pub grid: GridSpec,
    pub n_modes: usize,
    /// Total amplitude bound; each mode contributes `amplitude / n_modes`.
    pub amplitude: f64,
}

/// Superposition of `n_modes` traveling sinusoids with random integer
/// wavevectors, per-step frequencies, and phases. Noiseless and smooth: the
/// state is a deterministic function of a sufficiently long sensor history.
pub fn gen_wave_field<R: Rng>(cfg: &WaveFieldConfig, rng: &mut R) -> Result<Field> {
    if cfg.t_len == 0 || cfg.grid.cells() == 0 {
        return Err(Error::InvalidArgument("wave field needs t_len, grid >= 1".into()));
    }
    let m = cfg.grid.cells();
    let mut field = Field::zeros(cfg.t_len, m);
    if cfg.n_modes == 0 {
        return Ok(field);
    }
    let amp = cfg.amplitude / cfg.n_modes as f64;
    struct Mode {
        kx: f64,
        ky: f64,
        omega: f64,
        phase: f64,
    }
    let modes: Vec<Mode> = (0..cfg.n_modes)
        .map(|_| {
            let sign = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
            Mode {
                kx: rng.random_range(1..=4) as f64,
                ky: match cfg.grid {
                    GridSpec::OneDim(_) => 0.0,
                    GridSpec::TwoDim(..) => rng.random_range(1..=4) as f64,
                },
                omega: sign * rng.random_range(0.2..1.2),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    let (nx, ny) = match cfg.grid {
        GridSpec::OneDim(n) => (n, 1),
        GridSpec::TwoDim(nx, ny) => (nx, ny),
    };
    for t in 0..cfg.t_len {
        let row = field.row_mut(t);
        for iy in 0..ny {
            let yc = std::f64::consts::TAU * iy as f64 / ny as f64;
            for ix in 0..nx {
                let xc = std::f64::consts::TAU * ix as f64 / nx as f64;
                let mut v = 0.0;
                for mode in &modes {
                    v += amp
                        * (mode.kx * xc + mode.ky * yc - mode.omega * t as f64 + mode.phase).sin();
                }
                row[iy * nx + ix] = v;
            }
        }
    }
    Ok(field)
}

// ── Linear-Gaussian field generator ──────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianConfig {
    pub t_len: usize,
    pub m: usize,
    pub p_latent: usize,
    /// AR(1) coefficient of the latent process, in [0, 1).
    pub ar_coeff: f64,
    /// Base observation noise scale; 0 gives the exactly linear field.
    pub noise_scale: f64,
}

/// The exact conditional law of the linear-Gaussian field given a sensor
/// window whose sensors are cells `0..p_latent`.
///
/// Those cells read the latent state exactly and carry no observation
/// noise, so the window's last row determines `z_t` and the state is
/// conditionally Gaussian with mean `C z_t` and the per-cell heteroscedastic
/// standard deviation. Cells `0..p_latent` are conditionally deterministic.
#[derive(Debug, Clone)]
pub struct LinearGaussianOracle {
    /// Row-major m×p_latent mixing matrix; the top p_latent rows are identity.
    c: Vec<f64>,
    m: usize,
    p_latent: usize,
    noise_scale: f64,
}

impl LinearGaussianOracle {
    pub fn p_latent(&self) -> usize {
        self.p_latent
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    /// Recover the latent state from a window whose sensors are cells
    /// `0..p_latent` in order: the window's last row.
    pub fn latent_from_window(&self, sample: &WindowedSample) -> Result<Vec<f64>> {
        let shape = sample.x.shape();
        if shape.len() != 2 || shape[1] != self.p_latent {
            return Err(Error::shape(
                "oracle",
                format!(
                    "window shape {:?} incompatible with p_latent {} (sensors must be cells 0..p_latent)",
                    shape, self.p_latent
                ),
            ));
        }
        let lag = shape[0];
        let data = sample.x.data();
        Ok(data[(lag - 1) * self.p_latent..].to_vec())
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.c[j * self.p_latent..(j + 1) * self.p_latent]
    }

    fn sd_for(&self, j: usize, z: &[f64]) -> f64 {
        if j < self.p_latent {
            return 0.0;
        }
        let dot: f64 = self.row(j).iter().zip(z.iter()).map(|(c, z)| c * z).sum();
        self.noise_scale * (1.0 + 0.5 * dot.tanh())
    }

    /// Conditional mean and standard deviation per cell given the latent.
    pub fn conditional_mean_sd(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut mean = Vec::with_capacity(self.m);
        let mut sd = Vec::with_capacity(self.m);
        for j in 0..self.m {
            mean.push(self.row(j).iter().zip(z.iter()).map(|(c, z)| c * z).sum());
            sd.push(self.sd_for(j, z));
        }
        (mean, sd)
    }

    /// Draw one state from the exact conditional law.
    pub fn sample_state<R: Rng>(&self, z: &[f64], rng: &mut R) -> Vec<f64> {
        let (mean, sd) = self.conditional_mean_sd(z);
        mean.iter()
            .zip(sd.iter())
            .map(|(&mu, &s)| {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                mu + s * n
            })
            .collect()
    }
}

/// Latent AR(1) process observed through a linear map with heteroscedastic
/// Gaussian noise. Cells `0..p_latent` expose the latent exactly (identity
/// block, zero noise) and are the intended sensor placement; with that
/// placement the returned oracle gives the exact conditional law of every
/// window's target, which anchors the calibration tests.
pub fn gen_linear_gaussian_field<R: Rng>(
    cfg: &LinearGaussianConfig,
    rng: &mut R,
) -> Result<(Field, LinearGaussianOracle)> {
    if cfg.p_latent == 0 || cfg.p_latent > cfg.m {
        return Err(Error::InvalidArgument(format!(
            "p_latent {} must be in 1..={}",
            cfg.p_latent, cfg.m
        )));
    }
    if !(0.0..1.0).contains(&cfg.ar_coeff) {
        return Err(Error::InvalidArgument("ar_coeff must be in [0, 1)".into()));
    }
    if cfg.noise_scale < 0.0 {
        return Err(Error::InvalidArgument("noise_scale must be nonnegative".into()));
    }
    let (t_len, m, k) = (cfg.t_len, cfg.m, cfg.p_latent);

    // Mixing matrix: identity block on top, unit-norm random rows below.
    let mut c = vec![0.0; m * k];
    for i in 0..k {
        c[i * k + i] = 1.0;
    }
    for j in k..m {
        let row = &mut c[j * k..(j + 1) * k];
        let mut norm2 = 0.0;
        for v in row.iter_mut() {
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            *v = g;
            norm2 += g * g;
        }
        let norm = norm2.sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    let oracle = LinearGaussianOracle {
        c,
        m,
        p_latent: k,
        noise_scale: cfg.noise_scale,
    };

    // Stationary AR(1): z_0 ~ N(0, I), innovations scaled by sqrt(1 - a^2).
    let mut field = Field::zeros(t_len, m);
    let a = cfg.ar_coeff;
    let innov = (1.0 - a * a).sqrt();
    let mut z: Vec<f64> = (0..k).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    for t in 0..t_len {
        if t > 0 {
            for zi in z.iter_mut() {
                let w: f64 = rng.sample(rand_distr::StandardNormal);
                *zi = a * *zi + innov * w;
            }
        }
        let row_vals = oracle.sample_state(&z, rng);
        field.row_mut(t).copy_from_slice(&row_vals);
    }
    Ok((field, oracle))
}

// ── Field file I/O ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldFormat {
    Csv,
    Binary,
}

/// Encode to the binary field format: magic `UQSF`, u32 version, u64 T,
/// u64 m, then row-major f64 values, little-endian.
pub fn field_to_bytes(field: &Field) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + field.data.len() * 8);
    buf.extend_from_slice(FIELD_MAGIC);
    buf.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(field.t_len as u64).to_le_bytes());
    buf.extend_from_slice(&(field.m as u64).to_le_bytes());
    for &v in &field.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn field_from_bytes(bytes: &[u8], origin: &str) -> Result<Field> {
    let fmt = |detail: String| Error::Format {
        path: origin.into(),
        detail,
    };
    if bytes.len() < 24 {
        return Err(fmt("file shorter than the 24-byte header".into()));
    }
    if &bytes[0..4] != FIELD_MAGIC {
        return Err(fmt("bad magic, expected UQSF".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FIELD_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let t_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let m = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = 24 + t_len * m * 8;
    if bytes.len() != expected {
        return Err(fmt(format!(
            "expected {expected} bytes for {t_len}x{m}, found {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(t_len * m);
    for chunk in bytes[24..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Field::from_vec(t_len, m, data)
}

pub fn save_field(field: &Field, path: &Path, format: FieldFormat) -> Result<()> {
    match format {
        FieldFormat::Binary => {
            let mut f = std::fs::File::create(path)?;
            f.write_all(&field_to_bytes(field))?;
        }
        FieldFormat::Csv => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            for t in 0..field.t_len {
                let line: Vec<String> = field.row(t).iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(f, "{}", line.join(","))?;
            }
        }
    }
    Ok(())
}

pub fn load_field(path: &Path, format: FieldFormat) -> Result<Field> {
    let origin = path.display().to_string();
    match format {
        FieldFormat::Binary => {
            let mut bytes = Vec::new();
            std::fs::File::open(path)?.read_to_end(&mut bytes)?;
            field_from_bytes(&bytes, &origin)
        }
        FieldFormat::Csv => {
            let fmt = |detail: String| Error::Format {
                path: origin.clone(),
                detail,
            };
            let reader = BufReader::new(std::fs::File::open(path)?);
            let mut data = Vec::new();
            let mut m = 0usize;
            let mut t_len = 0usize;
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut row = Vec::new();
                for (col, cellstr) in line.split(',').enumerate() {
                    let v: f64 = cellstr.trim().parse().map_err(|_| {
                        fmt(format!(
                            "row {} column {} is not numeric: {:?}",
                            lineno + 1,
                            col + 1,
                            cellstr.trim()
                        ))
                    })?;
                    row.push(v);
                }
                if t_len == 0 {
                    m = row.len();
                } else if row.len() != m {
                    return Err(fmt(format!(
                        "row {} has {} values, expected {}",
                        lineno + 1,
                        row.len(),
                        m
                    )));
                }
                data.extend_from_slice(&row);
                t_len += 1;
            }
            if t_len == 0 {
                return Err(fmt("file holds no rows".into()));
            }
            Field::from_vec(t_len, m, data)
        }
    }
}
