//! Pipeline commands behind the command-line surface: synthesize a field,
//! train a model, evaluate a checkpoint, and sweep one hyperparameter axis.
//!
//! Runs are driven by a flat key=value configuration (file plus overrides,
//! last writer wins; unknown keys are rejected). Every command writes a
//! `config_echo.txt` with the fully resolved settings, including the seed,
//! so a run can be reproduced from its output directory alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{
    gen_linear_gaussian_field, gen_wave_field, load_field, save_field,
    select_sensors, split_windows, Field, FieldDataset, FieldFormat, GridSpec,
    LinearGaussianConfig, SensorMode, Split, SplitMode, WaveFieldConfig,
};
use crate::error::{Error, Result};
use crate::inference::{ModelSampler, MC_SAMPLE_GUIDELINE};
use crate::metrics::{calibration_to_csv, cells_to_csv, evaluate, UQReport, DEFAULT_LEVELS};
use crate::model::{
    load_checkpoint, save_checkpoint, Activation, ModelConfig, TemporalUnitKind,
};
use crate::rng::{substream, Stream};
use crate::training::{train, TrainConfig, TrainHistory};

/// Every key a run configuration may carry.
pub const KNOWN_KEYS: &[&str] = &[
    // data synthesis / ingestion
    "generator",
    "t_len",
    "grid_x",
    "grid_y",
    "n_modes",
    "amplitude",
    "m",
    "p_latent",
    "ar_coeff",
    "noise_scale",
    "data",
    "format",
    // sensing and windowing
    "sensors",
    "sensor_mode",
    "sensor_list",
    "lag",
    "split_mode",
    "split_train",
    "split_val",
    "split_test",
    // model
    "temporal_unit",
    "hidden_dim",
    "noise_dim",
    "decoder_widths",
    "decoder_activation",
    // training
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "patience",
    // inference and metrics
    "mc_samples",
    "levels",
    // run plumbing
    "out",
    "seed",
    "checkpoint",
];

// ── Run configuration ────────────────────────────────────────────────

/// Flat key=value run configuration. Later writes win, which is what the
/// ablation harness relies on to rewrite a single axis per grid point.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig::default()
    }

    /// Parse a key=value file: one pair per line, `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = RunConfig::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: format!("line {} is not key=value: {raw:?}", lineno + 1),
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Set one key, rejecting names outside [`KNOWN_KEYS`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required config key {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("config key {key:?} has invalid value {value:?}")))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(v) => self.parse(key, v),
            None => Ok(default),
        }
    }

    fn require_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        self.parse(key, v)
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(v) => self.parse(key, v),
            None => Ok(default),
        }
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            Some(v) => self.parse(key, v),
            None => Ok(default),
        }
    }

    fn list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.get(key) {
            Some(v) => v
                .split(',')
                .map(|s| self.parse(key, s.trim()))
                .collect::<Result<Vec<f64>>>(),
            None => Ok(default.to_vec()),
        }
    }

    fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            Some(v) if !v.trim().is_empty() => Ok(Some(
                v.split(',')
                    .map(|s| self.parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?,
            )),
            _ => Ok(None),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64_or("seed", 0)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require("out")?))
    }

    fn format(&self) -> Result<FieldFormat> {
        match self.get("format").unwrap_or("binary") {
            "binary" => Ok(FieldFormat::Binary),
            "csv" => Ok(FieldFormat::Csv),
            other => Err(Error::Config(format!("unknown field format {other:?}"))),
        }
    }
}

fn write_echo(dir: &Path, command: &str, resolved: &BTreeMap<String, String>) -> Result<()> {
    let mut text = format!("command={command}\n");
    for (k, v) in resolved {
        let _ = writeln!(text, "{k}={v}");
    }
    std::fs::write(dir.join("config_echo.txt"), text)?;
    Ok(())
}

// ── Typed views of the configuration ─────────────────────────────────

fn model_config_from(config: &RunConfig, state_dim: usize) -> Result<ModelConfig> {
    let lag = config.usize_or("lag", 10)?;
    let sensors = config.usize_or("sensors", 3)?;
    let hidden_dim = config.usize_or("hidden_dim", 64)?;
    let temporal_unit = match config.get("temporal_unit").unwrap_or("gru") {
        "gru" => TemporalUnitKind::Gru,
        "lstm" => TemporalUnitKind::Lstm,
        other => return Err(Error::Config(format!("unknown temporal unit {other:?}"))),
    };
    let decoder_widths = config
        .usize_list("decoder_widths")?
        .unwrap_or_else(|| ModelConfig::default_decoder_widths(hidden_dim));
    let decoder_activation = match config.get("decoder_activation").unwrap_or("relu") {
        "relu" => Activation::Relu,
        "sigmoid" => Activation::Sigmoid,
        "tanh" => Activation::Tanh,
        other => return Err(Error::Config(format!("unknown activation {other:?}"))),
    };
    let mc = ModelConfig {
        lag,
        sensors,
        state_dim,
        noise_dim: config.usize_or("noise_dim", 32)?,
        hidden_dim,
        temporal_unit,
        decoder_widths,
        decoder_activation,
    };
    mc.validate()?;
    Ok(mc)
}

fn split_fractions_from(config: &RunConfig) -> Result<(f64, f64, f64)> {
    Ok((
        config.f64_or("split_train", 0.7)?,
        config.f64_or("split_val", 0.1)?,
        config.f64_or("split_test", 0.2)?,
    ))
}

fn train_config_from(config: &RunConfig) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        epochs: config.usize_or("epochs", defaults.epochs)?,
        batch_size: config.usize_or("batch_size", defaults.batch_size)?,
        learning_rate: config.f64_or("learning_rate", defaults.learning_rate)?,
        beta1: config.f64_or("beta1", defaults.beta1)?,
        beta2: config.f64_or("beta2", defaults.beta2)?,
        adam_eps: config.f64_or("adam_eps", defaults.adam_eps)?,
        val_fraction: split_fractions_from(config)?.1,
        patience: config.usize_or("patience", defaults.patience)?,
        seed: config.seed()?,
    };
    tc.validate()?;
    Ok(tc)
}

fn sensor_mode_from(config: &RunConfig) -> Result<SensorMode> {
    match config.get("sensor_mode").unwrap_or("random") {
        "random" => Ok(SensorMode::Random),
        "uniform" => Ok(SensorMode::UniformSpaced),
        "fixed" => {
            let list = config.usize_list("sensor_list")?.ok_or_else(|| {
                Error::Config("sensor_mode=fixed requires sensor_list".into())
            })?;
            Ok(SensorMode::Fixed(list))
        }
        other => Err(Error::Config(format!("unknown sensor mode {other:?}"))),
    }
}

fn split_mode_from(config: &RunConfig) -> Result<SplitMode> {
    match config.get("split_mode").unwrap_or("random") {
        "random" => Ok(SplitMode::Random),
        "temporal" => Ok(SplitMode::TemporalContiguous),
        other => Err(Error::Config(format!("unknown split mode {other:?}"))),
    }
}

/// Assemble the dataset exactly as training does: sensors from the seeded
/// substream, split over window indices, normalization on the train rows.
fn dataset_from_config(config: &RunConfig, field: Field, lag: usize, p: usize) -> Result<FieldDataset> {
    let seed = config.seed()?;
    let mode = sensor_mode_from(config)?;
    let sensors = select_sensors(field.m(), p, &mode, &mut substream(seed, Stream::Sensors))?;
    if field.t_len() < lag {
        return Err(Error::Config(format!(
            "field has {} steps; lag {} needs at least that many",
            field.t_len(),
            lag
        )));
    }
    let count = field.t_len() - lag + 1;
    let splits = split_windows(
        count,
        split_fractions_from(config)?,
        split_mode_from(config)?,
        &mut substream(seed, Stream::Split),
    )?;
    let provenance = config.get("data").unwrap_or("synthetic").to_string();
    FieldDataset::new(field, sensors, lag, splits, provenance)
}

fn echo_common(config: &RunConfig, resolved: &mut BTreeMap<String, String>) -> Result<()> {
    resolved.insert("seed".into(), config.seed()?.to_string());
    Ok(())
}

// ── synth ────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct SynthOutput {
    pub field_path: PathBuf,
    pub t_len: usize,
    pub m: usize,
}

/// Generate a synthetic field and write it (plus the config echo) to the
/// output directory.
pub fn cmd_synth(config: &RunConfig) -> Result<SynthOutput> {
    let out = config.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let seed = config.seed()?;
    let format = config.format()?;
    let generator = config.require("generator")?;
    let t_len = config.require_usize("t_len")?;

    let mut resolved = BTreeMap::new();
    resolved.insert("generator".into(), generator.to_string());
    resolved.insert("t_len".into(), t_len.to_string());
    echo_common(config, &mut resolved)?;

    let field = match generator {
        "wave" => {
            let grid_x = config.require_usize("grid_x")?;
            let grid_y = config.usize_or("grid_y", 1)?;
            let grid = if grid_y <= 1 {
                GridSpec::OneDim(grid_x)
            } else {
                GridSpec::TwoDim(grid_x, grid_y)
            };
            let cfg = WaveFieldConfig {
                t_len,
                grid,
                n_modes: config.usize_or("n_modes", 3)?,
                amplitude: config.f64_or("amplitude", 1.0)?,
            };
            resolved.insert("grid_x".into(), grid_x.to_string());
            resolved.insert("grid_y".into(), grid_y.to_string());
            resolved.insert("n_modes".into(), cfg.n_modes.to_string());
            resolved.insert("amplitude".into(), cfg.amplitude.to_string());
            gen_wave_field(&cfg, &mut substream(seed, Stream::Generator))?
        }
        "linear_gaussian" => {
            let cfg = LinearGaussianConfig {
                t_len,
                m: config.require_usize("m")?,
                p_latent: config.usize_or("p_latent", 3)?,
                ar_coeff: config.f64_or("ar_coeff", 0.9)?,
                noise_scale: config.f64_or("noise_scale", 0.3)?,
            };
            resolved.insert("m".into(), cfg.m.to_string());
            resolved.insert("p_latent".into(), cfg.p_latent.to_string());
            resolved.insert("ar_coeff".into(), cfg.ar_coeff.to_string());
            resolved.insert("noise_scale".into(), cfg.noise_scale.to_string());
            gen_linear_gaussian_field(&cfg, &mut substream(seed, Stream::Generator))?.0
        }
        other => {
            return Err(Error::Config(format!("unknown generator {other:?}")))
        }
    };

    let (ext, fmt_name) = match format {
        FieldFormat::Binary => ("uqsf", "binary"),
        FieldFormat::Csv => ("csv", "csv"),
    };
    resolved.insert("format".into(), fmt_name.to_string());
    let field_path = out.join(format!("field.{ext}"));
    save_field(&field, &field_path, format)?;
    resolved.insert("data".into(), field_path.display().to_string());
    write_echo(&out, "synth", &resolved)?;
    Ok(SynthOutput {
        field_path,
        t_len: field.t_len(),
        m: field.m(),
    })
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    pub history: TrainHistory,
    pub warnings: Vec<String>,
}

/// Full training pipeline: load the field, place sensors, split windows,
/// fit normalization, train, and write the checkpoint plus history CSV.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutput> {
    let out = config.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let data_path = PathBuf::from(config.require("data")?);
    let field = load_field(&data_path, config.format()?)?;
    let state_dim = field.m();

    let mcfg = model_config_from(config, state_dim)?;
    let tcfg = train_config_from(config)?;
    let dataset = dataset_from_config(config, field, mcfg.lag, mcfg.sensors)?;

    let mut warnings = Vec::new();
    let input_size = mcfg.lag * mcfg.sensors;
    if mcfg.noise_dim > 0 && 2 * mcfg.noise_dim < input_size {
        warnings.push(format!(
            "noise_dim {} is small relative to the {}-value input window; \
             noise dimension should scale with the input size",
            mcfg.noise_dim, input_size
        ));
    }

    let (params, history) = train(&dataset, &mcfg, &tcfg)?;

    let checkpoint_path = out.join("model.uqsm");
    save_checkpoint(&params, &checkpoint_path)?;
    let history_path = out.join("history.csv");
    std::fs::write(&history_path, history.to_csv())?;

    let mut resolved = BTreeMap::new();
    resolved.insert("data".into(), data_path.display().to_string());
    resolved.insert("lag".into(), mcfg.lag.to_string());
    resolved.insert("sensors".into(), mcfg.sensors.to_string());
    resolved.insert(
        "sensor_mode".into(),
        config.get("sensor_mode").unwrap_or("random").to_string(),
    );
    if let Some(list) = config.get("sensor_list") {
        resolved.insert("sensor_list".into(), list.to_string());
    }
    resolved.insert("sensor_cells".into(), format!("{:?}", dataset.sensors()));
    resolved.insert("noise_dim".into(), mcfg.noise_dim.to_string());
    resolved.insert("hidden_dim".into(), mcfg.hidden_dim.to_string());
    resolved.insert(
        "temporal_unit".into(),
        match mcfg.temporal_unit {
            TemporalUnitKind::Gru => "gru".into(),
            TemporalUnitKind::Lstm => "lstm".to_string(),
        },
    );
    resolved.insert(
        "decoder_widths".into(),
        mcfg.decoder_widths
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    resolved.insert(
        "decoder_activation".into(),
        match mcfg.decoder_activation {
            Activation::Relu => "relu".into(),
            Activation::Sigmoid => "sigmoid".to_string(),
            Activation::Tanh => "tanh".to_string(),
        },
    );
    resolved.insert("epochs".into(), tcfg.epochs.to_string());
    resolved.insert("batch_size".into(), tcfg.batch_size.to_string());
    resolved.insert("learning_rate".into(), tcfg.learning_rate.to_string());
    resolved.insert("beta1".into(), tcfg.beta1.to_string());
    resolved.insert("beta2".into(), tcfg.beta2.to_string());
    resolved.insert("adam_eps".into(), tcfg.adam_eps.to_string());
    resolved.insert("patience".into(), tcfg.patience.to_string());
    let fr = split_fractions_from(config)?;
    resolved.insert("split_train".into(), fr.0.to_string());
    resolved.insert("split_val".into(), fr.1.to_string());
    resolved.insert("split_test".into(), fr.2.to_string());
    resolved.insert(
        "split_mode".into(),
        config.get("split_mode").unwrap_or("random").to_string(),
    );
    echo_common(config, &mut resolved)?;
    write_echo(&out, "train", &resolved)?;

    Ok(TrainOutput {
        checkpoint_path,
        history_path,
        history,
        warnings,
    })
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct EvalOutput {
    pub report: UQReport,
    pub report_path: PathBuf,
    pub calibration_path: PathBuf,
    pub cells_path: PathBuf,
    pub warnings: Vec<String>,
}

/// Evaluate a checkpoint on the test split: Monte Carlo ensembles, predictive
/// summaries, and the full metric set, written as `report.json`,
/// `calibration.csv`, and the per-cell interval table `cells.csv`.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalOutput> {
    let out = config.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let checkpoint_path = PathBuf::from(config.require("checkpoint")?);
    let params = load_checkpoint(&checkpoint_path)?;
    let mcfg = params.config().clone();

    let data_path = PathBuf::from(config.require("data")?);
    let field = load_field(&data_path, config.format()?)?;
    if field.m() != mcfg.state_dim {
        return Err(Error::Config(format!(
            "checkpoint expects {} cells, field has {}",
            mcfg.state_dim,
            field.m()
        )));
    }
    // Explicit lag/sensors in the eval config must agree with the checkpoint.
    if let Some(lag) = config.usize_list("lag")?.map(|v| v[0]) {
        if lag != mcfg.lag {
            return Err(Error::Config(format!(
                "config lag {lag} conflicts with checkpoint lag {}",
                mcfg.lag
            )));
        }
    }
    if let Some(p) = config.usize_list("sensors")?.map(|v| v[0]) {
        if p != mcfg.sensors {
            return Err(Error::Config(format!(
                "config sensors {p} conflicts with checkpoint sensors {}",
                mcfg.sensors
            )));
        }
    }

    let dataset = dataset_from_config(config, field, mcfg.lag, mcfg.sensors)?;
    let k = config.usize_or("mc_samples", 200)?;
    let levels = config.list_or("levels", &DEFAULT_LEVELS)?;
    let seed = config.seed()?;

    let mut warnings = Vec::new();
    if k < MC_SAMPLE_GUIDELINE {
        warnings.push(format!(
            "mc_samples {k} is below the {MC_SAMPLE_GUIDELINE}-sample guideline for \
             stable quantile estimates; proceeding anyway"
        ));
    }

    let test_windows: Vec<_> = dataset
        .windows_in(Split::Test)
        .into_iter()
        .map(|i| dataset.window(i))
        .collect();
    if test_windows.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }

    let sampler = ModelSampler::new(&params, dataset.stats(), dataset.sensors())?;
    let (report, records) = evaluate(&sampler, &test_windows, &levels, k, seed)?;
    if !report.rmse.is_finite() || !report.crps.is_finite() {
        return Err(Error::Training(format!(
            "evaluation produced non-finite metrics: rmse {}, crps {}",
            report.rmse, report.crps
        )));
    }

    let report_path = out.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let curve: Vec<(f64, f64)> = report
        .coverage
        .iter()
        .map(|s| (s.level, s.value))
        .collect();
    let calibration_path = out.join("calibration.csv");
    std::fs::write(&calibration_path, calibration_to_csv(&curve))?;
    let cells_path = out.join("cells.csv");
    std::fs::write(&cells_path, cells_to_csv(&records))?;

    let mut resolved = BTreeMap::new();
    resolved.insert("checkpoint".into(), checkpoint_path.display().to_string());
    resolved.insert("data".into(), data_path.display().to_string());
    resolved.insert("mc_samples".into(), k.to_string());
    resolved.insert(
        "levels".into(),
        levels
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    let fr = split_fractions_from(config)?;
    resolved.insert("split_train".into(), fr.0.to_string());
    resolved.insert("split_val".into(), fr.1.to_string());
    resolved.insert("split_test".into(), fr.2.to_string());
    resolved.insert(
        "split_mode".into(),
        config.get("split_mode").unwrap_or("random").to_string(),
    );
    resolved.insert("sensor_cells".into(), format!("{:?}", dataset.sensors()));
    echo_common(config, &mut resolved)?;
    write_echo(&out, "eval", &resolved)?;

    Ok(EvalOutput {
        report,
        report_path,
        calibration_path,
        cells_path,
        warnings,
    })
}

// ── ablate ───────────────────────────────────────────────────────────

/// Sweep axes: each retrains per grid point except `mc_samples`, which
/// reuses one trained model and varies inference only.
pub const ABLATION_AXES: &[&str] = &["lag", "sensors", "noise_dim", "mc_samples", "epochs"];

#[derive(Debug)]
pub struct AblateOutput {
    pub sweep_path: PathBuf,
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: usize,
    pub rmse: f64,
    pub coverage95: f64,
    pub width95: f64,
    pub crps: f64,
}

fn report_level(report: &UQReport, level: f64) -> Result<(f64, f64)> {
    let cov = report
        .coverage
        .iter()
        .find(|s| s.level == level)
        .map(|s| s.value);
    let width = report
        .sharpness
        .iter()
        .find(|s| s.level == level)
        .map(|s| s.value);
    match (cov, width) {
        (Some(c), Some(w)) => Ok((c, w)),
        _ => Err(Error::InvalidArgument(format!(
            "report carries no level {level}"
        ))),
    }
}

/// Retrain/evaluate along one axis, one CSV row per grid point:
/// `<axis>,rmse,coverage95,width95,crps`. Grid points run in disjoint
/// subdirectories with their own config echoes.
pub fn cmd_ablate(axis: &str, grid: &[usize], base: &RunConfig) -> Result<AblateOutput> {
    if !ABLATION_AXES.contains(&axis) {
        return Err(Error::Config(format!(
            "unknown ablation axis {axis:?}; expected one of {ABLATION_AXES:?}"
        )));
    }
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let out = base.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let mut warnings = Vec::new();
    let mut rows = Vec::new();

    // Evaluations need the 95% level for the sweep columns.
    let mut levels = base.list_or("levels", &DEFAULT_LEVELS)?;
    if !levels.iter().any(|&l| l == 0.95) {
        levels.push(0.95);
    }
    let levels_str = levels
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",");

    let shared_checkpoint = if axis == "mc_samples" {
        // One training run reused across the whole grid.
        let mut train_cfg = base.clone();
        train_cfg.set("out", &out.join("base_model").display().to_string())?;
        let trained = cmd_train(&train_cfg)?;
        warnings.extend(trained.warnings);
        Some(trained.checkpoint_path)
    } else {
        None
    };

    for &value in grid {
        let point_dir = out.join(format!("{axis}_{value}"));
        let mut point_cfg = base.clone();
        point_cfg.set("out", &point_dir.display().to_string())?;
        point_cfg.set("levels", &levels_str)?;

        let checkpoint = match &shared_checkpoint {
            Some(path) => {
                point_cfg.set("mc_samples", &value.to_string())?;
                path.clone()
            }
            None => {
                point_cfg.set(axis, &value.to_string())?;
                let trained = cmd_train(&point_cfg)?;
                warnings.extend(trained.warnings);
                trained.checkpoint_path
            }
        };
        point_cfg.set("checkpoint", &checkpoint.display().to_string())?;
        let eval = cmd_eval(&point_cfg)?;
        warnings.extend(eval.warnings);
        let (coverage95, width95) = report_level(&eval.report, 0.95)?;
        rows.push(AblationRow {
            value,
            rmse: eval.report.rmse,
            coverage95,
            width95,
            crps: eval.report.crps,
        });
    }

    let mut csv = format!("{axis},rmse,coverage95,width95,crps\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            row.value, row.rmse, row.coverage95, row.width95, row.crps
        );
    }
    let sweep_path = out.join("sweep.csv");
    std::fs::write(&sweep_path, &csv)?;

    let mut resolved: BTreeMap<String, String> = BTreeMap::new();
    resolved.insert("axis".into(), axis.to_string());
    resolved.insert(
        "grid".into(),
        grid.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    echo_common(base, &mut resolved)?;
    write_echo(&out, "ablate", &resolved)?;

    Ok(AblateOutput {
        sweep_path,
        rows,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_synth_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::new();
        c.set("generator", "wave").unwrap();
        c.set("t_len", "200").unwrap();
        c.set("grid_x", "64").unwrap();
        c.set("out", &dir.display().to_string()).unwrap();
        c.set("seed", "5").unwrap();
        c
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::new();
        let err = c.set("not_a_key", "1").unwrap_err().to_string();
        assert!(err.contains("not_a_key"), "{err}");
    }

    #[test]
    fn missing_required_key_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::new();
        c.set("out", &dir.path().display().to_string()).unwrap();
        c.set("generator", "wave").unwrap();
        let err = cmd_synth(&c).unwrap_err().to_string();
        assert!(err.contains("t_len"), "{err}");
    }

    #[test]
    fn config_file_round_trip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# demo\nlag = 7\nsensors=3  # trailing\n\n").unwrap();
        let c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.get("lag"), Some("7"));
        assert_eq!(c.get("sensors"), Some("3"));
    }

    #[test]
    fn synth_binary_size_matches_header_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let c = base_synth_config(dir.path());
        let out = cmd_synth(&c).unwrap();
        let bytes = std::fs::read(&out.field_path).unwrap();
        // 4 magic + 4 version + 8 T + 8 m, then T*m f64 values.
        assert_eq!(bytes.len(), 24 + 200 * 64 * 8);
        assert!(dir.path().join("config_echo.txt").exists());
    }

    #[test]
    fn synth_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = cmd_synth(&base_synth_config(d1.path())).unwrap();
        let b = cmd_synth(&base_synth_config(d2.path())).unwrap();
        assert_eq!(
            std::fs::read(&a.field_path).unwrap(),
            std::fs::read(&b.field_path).unwrap()
        );
    }

    fn quick_train_config(dir: &Path, data: &Path) -> RunConfig {
        let mut c = RunConfig::new();
        c.set("data", &data.display().to_string()).unwrap();
        c.set("out", &dir.display().to_string()).unwrap();
        c.set("lag", "4").unwrap();
        c.set("sensors", "2").unwrap();
        c.set("hidden_dim", "8").unwrap();
        c.set("noise_dim", "4").unwrap();
        c.set("decoder_widths", "8").unwrap();
        c.set("epochs", "3").unwrap();
        c.set("batch_size", "16").unwrap();
        c.set("patience", "0").unwrap();
        c.set("seed", "3").unwrap();
        c
    }

    fn synth_small_field(dir: &Path) -> PathBuf {
        let mut c = RunConfig::new();
        c.set("generator", "wave").unwrap();
        c.set("t_len", "60").unwrap();
        c.set("grid_x", "12").unwrap();
        c.set("out", &dir.display().to_string()).unwrap();
        c.set("seed", "8").unwrap();
        cmd_synth(&c).unwrap().field_path
    }

    #[test]
    fn train_twice_same_seed_identical_checkpoints() {
        let data_dir = tempfile::tempdir().unwrap();
        let field = synth_small_field(data_dir.path());
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = cmd_train(&quick_train_config(d1.path(), &field)).unwrap();
        let b = cmd_train(&quick_train_config(d2.path(), &field)).unwrap();
        assert_eq!(
            std::fs::read(&a.checkpoint_path).unwrap(),
            std::fs::read(&b.checkpoint_path).unwrap()
        );
        assert_eq!(
            std::fs::read_to_string(&a.history_path).unwrap(),
            std::fs::read_to_string(&b.history_path).unwrap()
        );
    }

    #[test]
    fn early_stopping_without_validation_is_a_config_error() {
        let data_dir = tempfile::tempdir().unwrap();
        let field = synth_small_field(data_dir.path());
        let out = tempfile::tempdir().unwrap();
        let mut c = quick_train_config(out.path(), &field);
        c.set("patience", "5").unwrap();
        c.set("split_train", "0.9").unwrap();
        c.set("split_val", "0").unwrap();
        c.set("split_test", "0.1").unwrap();
        let err = cmd_train(&c).unwrap_err().to_string();
        assert!(err.contains("validation"), "{err}");
    }

    #[test]
    fn small_noise_dim_warns() {
        let data_dir = tempfile::tempdir().unwrap();
        let field = synth_small_field(data_dir.path());
        let out = tempfile::tempdir().unwrap();
        let mut c = quick_train_config(out.path(), &field);
        c.set("noise_dim", "1").unwrap();
        let trained = cmd_train(&c).unwrap();
        assert!(
            trained.warnings.iter().any(|w| w.contains("noise_dim")),
            "{:?}",
            trained.warnings
        );
    }

    #[test]
    fn eval_pipeline_and_low_k_warning() {
        let data_dir = tempfile::tempdir().unwrap();
        let field = synth_small_field(data_dir.path());
        let train_dir = tempfile::tempdir().unwrap();
        let trained = cmd_train(&quick_train_config(train_dir.path(), &field)).unwrap();

        let eval_dir = tempfile::tempdir().unwrap();
        let mut c = quick_train_config(eval_dir.path(), &field);
        c.set("checkpoint", &trained.checkpoint_path.display().to_string())
            .unwrap();
        c.set("mc_samples", "20").unwrap();
        let eval = cmd_eval(&c).unwrap();
        assert!(
            eval.warnings.iter().any(|w| w.contains("guideline")),
            "{:?}",
            eval.warnings
        );
        assert!(eval.report_path.exists());
        assert!(eval.calibration_path.exists());
        assert!(eval.cells_path.exists());
        // Default levels produce the five Table-style rows.
        let calib = std::fs::read_to_string(&eval.calibration_path).unwrap();
        assert_eq!(calib.lines().count(), 1 + 5);
        let cells = std::fs::read_to_string(&eval.cells_path).unwrap();
        assert!(cells.starts_with("t,cell,truth,median,"));
    }

    #[test]
    fn eval_is_deterministic() {
        let data_dir = tempfile::tempdir().unwrap();
        let field = synth_small_field(data_dir.path());
        let train_dir = tempfile::tempdir().unwrap();
        let trained = cmd_train(&quick_train_config(train_dir.path(), &field)).unwrap();

        let e1 = tempfile::tempdir().unwrap();
        let e2 = tempfile::tempdir().unwrap();
        let mut c1 = quick_train_config(e1.path(), &field);
        c1.set("checkpoint", &trained.checkpoint_path.display().to_string())
            .unwrap();
        c1.set("mc_samples", "50").unwrap();
        let mut c2 = quick_train_config(e2.path(), &field);
        c2.set("checkpoint", &trained.checkpoint_path.display().to_string())
            .unwrap();
        c2.set("mc_samples", "50").unwrap();
        let r1 = cmd_eval(&c1).unwrap();
        let r2 = cmd_eval(&c2).unwrap();
        assert_eq!(r1.report, r2.report);
        assert_eq!(
            std::fs::read(&r1.report_path).unwrap(),
            std::fs::read(&r2.report_path).unwrap()
        );
    }

    #[test]
    fn eval_rejects_checkpoint_field_mismatch() {
        let data_dir = tempfile::tempdir().unwrap();
        let field = synth_small_field(data_dir.path());
        let train_dir = tempfile::tempdir().unwrap();
        let trained = cmd_train(&quick_train_config(train_dir.path(), &field)).unwrap();

        // A field with a different cell count.
        let other_dir = tempfile::tempdir().unwrap();
        let mut sc = RunConfig::new();
        sc.set("generator", "wave").unwrap();
        sc.set("t_len", "60").unwrap();
        sc.set("grid_x", "9").unwrap();
        sc.set("out", &other_dir.path().display().to_string()).unwrap();
        let other = cmd_synth(&sc).unwrap();

        let eval_dir = tempfile::tempdir().unwrap();
        let mut c = quick_train_config(eval_dir.path(), &other.field_path);
        c.set("checkpoint", &trained.checkpoint_path.display().to_string())
            .unwrap();
        let err = cmd_eval(&c).unwrap_err().to_string();
        assert!(err.contains("cells"), "{err}");
    }

    #[test]
    fn zero_weight_checkpoint_gives_field_rms_on_zero_anchored_field() {
        // Nonnegative field with an explicit zero row in the train region:
        // per-cell minimum is 0, so a zero-output model denormalizes to 0
        // physical and its RMSE equals the RMS of the test rows.
        let m = 6;
        let t_len = 40;
        let mut field = Field::zeros(t_len, m);
        for t in 1..t_len {
            for c in 0..m {
                field.row_mut(t)[c] = ((t * m + c) as f64 * 0.37).sin().abs() + 0.1;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let field_path = dir.path().join("field.uqsf");
        save_field(&field, &field_path, FieldFormat::Binary).unwrap();

        let lag = 4;
        let mcfg = ModelConfig {
            lag,
            sensors: 2,
            state_dim: m,
            noise_dim: 3,
            hidden_dim: 8,
            temporal_unit: TemporalUnitKind::Gru,
            decoder_widths: vec![8],
            decoder_activation: Activation::Relu,
        };
        let params = crate::model::init_params(&mcfg, &mut substream(1, Stream::ParamInit))
            .unwrap()
            .zeroed();
        let ckpt = dir.path().join("zero.uqsm");
        save_checkpoint(&params, &ckpt).unwrap();

        let out = tempfile::tempdir().unwrap();
        let mut c = RunConfig::new();
        c.set("data", &field_path.display().to_string()).unwrap();
        c.set("out", &out.path().display().to_string()).unwrap();
        c.set("checkpoint", &ckpt.display().to_string()).unwrap();
        c.set("split_mode", "temporal").unwrap();
        c.set("split_train", "0.6").unwrap();
        c.set("split_val", "0.1").unwrap();
        c.set("split_test", "0.3").unwrap();
        c.set("mc_samples", "8").unwrap();
        c.set("seed", "2").unwrap();
        let eval = cmd_eval(&c).unwrap();

        // Independent RMS over the test-window target rows.
        let count = t_len - lag + 1;
        let n_train = (0.6 * count as f64).round() as usize;
        let n_val = (0.1 * count as f64).round() as usize;
        let mut sq = 0.0;
        let mut n = 0;
        for i in (n_train + n_val)..count {
            for &v in field.row(i + lag - 1) {
                sq += v * v;
                n += 1;
            }
        }
        let rms = (sq / n as f64).sqrt();
        assert!(
            (eval.report.rmse - rms).abs() < 1e-9,
            "rmse {} vs field rms {rms}",
            eval.report.rmse
        );
    }

    #[test]
    fn ablate_unknown_axis_rejected() {
        let c = RunConfig::new();
        assert!(cmd_ablate("optimizer", &[1], &c).is_err());
    }

    #[test]
    fn ablate_mc_axis_trains_once() {
        let data_dir = tempfile::tempdir().unwrap();
        let field = synth_small_field(data_dir.path());
        let out = tempfile::tempdir().unwrap();
        let mut c = quick_train_config(out.path(), &field);
        c.set("mc_samples", "20").unwrap();
        let result = cmd_ablate("mc_samples", &[10, 20], &c).unwrap();
        assert_eq!(result.rows.len(), 2);
        // One shared checkpoint under base_model, none in the point dirs.
        assert!(out.path().join("base_model/model.uqsm").exists());
        assert!(!out.path().join("mc_samples_10/model.uqsm").exists());
        let sweep = std::fs::read_to_string(&result.sweep_path).unwrap();
        assert!(sweep.starts_with("mc_samples,rmse,coverage95,width95,crps\n"));
        assert_eq!(sweep.lines().count(), 3);
    }

    #[test]
    fn ablate_lag_axis_trains_per_point() {
        let data_dir = tempfile::tempdir().unwrap();
        let field = synth_small_field(data_dir.path());
        let out = tempfile::tempdir().unwrap();
        let mut c = quick_train_config(out.path(), &field);
        c.set("mc_samples", "10").unwrap();
        let result = cmd_ablate("lag", &[2, 5], &c).unwrap();
        assert_eq!(result.rows.len(), 2);
        assert!(out.path().join("lag_2/model.uqsm").exists());
        assert!(out.path().join("lag_5/model.uqsm").exists());
    }

    #[test]
    fn ablate_is_deterministic() {
        let data_dir = tempfile::tempdir().unwrap();
        let field = synth_small_field(data_dir.path());
        let o1 = tempfile::tempdir().unwrap();
        let o2 = tempfile::tempdir().unwrap();
        let mut c1 = quick_train_config(o1.path(), &field);
        c1.set("mc_samples", "10").unwrap();
        let mut c2 = quick_train_config(o2.path(), &field);
        c2.set("mc_samples", "10").unwrap();
        let r1 = cmd_ablate("noise_dim", &[0, 2], &c1).unwrap();
        let r2 = cmd_ablate("noise_dim", &[0, 2], &c2).unwrap();
        assert_eq!(
            std::fs::read_to_string(&r1.sweep_path).unwrap(),
            std::fs::read_to_string(&r2.sweep_path).unwrap()
        );
    }
}
