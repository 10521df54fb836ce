//! The reconstruction network: a single-layer recurrent temporal unit over a
//! noise-augmented sensor lag window, followed by a shallow feed-forward
//! decoder producing the full state.
//!
//! One noise vector is drawn per window and concatenated to every lag step's
//! sensor reading, so the whole pass sees a single noise realization. With
//! `noise_dim = 0` the network degenerates to a deterministic reconstructor.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UQSM";
/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalUnitKind {
    Gru,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// Shape-level description of the network. Every parameter tensor shape is a
/// function of this struct alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Window length L.
    pub lag: usize,
    /// Sensor count p.
    pub sensors: usize,
    /// Full state dimension m.
    pub state_dim: usize,
    /// Noise dimension d_eps; 0 selects the deterministic limit.
    pub noise_dim: usize,
    /// Hidden (latent) dimension d_z.
    pub hidden_dim: usize,
    pub temporal_unit: TemporalUnitKind,
    /// Hidden layer widths of the decoder; the output layer to `state_dim`
    /// is always appended and stays linear.
    pub decoder_widths: Vec<usize>,
    pub decoder_activation: Activation,
}

impl ModelConfig {
    /// Default decoder: two hidden relu layers of width `max(64, 2 * d_z)`.
    pub fn default_decoder_widths(hidden_dim: usize) -> Vec<usize> {
        let w = 64.max(2 * hidden_dim);
        vec![w, w]
    }

    /// Temporal unit input width p + d_eps.
    pub fn input_width(&self) -> usize {
        self.sensors + self.noise_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.lag == 0 {
            return Err(Error::Config("lag must be positive".into()));
        }
        if self.sensors == 0 {
            return Err(Error::Config("sensor count must be positive".into()));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden dimension must be positive".into()));
        }
        if let Some(pos) = self.decoder_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!(
                "decoder hidden width at index {pos} must be positive"
            )));
        }
        Ok(())
    }
}

// ── Parameters ───────────────────────────────────────────────────────

/// All learnable tensors, in a fixed order shared by initialization, Adam
/// state, and the checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Replace one tensor; the new value must keep the existing shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape(
                "set",
                format!(
                    "parameter {name} has shape {:?}, replacement {:?}",
                    slot.1.shape(),
                    value.shape()
                ),
            ));
        }
        slot.1 = value;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zero every tensor (handy for degenerate-baseline tests).
    pub fn zeroed(mut self) -> Self {
        for (_, t) in self.tensors.iter_mut() {
            t.data_mut().fill(0.0);
        }
        self
    }
}

/// Per-tensor layout: name, shape, and the fan-in used for the uniform
/// initialization bound.
fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let q = config.input_width();
    let dz = config.hidden_dim;
    let mut layout = Vec::new();
    let gates: &[&str] = match config.temporal_unit {
        TemporalUnitKind::Gru => &["r", "z", "n"],
        TemporalUnitKind::Lstm => &["i", "f", "g", "o"],
    };
    let prefix = match config.temporal_unit {
        TemporalUnitKind::Gru => "gru",
        TemporalUnitKind::Lstm => "lstm",
    };
    for gate in gates {
        layout.push((format!("{prefix}.w_{gate}"), vec![dz, q], q));
        layout.push((format!("{prefix}.u_{gate}"), vec![dz, dz], dz));
        layout.push((format!("{prefix}.b_{gate}"), vec![dz], dz));
    }
    let mut in_width = dz;
    for (i, &w) in config.decoder_widths.iter().enumerate() {
        layout.push((format!("dec.{i}.w"), vec![w, in_width], in_width));
        layout.push((format!("dec.{i}.b"), vec![w], in_width));
        in_width = w;
    }
    layout.push(("dec.out.w".into(), vec![config.state_dim, in_width], in_width));
    layout.push(("dec.out.b".into(), vec![config.state_dim], in_width));
    layout
}

/// Initialize parameters: weights uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`,
/// biases zero. The draw order is the fixed tensor order, so a given seed
/// reproduces bit-identical parameters.
pub fn init_params<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let mut tensors = Vec::new();
    for (name, shape, fan_in) in param_layout(config) {
        let tensor = if shape.len() == 1 {
            // Biases are the only rank-1 parameters; they start at zero.
            Tensor::zeros(&shape)
        } else {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_vec(shape, data)?
        };
        tensors.push((name, tensor));
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

// ── Noise draws ──────────────────────────────────────────────────────

/// One standard-normal noise vector, held fixed for an entire window pass and
/// replicated at every lag step. `stream` records which RNG substream drew it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub values: Vec<f64>,
    pub stream: u64,
}

impl NoiseDraw {
    pub fn standard_normal<R: Rng>(dim: usize, rng: &mut R, stream: u64) -> Self {
        let values = (0..dim)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        NoiseDraw { values, stream }
    }

    /// The d_eps = 0 draw.
    pub fn empty() -> Self {
        NoiseDraw {
            values: Vec::new(),
            stream: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

// ── Forward passes ───────────────────────────────────────────────────

/// Parameter tensors registered as leaves on one graph, in params order.
pub struct BoundParams {
    entries: Vec<(String, NodeId)>,
}

impl BoundParams {
    pub fn entries(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }

    fn node(&self, name: &str) -> NodeId {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Register every parameter tensor as a leaf on `graph`.
pub fn bind_params(graph: &mut Graph, params: &ModelParams) -> BoundParams {
    let entries = params
        .tensors
        .iter()
        .map(|(name, tensor)| (name.clone(), graph.leaf(tensor.clone())))
        .collect();
    BoundParams { entries }
}

fn gate_preact(
    graph: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    gate: &str,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let wx = graph.matmul(bound.node(&format!("{prefix}.w_{gate}")), x)?;
    let uh = graph.matmul(bound.node(&format!("{prefix}.u_{gate}")), h)?;
    let s = graph.add(wx, uh)?;
    graph.add(s, bound.node(&format!("{prefix}.b_{gate}")))
}

/// Run the temporal unit over the window with one fixed noise draw and return
/// the final hidden state node (`h_L`; for LSTM the hidden state, not the
/// cell). The hidden state starts at zero for every window.
pub fn temporal_forward(
    graph: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    window: &Tensor,
    noise: &NoiseDraw,
) -> Result<NodeId> {
    if window.shape() != [config.lag, config.sensors] {
        return Err(Error::shape(
            "temporal_forward",
            format!(
                "window shape {:?} does not match [lag={}, sensors={}]",
                window.shape(),
                config.lag,
                config.sensors
            ),
        ));
    }
    if noise.dim() != config.noise_dim {
        return Err(Error::shape(
            "temporal_forward",
            format!(
                "noise length {} does not match noise_dim {}",
                noise.dim(),
                config.noise_dim
            ),
        ));
    }
    let window_node = graph.leaf(window.clone());
    let noise_node = if config.noise_dim > 0 {
        Some(graph.leaf(Tensor::vector(&noise.values)))
    } else {
        None
    };
    let dz = config.hidden_dim;
    let mut h = graph.leaf(Tensor::zeros(&[dz]));

    match config.temporal_unit {
        TemporalUnitKind::Gru => {
            let ones = graph.leaf(Tensor::ones(&[dz]));
            for t in 0..config.lag {
                let row = graph.slice_row(window_node, t)?;
                let x = match noise_node {
                    Some(n) => graph.concat(0, row, n)?,
                    None => row,
                };
                let r_pre = gate_preact(graph, bound, "gru", "r", x, h)?;
                let r = graph.sigmoid(r_pre)?;
                let z_pre = gate_preact(graph, bound, "gru", "z", x, h)?;
                let z = graph.sigmoid(z_pre)?;
                let rh = graph.hadamard(r, h)?;
                let n_pre = gate_preact(graph, bound, "gru", "n", x, rh)?;
                let n = graph.tanh(n_pre)?;
                let keep = graph.hadamard(z, h)?;
                let one_minus_z = graph.sub(ones, z)?;
                let new = graph.hadamard(one_minus_z, n)?;
                h = graph.add(new, keep)?;
            }
        }
        TemporalUnitKind::Lstm => {
            let mut c = graph.leaf(Tensor::zeros(&[dz]));
            for t in 0..config.lag {
                let row = graph.slice_row(window_node, t)?;
                let x = match noise_node {
                    Some(n) => graph.concat(0, row, n)?,
                    None => row,
                };
                let i_pre = gate_preact(graph, bound, "lstm", "i", x, h)?;
                let i = graph.sigmoid(i_pre)?;
                let f_pre = gate_preact(graph, bound, "lstm", "f", x, h)?;
                let f = graph.sigmoid(f_pre)?;
                let g_pre = gate_preact(graph, bound, "lstm", "g", x, h)?;
                let g = graph.tanh(g_pre)?;
                let o_pre = gate_preact(graph, bound, "lstm", "o", x, h)?;
                let o = graph.sigmoid(o_pre)?;
                let fc = graph.hadamard(f, c)?;
                let ig = graph.hadamard(i, g)?;
                c = graph.add(fc, ig)?;
                let tc = graph.tanh(c)?;
                h = graph.hadamard(o, tc)?;
            }
        }
    }
    Ok(h)
}

/// Feed-forward decoder: configured hidden widths with the configured
/// activation, then a linear output layer to the state dimension.
pub fn decode(
    graph: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    latent: NodeId,
) -> Result<NodeId> {
    if graph.value(latent).shape() != [config.hidden_dim] {
        return Err(Error::shape(
            "decode",
            format!(
                "latent shape {:?} does not match hidden_dim {}",
                graph.value(latent).shape(),
                config.hidden_dim
            ),
        ));
    }
    let mut a = latent;
    for i in 0..config.decoder_widths.len() {
        let w = bound.node(&format!("dec.{i}.w"));
        let b = bound.node(&format!("dec.{i}.b"));
        let lin = graph.matmul(w, a)?;
        let pre = graph.add(lin, b)?;
        a = match config.decoder_activation {
            Activation::Relu => graph.relu(pre)?,
            Activation::Sigmoid => graph.sigmoid(pre)?,
            Activation::Tanh => graph.tanh(pre)?,
        };
    }
    let w = bound.node("dec.out.w");
    let b = bound.node("dec.out.b");
    let lin = graph.matmul(w, a)?;
    graph.add(lin, b)
}

/// Full pass `window, noise -> state`: the single entry point used by both
/// training and inference.
pub fn model_forward(
    graph: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    window: &Tensor,
    noise: &NoiseDraw,
) -> Result<NodeId> {
    let latent = temporal_forward(graph, bound, config, window, noise)?;
    decode(graph, bound, config, latent)
}

/// Evaluate the network on a throwaway graph and return the output value.
pub fn model_forward_value(
    params: &ModelParams,
    window: &Tensor,
    noise: &NoiseDraw,
) -> Result<Tensor> {
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params);
    let out = model_forward(&mut graph, &bound, params.config(), window, noise)?;
    Ok(graph.value(out).clone())
}

// ── Checkpoint I/O ───────────────────────────────────────────────────

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn encode_config(buf: &mut Vec<u8>, config: &ModelConfig) {
    put_u64(buf, config.lag as u64);
    put_u64(buf, config.sensors as u64);
    put_u64(buf, config.state_dim as u64);
    put_u64(buf, config.noise_dim as u64);
    put_u64(buf, config.hidden_dim as u64);
    buf.push(match config.temporal_unit {
        TemporalUnitKind::Gru => 0,
        TemporalUnitKind::Lstm => 1,
    });
    buf.push(match config.decoder_activation {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Tanh => 2,
    });
    put_u64(buf, config.decoder_widths.len() as u64);
    for &w in &config.decoder_widths {
        put_u64(buf, w as u64);
    }
}

/// Serialize to the checkpoint wire format: magic `UQSM`, u32 version, the
/// config, then each named tensor as name length + name bytes + rank +
/// extents + f64 values, all little-endian.
pub fn checkpoint_to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    encode_config(&mut buf, &params.config);
    put_u32(&mut buf, params.tensors.len() as u32);
    for (name, tensor) in &params.tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, tensor.shape().len() as u32);
        for &e in tensor.shape() {
            put_u64(&mut buf, e as u64);
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.into(),
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse the checkpoint wire format produced by [`checkpoint_to_bytes`].
pub fn checkpoint_from_bytes(bytes: &[u8], origin: &str) -> Result<ModelParams> {
    let mut cur = Cursor {
        buf: bytes,
        pos: 0,
        path: origin,
    };
    let fmt = |detail: String| Error::Format {
        path: origin.into(),
        detail,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic, expected UQSM".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let lag = cur.u64()? as usize;
    let sensors = cur.u64()? as usize;
    let state_dim = cur.u64()? as usize;
    let noise_dim = cur.u64()? as usize;
    let hidden_dim = cur.u64()? as usize;
    let temporal_unit = match cur.u8()? {
        0 => TemporalUnitKind::Gru,
        1 => TemporalUnitKind::Lstm,
        k => return Err(fmt(format!("unknown temporal unit tag {k}"))),
    };
    let decoder_activation = match cur.u8()? {
        0 => Activation::Relu,
        1 => Activation::Sigmoid,
        2 => Activation::Tanh,
        k => return Err(fmt(format!("unknown activation tag {k}"))),
    };
    let n_widths = cur.u64()? as usize;
    let mut decoder_widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        decoder_widths.push(cur.u64()? as usize);
    }
    let config = ModelConfig {
        lag,
        sensors,
        state_dim,
        noise_dim,
        hidden_dim,
        temporal_unit,
        decoder_widths,
        decoder_activation,
    };
    config.validate()?;

    let n_tensors = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| fmt("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(cur.f64()?);
        }
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    // The layout implied by the config must match what was stored.
    let expected = param_layout(&config);
    if expected.len() != tensors.len() {
        return Err(fmt(format!(
            "expected {} tensors for config, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    for ((ename, eshape, _), (name, tensor)) in expected.iter().zip(tensors.iter()) {
        if ename != name || eshape.as_slice() != tensor.shape() {
            return Err(fmt(format!(
                "tensor {name} with shape {:?} does not match expected {ename} {:?}",
                tensor.shape(),
                eshape
            )));
        }
    }
    Ok(ModelParams { config, tensors })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(params);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}
