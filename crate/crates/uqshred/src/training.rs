//! Energy-score training: the two-draw finite-sample loss, Adam, and a
//! deterministic epoch loop with optional early stopping on validation loss.
//!
//! Each sample contributes `½(‖ŷ₁−y‖ + ‖ŷ₂−y‖) − ½‖ŷ₁−ŷ₂‖` where ŷ₁, ŷ₂ are
//! forward passes of the same window under two independent noise draws. The
//! first term rewards accuracy, the repulsive second term rewards spread
//! between draws, and together they drive the network toward sampling from
//! the true conditional distribution instead of collapsing to a point.

use rand::Rng;

use crate::data::{FieldDataset, Split, WindowedSample};
use crate::error::{Error, Result};
use crate::model::{
    bind_params, init_params, model_forward, model_forward_value, BoundParams, ModelConfig,
    ModelParams, NoiseDraw,
};
use crate::rng::{substream, Stream};
use crate::tensor::{Graph, NodeId, Tensor};

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of windows the pipeline reserves for validation; the loop
    /// itself consumes whatever split assignment the dataset carries.
    pub val_fraction: f64,
    /// Early-stop patience in epochs; 0 disables early stopping and the
    /// final-epoch parameters are returned.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.1,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("validation fraction must be in [0, 1)".into()));
        }
        if self.patience > 0 && self.val_fraction == 0.0 {
            return Err(Error::Config(
                "early stopping (patience > 0) requires a nonzero validation fraction".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch loss trace. `best_epoch` is the epoch with the lowest
/// validation loss, when validation ran.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<Option<f64>>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }

    /// CSV with one row per completed epoch: epoch, train_loss, val_loss.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (e, (tl, vl)) in self.train_loss.iter().zip(self.val_loss.iter()).enumerate() {
            match vl {
                Some(v) => out.push_str(&format!("{e},{tl},{v}\n")),
                None => out.push_str(&format!("{e},{tl},\n")),
            }
        }
        out
    }
}

// ── Loss ─────────────────────────────────────────────────────────────

/// Record the two-draw energy-score loss
/// `½(‖ŷ₁−y‖ + ‖ŷ₂−y‖) − ½‖ŷ₁−ŷ₂‖` on the graph.
pub fn energy_score_loss(
    graph: &mut Graph,
    y: NodeId,
    yhat1: NodeId,
    yhat2: NodeId,
) -> Result<NodeId> {
    let d1 = graph.sub(yhat1, y)?;
    let n1 = graph.smoothed_l2_norm(d1)?;
    let d2 = graph.sub(yhat2, y)?;
    let n2 = graph.smoothed_l2_norm(d2)?;
    let d12 = graph.sub(yhat1, yhat2)?;
    let n12 = graph.smoothed_l2_norm(d12)?;
    let fit = graph.add(n1, n2)?;
    let fit_half = graph.scale(fit, 0.5)?;
    let repulse_half = graph.scale(n12, 0.5)?;
    graph.sub(fit_half, repulse_half)
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The loss as a plain value, for validation passes that need no gradients.
pub fn energy_score_value(y: &[f64], yhat1: &[f64], yhat2: &[f64]) -> f64 {
    0.5 * (l2_distance(yhat1, y) + l2_distance(yhat2, y)) - 0.5 * l2_distance(yhat1, yhat2)
}

/// Mean two-draw loss over a batch: per sample, draw ε₁ and ε₂ independently,
/// run the forward pass twice, and average the per-sample losses. Windows and
/// targets are expected in normalized units.
pub fn batch_loss<R: Rng>(
    graph: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    batch: &[WindowedSample],
    rng: &mut R,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch_loss needs a nonempty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for (i, sample) in batch.iter().enumerate() {
        let e1 = NoiseDraw::standard_normal(config.noise_dim, rng, 2 * i as u64);
        let e2 = NoiseDraw::standard_normal(config.noise_dim, rng, 2 * i as u64 + 1);
        let yhat1 = model_forward(graph, bound, config, &sample.x, &e1)?;
        let yhat2 = model_forward(graph, bound, config, &sample.x, &e2)?;
        let y = graph.leaf(sample.y.clone());
        let loss = energy_score_loss(graph, y, yhat1, yhat2)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, loss)?,
            None => loss,
        });
    }
    graph.scale(total.unwrap(), 1.0 / batch.len() as f64)
}

// ── Adam ─────────────────────────────────────────────────────────────

/// First/second moment buffers, one pair per parameter tensor, in the fixed
/// parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let names = params.names().map(String::from).collect();
        let m = params.tensors().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.tensors().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            names,
            m,
            v,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. `grads` must be keyed exactly like
/// the parameters, in the same order.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ModelParams,
    grads: &[(String, Tensor)],
    lr: f64,
) -> Result<()> {
    if grads.len() != state.names.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step got {} gradients for {} parameters",
            grads.len(),
            state.names.len()
        )));
    }
    for ((name, _), expected) in grads.iter().zip(state.names.iter()) {
        if name != expected {
            return Err(Error::InvalidArgument(format!(
                "gradient key {name} does not match parameter {expected}"
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let mut updated = Vec::with_capacity(grads.len());
    for (((name, grad), m), v) in grads.iter().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let current = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if grad.shape() != current.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    grad.shape(),
                    current.shape()
                ),
            ));
        }
        let mut new = current.clone();
        for (((w, g), mi), vi) in new
            .data_mut()
            .iter_mut()
            .zip(grad.data().iter())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * g;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        updated.push((name.clone(), new));
    }
    for (name, tensor) in updated {
        params.set(&name, tensor)?;
    }
    Ok(())
}

/// Pull this batch's parameter gradients off the graph, keyed and ordered
/// like the parameters. Unreached parameters get zero gradients.
pub fn collect_param_grads(
    graph: &Graph,
    bound: &BoundParams,
    params: &ModelParams,
) -> Vec<(String, Tensor)> {
    bound
        .entries()
        .map(|(name, node)| {
            let g = graph
                .grad(node)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params.get(name).expect("bound param").shape()));
            (name.to_string(), g)
        })
        .collect()
}

// ── Training loop ────────────────────────────────────────────────────

fn validation_loss<R: Rng>(
    params: &ModelParams,
    config: &ModelConfig,
    val: &[WindowedSample],
    rng: &mut R,
) -> Result<f64> {
    let mut sum = 0.0;
    for sample in val {
        let e1 = NoiseDraw::standard_normal(config.noise_dim, rng, 0);
        let e2 = NoiseDraw::standard_normal(config.noise_dim, rng, 1);
        let y1 = model_forward_value(params, &sample.x, &e1)?;
        let y2 = model_forward_value(params, &sample.x, &e2)?;
        sum += energy_score_value(sample.y.data(), y1.data(), y2.data());
    }
    Ok(sum / val.len() as f64)
}

/// Train on the dataset's training split, shuffling windows each epoch with
/// the seeded generator and evaluating validation loss with fresh noise draws
/// at every epoch end. With `patience > 0`, training stops once the best
/// validation epoch is more than `patience` epochs old and the best-epoch
/// parameters are returned; with `patience = 0` the final-epoch parameters
/// are returned. Aborts with a diagnostic naming epoch and batch if the loss
/// goes non-finite.
pub fn train(
    dataset: &FieldDataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    mcfg.validate()?;
    tcfg.validate()?;
    if mcfg.sensors != dataset.sensors().len() {
        return Err(Error::Config(format!(
            "model expects {} sensors, dataset has {}",
            mcfg.sensors,
            dataset.sensors().len()
        )));
    }
    if mcfg.lag != dataset.lag() {
        return Err(Error::Config(format!(
            "model lag {} does not match dataset lag {}",
            mcfg.lag,
            dataset.lag()
        )));
    }
    if mcfg.state_dim != dataset.field().m() {
        return Err(Error::Config(format!(
            "model state dim {} does not match field with {} cells",
            mcfg.state_dim,
            dataset.field().m()
        )));
    }

    let train_idx = dataset.windows_in(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let val_idx = dataset.windows_in(Split::Val);
    if tcfg.patience > 0 && val_idx.is_empty() {
        return Err(Error::Config(
            "early stopping (patience > 0) requires a nonempty validation split".into(),
        ));
    }
    let train_samples: Vec<WindowedSample> = train_idx
        .iter()
        .map(|&i| dataset.window_normalized(i))
        .collect();
    let val_samples: Vec<WindowedSample> = val_idx
        .iter()
        .map(|&i| dataset.window_normalized(i))
        .collect();

    let mut shuffle_rng = substream(tcfg.seed, Stream::Shuffle);
    let mut noise_rng = substream(tcfg.seed, Stream::TrainNoise);
    let mut val_rng = substream(tcfg.seed, Stream::ValNoise);

    let mut params = init_params(mcfg, &mut substream(tcfg.seed, Stream::ParamInit))?;
    let mut adam = AdamState::new(&params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps);

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, usize, ModelParams)> = None;

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 0..tcfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<WindowedSample> =
                chunk.iter().map(|&i| train_samples[i].clone()).collect();
            let mut graph = Graph::new();
            let bound = bind_params(&mut graph, &params);
            let loss_node = batch_loss(&mut graph, &bound, mcfg, &batch, &mut noise_rng)?;
            let loss = graph.value(loss_node).item()?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batch_no}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            graph.backward(loss_node)?;
            let grads = collect_param_grads(&graph, &bound, &params);
            adam_step(&mut adam, &mut params, &grads, tcfg.learning_rate)?;
        }
        history.train_loss.push(loss_sum / train_samples.len() as f64);

        if val_samples.is_empty() {
            history.val_loss.push(None);
        } else {
            let vl = validation_loss(&params, mcfg, &val_samples, &mut val_rng)?;
            if !vl.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite validation loss {vl} at epoch {epoch}"
                )));
            }
            history.val_loss.push(Some(vl));
            let improved = best.as_ref().map_or(true, |(b, _, _)| vl < *b);
            if improved {
                best = Some((vl, epoch, params.clone()));
                history.best_epoch = Some(epoch);
            }
            if tcfg.patience > 0 {
                let best_epoch = best.as_ref().map(|(_, e, _)| *e).unwrap_or(epoch);
                if epoch - best_epoch > tcfg.patience {
                    break;
                }
            }
        }
    }

    let final_params = if tcfg.patience > 0 {
        best.map(|(_, _, p)| p).unwrap_or(params)
    } else {
        params
    };
    Ok((final_params, history))
}
