//! Training with Adam on closed-loop rollouts, and rollout evaluation
//! against ground truth.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff_cnn::{ConvNet, Gradients};
use crate::datagen::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::neural_pde::{LossGrad, ModelSolver, NeuralPdeModel};
use crate::tensor_grid::GridField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    NeuralPde1,
    NeuralPde2,
    Cnn,
    Persistence,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::NeuralPde1, ModelKind::NeuralPde2, ModelKind::Cnn, ModelKind::Persistence];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::NeuralPde1 => "neuralpde1",
            ModelKind::NeuralPde2 => "neuralpde2",
            ModelKind::Cnn => "cnn",
            ModelKind::Persistence => "persistence",
        }
    }

    pub fn temporal_order(self) -> Option<usize> {
        match self {
            ModelKind::NeuralPde1 => Some(1),
            ModelKind::NeuralPde2 => Some(2),
            _ => None,
        }
    }

    /// Epoch budget of the reference protocol.
    pub fn default_epochs(self) -> usize {
        match self {
            ModelKind::NeuralPde1 | ModelKind::NeuralPde2 => 5,
            _ => 20,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model `{s}`; expected neuralpde1, neuralpde2, cnn or persistence")))
    }
}

/// Per-channel affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over every frame of `data`. Channels with zero spread keep
    /// unit scale.
    pub fn fit(data: &TrajectoryDataset) -> Result<Self> {
        let c = data.channels();
        if c == 0 {
            return Err(Error::InvalidConfig("cannot fit a standardizer on an empty dataset".into()));
        }
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for f in data.trajectories.iter().flatten() {
            for ch in 0..c {
                for &v in f.channel(ch) {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += f.shape().plane();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, f: &GridField) -> Result<GridField> {
        self.affine(f, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, f: &GridField) -> Result<GridField> {
        self.affine(f, |v, m, s| v * s + m)
    }

    fn affine(&self, f: &GridField, op: impl Fn(f64, f64, f64) -> f64) -> Result<GridField> {
        if f.channels() != self.mean.len() {
            return Err(Error::shape("Standardizer", self.mean.len(), f.channels()));
        }
        let plane = f.shape().plane();
        let data = f
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| op(v, self.mean[i / plane], self.std[i / plane]))
            .collect();
        GridField::new(f.shape(), f.dx(), f.dy(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    NeuralPde(NeuralPdeModel),
    Cnn(ConvNet),
    Persistence,
}

/// A model together with the data normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub standardizer: Option<Standardizer>,
}

impl TrainedModel {
    pub fn persistence() -> Self {
        Self { model: Model::Persistence, standardizer: None }
    }

    pub fn kind(&self) -> ModelKind {
        match &self.model {
            Model::NeuralPde(m) if m.temporal_order == 1 => ModelKind::NeuralPde1,
            Model::NeuralPde(_) => ModelKind::NeuralPde2,
            Model::Cnn(_) => ModelKind::Cnn,
            Model::Persistence => ModelKind::Persistence,
        }
    }

    pub fn net(&self) -> Option<&ConvNet> {
        match &self.model {
            Model::NeuralPde(m) => Some(&m.net),
            Model::Cnn(n) => Some(n),
            Model::Persistence => None,
        }
    }

    fn net_mut(&mut self) -> Option<&mut ConvNet> {
        match &mut self.model {
            Model::NeuralPde(m) => Some(&mut m.net),
            Model::Cnn(n) => Some(n),
            Model::Persistence => None,
        }
    }

    /// `horizon` closed-loop predictions from `u0`, in data units.
    pub fn predict(&self, u0: &GridField, horizon: usize) -> Result<Vec<GridField>> {
        let x = match &self.standardizer {
            Some(s) => s.apply(u0)?,
            None => u0.clone(),
        };
        let out = self.predict_normalized(&x, horizon)?;
        match &self.standardizer {
            Some(s) => out.iter().map(|f| s.invert(f)).collect(),
            None => Ok(out),
        }
    }

    fn predict_normalized(&self, x: &GridField, horizon: usize) -> Result<Vec<GridField>> {
        match &self.model {
            Model::NeuralPde(m) => m.predict(x, horizon),
            Model::Cnn(net) => {
                let mut out = Vec::with_capacity(horizon);
                let mut u = x.clone();
                for _ in 0..horizon {
                    u = net.forward(&u)?;
                    out.push(u.clone());
                }
                Ok(out)
            }
            Model::Persistence => Ok(persistence_model(x, horizon)),
        }
    }

    /// Training loss and gradient on one sample, in normalized units.
    fn loss_and_grad(&self, u0: &GridField, targets: &[GridField]) -> Result<LossGrad> {
        match &self.model {
            Model::NeuralPde(m) => m.loss_and_grad_adjoint(u0, targets),
            Model::Cnn(net) => cnn_loss_and_grad(net, u0, targets),
            Model::Persistence => Err(Error::InvalidConfig("the persistence model has no parameters to train".into())),
        }
    }

    fn loss(&self, u0: &GridField, targets: &[GridField]) -> Result<f64> {
        let pred = self.predict_normalized(u0, targets.len())?;
        mse(&pred, targets)
    }
}

pub fn persistence_model(u0: &GridField, horizon: usize) -> Vec<GridField> {
    vec![u0.clone(); horizon]
}

fn mse(pred: &[GridField], targets: &[GridField]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(targets) {
        let d = p.sub(t)?;
        sum += d.dot(&d)?;
        n += d.data().len();
    }
    Ok(sum / n as f64)
}

/// Recurrent rollout `u_{k+1} = CNN(u_k)` differentiated end to end.
pub fn cnn_loss_and_grad(net: &ConvNet, u0: &GridField, targets: &[GridField]) -> Result<LossGrad> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("loss needs at least one target frame".into()));
    }
    let mut caches = Vec::with_capacity(targets.len());
    let mut preds = Vec::with_capacity(targets.len());
    let mut u = u0.clone();
    for _ in targets {
        let (next, cache) = net.forward_cached(&u)?;
        caches.push(cache);
        preds.push(next.clone());
        u = next;
    }
    let count = (targets.len() * u0.data().len()) as f64;
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(targets.len());
    for (p, t) in preds.iter().zip(targets) {
        let r = p.sub(t)?;
        loss += r.dot(&r)?;
        cot.push(r.scale(2.0 / count));
    }
    let mut grads = Gradients::zeros_like(net);
    let mut g = cot.pop().expect("non-empty");
    for k in (0..targets.len()).rev() {
        let (gx, gp) = net.backward_cached(&caches[k], &g)?;
        grads.accumulate(&gp, 1.0);
        if k > 0 {
            g = gx.add(&cot[k - 1])?;
        }
    }
    Ok(LossGrad { loss: loss / count, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("AdamState::update", self.m.len(), format!("{} params, {} grads", params.len(), grads.len())));
        }
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub horizon: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub solver: ModelSolver,
    /// Fixed batches drawn once for validation and for the train-loss monitor.
    pub eval_batches: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            batch_size: 8,
            steps_per_epoch: 5000,
            epochs: 5,
            adam: AdamConfig::default(),
            solver: ModelSolver::default(),
            eval_batches: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        Self { epochs: kind.default_epochs(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.batch_size == 0 || self.eval_batches == 0 {
            return Err(Error::InvalidConfig("horizon, batch_size and eval_batches must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(a.eps > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::InvalidConfig("Adam needs lr > 0, eps > 0 and betas in [0, 1)".into()));
        }
        if !(self.solver.dt > 0.0) || !(self.solver.rtol > 0.0) || !(self.solver.atol > 0.0) {
            return Err(Error::InvalidConfig("solver dt and tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// An initial state and the `H` frames that follow it.
pub type Sample = (GridField, Vec<GridField>);

/// Draws `batch_size` windows uniformly over all (trajectory, start) pairs
/// with room for `horizon` targets.
pub fn sample_batch(data: &TrajectoryDataset, horizon: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    let windows: Vec<(usize, usize)> = data
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(n, t)| (0..t.len().saturating_sub(horizon)).map(move |s| (n, s)))
        .collect();
    if windows.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "split `{}` has no trajectory longer than the horizon {horizon}",
            data.split
        )));
    }
    Ok((0..batch_size)
        .map(|_| {
            let (n, s) = windows[rng.gen_range(0..windows.len())];
            let t = &data.trajectories[n];
            (t[s].clone(), t[s + 1..=s + horizon].to_vec())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch's updates.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// The best-validation model (the initial one if no epoch improved).
    pub model: TrainedModel,
    pub best_epoch: usize,
    /// Loss on the fixed training monitor batches before any update.
    pub initial_train_loss: f64,
    /// The same monitor loss after the last completed update.
    pub final_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss or solver failure.
    pub diverged: Option<Divergence>,
}

/// Initializes a model of `kind` for `data` and trains it.
pub fn train(kind: ModelKind, data: &TrainSplits<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let o = data.train.channels();
    if o == 0 {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    let model = match kind.temporal_order() {
        Some(p) => Model::NeuralPde(NeuralPdeModel::init(p, o, cfg.solver, cfg.seed)?),
        None if kind == ModelKind::Cnn => Model::Cnn(ConvNet::init(o, o, cfg.seed)?),
        None => return Err(Error::InvalidConfig("the persistence model has no parameters to train".into())),
    };
    let standardizer = if data.train.system.name() == "gas_dynamics" {
        Some(Standardizer::fit(data.train)?)
    } else {
        None
    };
    train_model(TrainedModel { model, standardizer }, data, cfg)
}

/// Training and validation data.
#[derive(Debug, Clone, Copy)]
pub struct TrainSplits<'a> {
    pub train: &'a TrajectoryDataset,
    pub val: &'a TrajectoryDataset,
}

/// Trains an already constructed model.
pub fn train_model(mut model: TrainedModel, data: &TrainSplits<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let normalize = |d: &TrajectoryDataset| -> Result<TrajectoryDataset> {
        match &model.standardizer {
            None => Ok(d.clone()),
            Some(s) => {
                let trajectories = d
                    .trajectories
                    .iter()
                    .map(|t| t.iter().map(|f| s.apply(f)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                Ok(TrajectoryDataset { trajectories, ..d.clone() })
            }
        }
    };
    let train = normalize(data.train)?;
    let val = if data.val.is_empty() { train.clone() } else { normalize(data.val)? };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fixed = |d: &TrajectoryDataset, salt: u64| -> Result<Vec<Sample>> {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
        let mut out = Vec::new();
        for _ in 0..cfg.eval_batches {
            out.extend(sample_batch(d, cfg.horizon, cfg.batch_size, &mut r)?);
        }
        Ok(out)
    };
    let monitor = fixed(&train, 0x6d6f_6e69)?;
    let val_set = fixed(&val, 0x7661_6c69)?;

    let initial_train_loss = mean_loss(&model, &monitor)?;
    let initial_val_loss = mean_loss(&model, &val_set)?;
    let n_params = model.net().map_or(0, |n| n.param_count());
    let mut adam = AdamState::new(n_params);
    let mut best = (initial_val_loss, 0usize, model.clone());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut diverged = None;
    let mut final_train_loss = initial_train_loss;

    'outer: for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let batch = sample_batch(&train, cfg.horizon, cfg.batch_size, &mut rng)?;
            let fail = |message: String| Divergence { epoch, step, message };
            let (loss, grads) = match batch_gradient(&model, &batch) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => {
                    diverged = Some(fail(e.to_string()));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                diverged = Some(fail(format!("non-finite loss {loss}")));
                break 'outer;
            }
            sum += loss;
            let net = model.net_mut().expect("trainable model");
            let mut theta = net.to_flat();
            adam.update(&mut theta, &grads, &cfg.adam)?;
            net.set_flat(&theta)?;
        }
        let val_loss = match mean_loss(&model, &val_set) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                diverged = Some(Divergence { epoch, step: cfg.steps_per_epoch, message: format!("non-finite validation loss {v}") });
                break;
            }
            Err(e) if e.is_numerical() => {
                diverged = Some(Divergence { epoch, step: cfg.steps_per_epoch, message: e.to_string() });
                break;
            }
            Err(e) => return Err(e),
        };
        epochs.push(EpochLog {
            epoch,
            train_loss: if cfg.steps_per_epoch == 0 { f64::NAN } else { sum / cfg.steps_per_epoch as f64 },
            val_loss,
        });
        final_train_loss = mean_loss(&model, &monitor).unwrap_or(f64::NAN);
        if val_loss < best.0 {
            best = (val_loss, epoch, model.clone());
        }
    }
    Ok(TrainReport {
        model: best.2,
        best_epoch: best.1,
        initial_train_loss,
        final_train_loss,
        initial_val_loss,
        epochs,
        diverged,
    })
}

/// Mean loss and mean flat gradient over a batch. Samples are processed in
/// parallel and reduced in batch order.
fn batch_gradient(model: &TrainedModel, batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
    let parts = batch
        .par_iter()
        .map(|(u0, t)| model.loss_and_grad(u0, t))
        .collect::<Result<Vec<_>>>()?;
    let net = model.net().expect("trainable model");
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    let w = 1.0 / batch.len() as f64;
    for p in &parts {
        loss += p.loss * w;
        grads.accumulate(&p.grads, w);
    }
    Ok((loss, grads.to_flat()))
}

fn mean_loss(model: &TrainedModel, samples: &[Sample]) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|(u0, t)| model.loss(u0, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub horizon: usize,
    pub channels: Vec<String>,
    /// `rmse[h - 1][c]`: RMSE at step `h` for channel `c`.
    pub rmse: Vec<Vec<f64>>,
    /// RMSE at each step over all channels.
    pub rmse_all: Vec<f64>,
    /// Mean of `rmse_all`.
    pub mean_rmse: f64,
    pub starts: usize,
}

impl EvalReport {
    /// Long-format rows `horizon,channel,rmse`, one per step and channel.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,channel,rmse\n");
        for (h, row) in self.rmse.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                s.push_str(&format!("{},{},{:e}\n", h + 1, self.channels[c], v));
            }
        }
        s
    }
}

/// Rolls `model` out for `horizon` steps from every valid start of every
/// trajectory and reports RMSE per step in data units.
pub fn evaluate(model: &TrainedModel, data: &TrajectoryDataset, horizon: usize, model_id: &str) -> Result<EvalReport> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("evaluation horizon must be positive".into()));
    }
    let c = data.channels();
    let starts: Vec<(usize, usize)> = data
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(n, t)| (0..t.len().saturating_sub(horizon)).map(move |s| (n, s)))
        .collect();
    if starts.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no trajectory in split `{}` is longer than the horizon {horizon}",
            data.split
        )));
    }
    // Squared-error sums per (step, channel), one block per start.
    let per_start = starts
        .par_iter()
        .map(|&(n, s)| -> Result<Vec<f64>> {
            let t = &data.trajectories[n];
            let pred = model.predict(&t[s], horizon)?;
            let mut acc = vec![0.0; horizon * c];
            for (h, p) in pred.iter().enumerate() {
                let truth = &t[s + h + 1];
                for ch in 0..c {
                    acc[h * c + ch] = p.channel(ch).iter().zip(truth.channel(ch)).map(|(a, b)| (a - b) * (a - b)).sum();
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0; horizon * c];
    for block in &per_start {
        for (t, v) in total.iter_mut().zip(block) {
            *t += v;
        }
    }
    let plane = data.frame_shape().expect("non-empty").plane();
    let per_channel_count = (starts.len() * plane) as f64;
    let rmse: Vec<Vec<f64>> = (0..horizon)
        .map(|h| (0..c).map(|ch| (total[h * c + ch] / per_channel_count).sqrt()).collect())
        .collect();
    let rmse_all: Vec<f64> = (0..horizon)
        .map(|h| (total[h * c..(h + 1) * c].iter().sum::<f64>() / (per_channel_count * c as f64)).sqrt())
        .collect();
    let mean_rmse = rmse_all.iter().sum::<f64>() / horizon as f64;
    Ok(EvalReport {
        model: model_id.to_string(),
        dataset: format!("{}/{}", data.system.name(), data.split),
        horizon,
        channels: data.channel_labels.clone(),
        rmse,
        rmse_all,
        mean_rmse,
        starts: starts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_grid::Shape;
    use crate::{PdeParams, PdeSystem};

    fn dataset(frames: Vec<Vec<GridField>>, system: PdeSystem) -> TrajectoryDataset {
        let c = frames[0][0].channels();
        TrajectoryDataset {
            system,
            split: "test".into(),
            channel_labels: (0..c).map(|i| format!("c{i}")).collect(),
            dx: 0.1,
            dy: 0.1,
            dt: 1.0,
            seeds: (0..frames.len() as u64).collect(),
            trajectories: frames,
        }
    }

    fn field(seed: u64, c: usize, n: usize) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridField::from_fn(Shape::new(c, n, n), 0.1, 0.1, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Frames of a field translated one cell per step.
    fn moving(seed: u64, frames: usize) -> Vec<GridField> {
        let f = field(seed, 1, 6);
        (0..frames).map(|k| f.shift(k as isize, 0)).collect()
    }

    #[test]
    fn adam_zero_gradient() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.3, 0.4];
        AdamState::new(2).update(&mut p, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(p, vec![0.3, 0.4]);

        let mut s = AdamState { m: vec![1.0, -1.0], v: vec![0.5, 0.5], step: 3 };
        s.update(&mut p, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(s.m, vec![0.9, -0.9]);
        assert_eq!(s.v, vec![0.999 * 0.5; 2]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(1);
        let mut p = vec![0.0];
        s.update(&mut p, &[1.0], &cfg).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = -lr / (1 + eps).
        assert!((p[0] + cfg.lr / (1.0 + cfg.eps)).abs() < 1e-18);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut s = AdamState::new(1);
        let mut w = vec![1.0];
        for _ in 0..1000 {
            let g = 2.0 * w[0];
            s.update(&mut w, &[g], &cfg).unwrap();
        }
        assert!(w[0].abs() < 1e-3, "w = {}", w[0]);
    }

    #[test]
    fn batch_sampling() {
        let data = dataset(vec![moving(0, 6), moving(1, 3)], PdeSystem::advection_diffusion());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&data, 4, 50, &mut rng).unwrap();
        assert_eq!(batch.len(), 50);
        for (u0, targets) in &batch {
            assert_eq!(targets.len(), 4);
            // Only the 6-frame trajectory has room for 4 targets.
            let t = &data.trajectories[0];
            let s = t.iter().position(|f| f == u0).unwrap();
            assert_eq!(targets[..], t[s + 1..s + 5]);
        }
        let again = sample_batch(&data, 4, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again, batch);
        assert!(sample_batch(&data, 6, 1, &mut rng).is_err());
    }

    #[test]
    fn persistence_baseline() {
        let u0 = field(2, 2, 4);
        assert_eq!(persistence_model(&u0, 3), vec![u0.clone(); 3]);
        let still = dataset(vec![vec![u0.clone(); 20]], PdeSystem::burgers());
        let r = evaluate(&TrainedModel::persistence(), &still, 16, "persistence").unwrap();
        assert!(r.rmse_all.iter().all(|&v| v == 0.0));
        assert_eq!(r.starts, 4);
        assert_eq!(r.to_csv().lines().count(), 1 + 16 * 2);
    }

    #[test]
    fn persistence_rmse_is_frame_difference() {
        let traj = moving(3, 20);
        let data = dataset(vec![traj.clone()], PdeSystem::advection_diffusion());
        let r = evaluate(&TrainedModel::persistence(), &data, 3, "p").unwrap();
        for h in 1..=3 {
            let mut sum = 0.0;
            let mut n = 0;
            for s in 0..17 {
                for (a, b) in traj[s].data().iter().zip(traj[s + h].data()) {
                    sum += (a - b) * (a - b);
                    n += 1;
                }
            }
            assert!((r.rmse_all[h - 1] - (sum / n as f64).sqrt()).abs() < 1e-12);
        }
        let mean = r.rmse_all.iter().sum::<f64>() / 3.0;
        assert!((r.mean_rmse - mean).abs() <= 1e-12);
    }

    #[test]
    fn replaying_truth_gives_zero_rmse() {
        // A one-layer shift kernel reproduces data that moves one cell per step.
        let mut w = vec![0.0; 9];
        w[1] = 1.0; // out[i, j] = in[i - 1, j]
        let net = ConvNet::from_layers(vec![crate::Layer {
            kernel: crate::Kernel::new(1, 1, 3, 3, w, vec![0.0]).unwrap(),
            activation: crate::Activation::Linear,
        }])
        .unwrap();
        let model = TrainedModel { model: Model::Cnn(net), standardizer: None };
        let data = dataset(vec![moving(4, 24), moving(5, 24)], PdeSystem::advection_diffusion());
        let r = evaluate(&model, &data, 16, "shift").unwrap();
        assert!(r.rmse_all.iter().all(|&v| v < 1e-15));
    }

    #[test]
    fn cnn_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut k = |o, i| {
            crate::Kernel::new(o, i, 3, 3, (0..o * i * 9).map(|_| rng.gen_range(-0.4..0.4)).collect(), vec![0.05; o]).unwrap()
        };
        let net = ConvNet::from_layers(vec![
            crate::Layer { kernel: k(2, 1), activation: crate::Activation::Selu },
            crate::Layer { kernel: k(1, 2), activation: crate::Activation::Linear },
        ])
        .unwrap();
        let u0 = field(7, 1, 5);
        let targets = vec![field(8, 1, 5), field(9, 1, 5), field(10, 1, 5)];
        let lg = cnn_loss_and_grad(&net, &u0, &targets).unwrap();
        let theta = net.to_flat();
        let analytic = lg.grads.to_flat();
        for i in 0..theta.len() {
            let eval = |d: f64| {
                let mut t = theta.clone();
                t[i] += d;
                let mut n = net.clone();
                n.set_flat(&t).unwrap();
                cnn_loss_and_grad(&n, &u0, &targets).unwrap().loss
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((fd - analytic[i]).abs() <= 1e-5 * fd.abs().max(analytic[i].abs()).max(1e-3), "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn standardizer_roundtrip() {
        let frames = vec![(0..5).map(|k| field(20 + k, 4, 5).map(|v| 1.5 + 0.3 * v)).collect::<Vec<_>>()];
        let data = dataset(frames, PdeSystem::gas_dynamics());
        let s = Standardizer::fit(&data).unwrap();
        let f = &data.trajectories[0][2];
        let back = s.invert(&s.apply(f).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.mean.iter().all(|m| (m - 1.5).abs() < 0.1));
    }

    fn splits_for_training() -> (TrajectoryDataset, TrajectoryDataset) {
        let sys = PdeSystem::new(PdeParams::AdvectionDiffusion { c_x: 1.0, c_y: 0.0, d: 0.0 }, 0.1).unwrap();
        let tr = dataset((0..3).map(|s| moving(30 + s, 12)).collect(), sys.clone());
        let va = dataset(vec![moving(40, 12)], sys);
        (tr, va)
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { steps_per_epoch: 10, epochs, batch_size: 2, eval_batches: 1, horizon: 2, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (tr, va) = splits_for_training();
        let data = TrainSplits { train: &tr, val: &va };
        let r = train(ModelKind::NeuralPde1, &data, &quick_cfg(0)).unwrap();
        let Model::NeuralPde(m) = &r.model.model else { panic!() };
        assert_eq!(m, &NeuralPdeModel::init(1, 1, ModelSolver::default(), 3).unwrap());
        assert!(r.epochs.is_empty());
        assert_eq!(r.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_logs_each_epoch() {
        let (tr, va) = splits_for_training();
        let data = TrainSplits { train: &tr, val: &va };
        for kind in [ModelKind::NeuralPde2, ModelKind::Cnn] {
            let a = train(kind, &data, &quick_cfg(2)).unwrap();
            let b = train(kind, &data, &quick_cfg(2)).unwrap();
            assert_eq!(a.epochs.len(), 2);
            assert_eq!(a.model, b.model);
            assert_eq!(a.epochs, b.epochs);
            assert!(a.diverged.is_none());
            assert_eq!(a.model.kind(), kind);
        }
        assert!(train(ModelKind::Persistence, &data, &quick_cfg(1)).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (tr, va) = splits_for_training();
        let data = TrainSplits { train: &tr, val: &va };
        let cfg = TrainConfig { adam: AdamConfig { lr: 1e30, ..AdamConfig::default() }, ..quick_cfg(3) };
        let r = train(ModelKind::Cnn, &data, &cfg).unwrap();
        let d = r.diverged.expect("a 1e30 learning rate must blow up");
        assert!(d.epoch >= 1);
        // The retained model is still finite.
        let u0 = &tr.trajectories[0][0];
        if let Ok(p) = r.model.predict(u0, 1) {
            assert!(p[0].is_finite());
        }
    }

    #[test]
    fn model_kind_names() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("resnet".parse::<ModelKind>().is_err());
        assert_eq!(ModelKind::Cnn.default_epochs(), 20);
        assert_eq!(ModelKind::NeuralPde1.default_epochs(), 5);
    }
}
