//! AdamW pre-training with linear warmup and cosine decay, periodic probes on
//! held-out tasks, checkpointing and early-stopping selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    make_eval_sequences, sample_tasks_rectangular, split_inputs, BatchSampler, DatasetError, EvalSet, InputSplit,
    TaskSplit, TaskVector, TokenSequence,
};
use crate::gfp::{FieldError, PrimeField};
use crate::model::{init_params, ModelConfig, ModelError, ParamKind, ParameterSet};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFinite { step: u64, loss: f64, lr: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e.to_string())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    /// Warmup starts at this multiple of `lr`.
    pub warmup_start: f64,
    /// Cosine decay ends at this multiple of `lr`.
    pub final_lr: f64,
    pub probe_interval: u64,
    pub probe_sequences: usize,
    pub probe_seed: u64,
    pub seed: u64,
    /// Stop at the first probe whose training last-shot accuracy reaches this.
    pub stop_at_train_acc: Option<f64>,
    /// Stop at the first probe whose held-out last-shot accuracy reaches this.
    pub stop_at_ood_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            weight_decay: 2.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            steps: 200_000,
            batch_size: 1024,
            warmup_fraction: 0.05,
            warmup_start: 0.01,
            final_lr: 0.1,
            probe_interval: 1000,
            probe_sequences: 16,
            probe_seed: 1234,
            seed: 0,
            stop_at_train_acc: None,
            stop_at_ood_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and eps must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.steps == 0 || self.batch_size == 0 || self.probe_interval == 0 || self.probe_sequences == 0 {
            return bad("steps, batch_size, probe_interval and probe_sequences must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if !(self.warmup_start > 0.0 && self.final_lr > 0.0) {
            return bad("warmup_start and final_lr must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.steps as f64).round() as u64
    }
}

/// Learning rate before update `step` (0-based); also defined at `steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(TrainError::StepOutOfRange { step, total: cfg.steps });
    }
    let peak = cfg.lr;
    let start = cfg.warmup_start * peak;
    let end = cfg.final_lr * peak;
    let warm = cfg.warmup_steps();
    if step < warm {
        let t = step as f64 / warm as f64;
        return Ok(start * (1.0 - t) + peak * t);
    }
    if cfg.steps == warm {
        return Ok(peak);
    }
    let q = (step - warm) as f64 / (cfg.steps - warm) as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * q).cos());
    Ok(end * (1.0 - w) + peak * w)
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self { m, v, t: 0 }
    }

    pub fn for_params(params: &ParameterSet<T>) -> Self {
        let shapes: Vec<Vec<usize>> = params.named_params().iter().map(|(_, _, t)| t.shape().to_vec()).collect();
        Self::new(shapes.iter().map(|s| s.as_slice()))
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
/// Tensors of kind [`ParamKind::LayerNormGain`] are not decayed.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    kinds: &[ParamKind],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    assert!(params.len() == grads.len() && params.len() == kinds.len() && params.len() == state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (tb1, tb2) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let step = T::of(lr / c1);
    let inv_c2 = T::of(1.0 / c2);
    let eps = T::of(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if kinds[i] == ParamKind::LayerNormGain { T::one() } else { T::of(1.0 - lr * cfg.weight_decay) };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = tb1 * *mi + ob1 * g;
            *vi = tb2 * *vi + ob2 * g * g;
            *w = *w * decay - step * *mi / ((*vi * inv_c2).sqrt() + eps);
        }
    }
}

/// Problem definition: field, task split, input split and context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub p: u32,
    pub n_id: usize,
    pub alpha: f64,
    pub n_ctx: usize,
    pub task_seed: u64,
    pub input_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { p: 29, n_id: 128, alpha: 0.7, n_ctx: 32, task_seed: 0, input_seed: 0 }
    }
}

/// The materialized problem a run trains on.
#[derive(Debug, Clone)]
pub struct Problem {
    pub field: PrimeField,
    pub tasks: TaskSplit,
    pub inputs: InputSplit,
    pub n_ctx: usize,
}

impl DataConfig {
    pub fn build(&self) -> Result<Problem> {
        let field = PrimeField::new(self.p)?;
        let tasks = sample_tasks_rectangular(self.n_id, &field, self.task_seed)?;
        let inputs = split_inputs(self.alpha, &field, self.input_seed)?;
        if self.n_ctx == 0 {
            return Err(TrainError::Config("n_ctx must be positive".into()));
        }
        if self.n_ctx > inputs.train.len() {
            return Err(DatasetError::ContextTooLong { n_ctx: self.n_ctx, available: inputs.train.len() }.into());
        }
        Ok(Problem { field, tasks, inputs, n_ctx: self.n_ctx })
    }
}

impl Problem {
    pub fn eval_sequences(&self, which: EvalSet, count: usize, seed: u64) -> Result<Vec<TokenSequence>> {
        Ok(make_eval_sequences(&self.field, which, count, &self.tasks, &self.inputs, self.n_ctx, seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub a: u32,
    pub b: u32,
    pub acc_last_shot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// Updates completed when the probe was taken.
    pub step: u64,
    pub lr: f64,
    /// Mean loss over every label of the most recent training batch.
    pub train_loss: f64,
    pub train_acc_last_shot: f64,
    pub train_acc_mean: f64,
    /// Held-out metrics; absent when the problem has no o.o.d.-test set.
    pub ood_loss: Option<f64>,
    pub ood_acc_last_shot: Option<f64>,
    pub ood_loss_mean: Option<f64>,
    pub ood_acc_mean: Option<f64>,
    pub task_acc: Vec<TaskAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub step: u64,
    /// Relative to the run directory.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunRecord {
    pub probes: Vec<Probe>,
    pub checkpoints: Vec<CheckpointEntry>,
    /// Step of the probe chosen by [`select_early_stop`].
    pub best_step: Option<u64>,
    pub stopped_early: bool,
}

impl RunRecord {
    pub fn write_metrics_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| TrainError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "lr", "train_loss", "train_acc_last_shot", "ood_loss", "ood_acc_last_shot"])
            .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.probes {
            w.write_record([
                p.step.to_string(),
                p.lr.to_string(),
                p.train_loss.to_string(),
                p.train_acc_last_shot.to_string(),
                opt(p.ood_loss),
                opt(p.ood_acc_last_shot),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of the probe with the highest o.o.d.-test last-shot accuracy, the
/// earliest on ties. Without o.o.d. metrics the last probe is chosen.
pub fn select_early_stop(record: &RunRecord) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in record.probes.iter().enumerate() {
        if let Some(acc) = p.ood_acc_last_shot {
            if best.map_or(true, |(_, b)| acc > b) {
                best = Some((i, acc));
            }
        }
    }
    match best {
        Some((i, _)) => Some(i),
        None => record.probes.len().checked_sub(1),
    }
}

/// Parameters and history of a finished run.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub final_params: ParameterSet<f32>,
    /// Parameters at the early-stopping probe.
    pub best_params: ParameterSet<f32>,
}

/// Per-shot loss and accuracy of a model on fixed sequences.
pub fn evaluate_shots(params: &ParameterSet<f32>, seqs: &[TokenSequence], chunk: usize) -> Result<ShotSummary> {
    let n_ctx = seqs.first().map(|s| s.n_ctx()).unwrap_or(0);
    let mut loss = vec![0.0; n_ctx];
    let mut acc = vec![0.0; n_ctx];
    for part in seqs.chunks(chunk.max(1)) {
        let refs: Vec<&[u32]> = part.iter().map(|s| s.tokens.as_slice()).collect();
        let (nll, correct) = params.shot_scores(&refs)?;
        for (l, c) in nll.iter().zip(&correct) {
            for k in 0..n_ctx {
                loss[k] += l[k];
                acc[k] += c[k] as u8 as f64;
            }
        }
    }
    let n = seqs.len().max(1) as f64;
    loss.iter_mut().for_each(|v| *v /= n);
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(ShotSummary { loss, acc, count: seqs.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSummary {
    pub loss: Vec<f64>,
    pub acc: Vec<f64>,
    pub count: usize,
}

impl ShotSummary {
    pub fn last_loss(&self) -> f64 {
        *self.loss.last().unwrap_or(&f64::NAN)
    }
    pub fn last_acc(&self) -> f64 {
        *self.acc.last().unwrap_or(&f64::NAN)
    }
    pub fn mean_loss(&self) -> f64 {
        self.loss.iter().sum::<f64>() / self.loss.len().max(1) as f64
    }
    pub fn mean_acc(&self) -> f64 {
        self.acc.iter().sum::<f64>() / self.acc.len().max(1) as f64
    }
}

/// Everything a run directory snapshot records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn new(data: DataConfig, depth: usize, heads: usize, d_embed: usize, train: TrainConfig) -> Self {
        let model = ModelConfig::new(depth, heads, d_embed, data.p as usize, data.n_ctx);
        Self { data, model, train }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.model.vocab != self.data.p as usize {
            return Err(TrainError::Config(format!("model.vocab {} differs from p {}", self.model.vocab, self.data.p)));
        }
        if self.model.max_tokens < 3 * self.data.n_ctx {
            return Err(TrainError::Config("model.max_tokens is shorter than 3 * n_ctx".into()));
        }
        if self.data.n_id == 0 || self.train.batch_size % self.data.n_id != 0 {
            return Err(TrainError::Config(format!(
                "batch_size {} must be a positive multiple of n_id {}",
                self.train.batch_size, self.data.n_id
            )));
        }
        Ok(())
    }
}

/// Trains one model. With `run_dir`, writes `config.json`, `metrics.csv`,
/// `probes.json`, `best.ckpt` and `final.ckpt` there.
pub fn train(spec: &RunSpec, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(spec, run_dir, |_| {})
}

/// Reloads a finished run from `run_dir` if it was trained with exactly
/// `spec`. `probes.json` is written last, so its presence marks completion.
pub fn load_finished_run(spec: &RunSpec, run_dir: &Path) -> Option<TrainOutcome> {
    let saved: RunSpec = serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).ok()?).ok()?;
    if &saved != spec {
        return None;
    }
    let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(run_dir.join("probes.json")).ok()?).ok()?;
    let (final_params, _) = crate::model::load_checkpoint(&run_dir.join("final.ckpt")).ok()?;
    let (best_params, _) = crate::model::load_checkpoint(&run_dir.join("best.ckpt")).ok()?;
    Some(TrainOutcome { record, final_params, best_params })
}

/// As [`train`], calling `on_probe` after every probe.
pub fn train_with(spec: &RunSpec, run_dir: Option<&Path>, mut on_probe: impl FnMut(&Probe)) -> Result<TrainOutcome> {
    spec.validate()?;
    let problem = spec.data.build()?;
    let cfg = &spec.train;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(spec).map_err(|e| TrainError::Io(e.to_string()))?;
        std::fs::write(dir.join("config.json"), json)?;
    }

    let mut params = init_params::<f32>(&spec.model, cfg.seed)?;
    let kinds = params.param_kinds();
    let mut state = AdamState::for_params(&params);
    let sampler = BatchSampler::new(
        problem.field,
        problem.tasks.in_distribution.clone(),
        problem.inputs.train.clone(),
        problem.n_ctx,
        cfg.batch_size,
        cfg.seed ^ 0x5eed_ba7c_4e5u64,
    )?;
    let probe_set = problem.eval_sequences(EvalSet::OodTest, cfg.probe_sequences, cfg.probe_seed).ok();

    let mut record = RunRecord::default();
    let mut best: Option<(f64, ParameterSet<f32>)> = None;
    let mut best_probe_step = 0;
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg)?;
        let batch = sampler.batch(step);
        let out = params.loss_and_grads(&batch.sequences)?;
        if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { step, loss: out.loss, lr });
        }
        adamw_step(&mut params.params_mut(), &kinds, &out.grads, &mut state, lr, cfg);

        let done = step + 1;
        if done % cfg.probe_interval != 0 && done != cfg.steps {
            continue;
        }
        let probe = take_probe(&params, &batch.sequences, &out.correct, out.loss, done, lr, probe_set.as_deref())?;
        on_probe(&probe);
        let score = probe.ood_acc_last_shot.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, params.clone()));
            best_probe_step = done;
            if let Some(dir) = run_dir {
                params.save(&dir.join("best.ckpt"), cfg.seed, done, serde_json::to_value(spec).unwrap())?;
            }
        }
        let stop = cfg.stop_at_train_acc.is_some_and(|t| probe.train_acc_last_shot >= t)
            || cfg.stop_at_ood_acc.is_some_and(|t| probe.ood_acc_last_shot.is_some_and(|a| a >= t));
        record.probes.push(probe);
        if stop && done != cfg.steps {
            record.stopped_early = true;
            break;
        }
    }

    let final_step = record.probes.last().map(|p| p.step).unwrap_or(0);
    record.best_step = select_early_stop(&record).map(|i| record.probes[i].step);
    let best_params = match (&probe_set, best) {
        (Some(_), Some((_, b))) => b,
        _ => params.clone(),
    };
    let best_step = if probe_set.is_some() { best_probe_step } else { final_step };
    let path = |name: &str| run_dir.map(|_| PathBuf::from(name));
    record.checkpoints.push(CheckpointEntry { name: "best".into(), step: best_step, path: path("best.ckpt") });
    record.checkpoints.push(CheckpointEntry { name: "final".into(), step: final_step, path: path("final.ckpt") });
    if let Some(dir) = run_dir {
        if probe_set.is_none() {
            best_params.save(&dir.join("best.ckpt"), cfg.seed, best_step, serde_json::to_value(spec).unwrap())?;
        }
        params.save(&dir.join("final.ckpt"), cfg.seed, final_step, serde_json::to_value(spec).unwrap())?;
        record.write_metrics_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;
        let json = serde_json::to_string_pretty(&record).map_err(|e| TrainError::Io(e.to_string()))?;
        std::fs::write(dir.join("probes.json"), json)?;
    }
    Ok(TrainOutcome { record, final_params: params, best_params })
}

fn take_probe(
    params: &ParameterSet<f32>,
    batch: &[TokenSequence],
    correct: &[Vec<bool>],
    train_loss: f64,
    step: u64,
    lr: f64,
    probe_set: Option<&[TokenSequence]>,
) -> Result<Probe> {
    let n = correct.len() as f64;
    let last = correct.iter().filter(|c| *c.last().unwrap_or(&false)).count() as f64 / n;
    let mean = correct.iter().map(|c| c.iter().filter(|&&x| x).count() as f64 / c.len() as f64).sum::<f64>() / n;
    let mut per_task: BTreeMap<TaskVector, (usize, usize)> = BTreeMap::new();
    for (s, c) in batch.iter().zip(correct) {
        let e = per_task.entry(s.task).or_default();
        e.0 += *c.last().unwrap_or(&false) as usize;
        e.1 += 1;
    }
    let task_acc = per_task
        .into_iter()
        .map(|(t, (hit, tot))| TaskAccuracy { a: t.a, b: t.b, acc_last_shot: hit as f64 / tot as f64 })
        .collect();
    let ood = match probe_set {
        Some(seqs) => Some(evaluate_shots(params, seqs, 64)?),
        None => None,
    };
    Ok(Probe {
        step,
        lr,
        train_loss,
        train_acc_last_shot: last,
        train_acc_mean: mean,
        ood_loss: ood.as_ref().map(|o| o.last_loss()),
        ood_acc_last_shot: ood.as_ref().map(|o| o.last_acc()),
        ood_loss_mean: ood.as_ref().map(|o| o.mean_loss()),
        ood_acc_mean: ood.as_ref().map(|o| o.mean_acc()),
        task_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries_are_exact() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.01 * cfg.lr);
        assert_eq!(lr_at(10_000, &cfg).unwrap(), cfg.lr);
        assert_eq!(lr_at(cfg.steps, &cfg).unwrap(), 0.1 * cfg.lr);
        assert!(lr_at(cfg.steps + 1, &cfg).is_err());
        let before = lr_at(9_999, &cfg).unwrap();
        let after = lr_at(10_001, &cfg).unwrap();
        assert!((cfg.lr - before) < 1e-3 * cfg.lr && (cfg.lr - after) < 1e-3 * cfg.lr);
        let mut prev = f64::INFINITY;
        for s in (10_000..=cfg.steps).step_by(997) {
            let lr = lr_at(s, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut w = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let orig = w.clone();
        let mut st = AdamState::new([&[3usize][..]]);
        adamw_step(&mut [&mut w], &[ParamKind::Linear], &[Tensor::zeros(&[3])], &mut st, 1e-2, &cfg);
        assert_eq!(w, orig);
    }

    #[test]
    fn layer_norm_gains_are_not_decayed() {
        let cfg = TrainConfig { weight_decay: 2.0, ..TrainConfig::default() };
        let mut g = Tensor::<f64>::full(&[4], 1.0);
        let mut w = Tensor::<f64>::full(&[4], 1.0);
        let mut st = AdamState::new([&[4usize][..], &[4usize][..]]);
        let zeros = [Tensor::zeros(&[4]), Tensor::zeros(&[4])];
        adamw_step(&mut [&mut g, &mut w], &[ParamKind::LayerNormGain, ParamKind::Linear], &zeros, &mut st, 0.1, &cfg);
        assert!(g.data().iter().all(|&v| v == 1.0));
        assert!(w.data().iter().all(|&v| (v - 0.8).abs() < 1e-12));
    }

    #[test]
    fn adamw_matches_scalar_reference_on_a_quadratic() {
        // f(w) = 0.5 * c * w^2, two updates
        let cfg = TrainConfig { weight_decay: 0.3, ..TrainConfig::default() };
        let (c, lr) = (3.0, 0.05);
        let mut w = Tensor::<f64>::from_f64(&[1], &[0.7]).unwrap();
        let mut st = AdamState::new([&[1usize][..]]);
        let (mut rw, mut rm, mut rv) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = c * w.data()[0];
            adamw_step(&mut [&mut w], &[ParamKind::Linear], &[Tensor::from_f64(&[1], &[g]).unwrap()], &mut st, lr, &cfg);
            let rg = c * rw;
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.98 * rv + 0.02 * rg * rg;
            let mhat = rm / (1.0 - 0.9f64.powi(t));
            let vhat = rv / (1.0 - 0.98f64.powi(t));
            rw = rw - lr * 0.3 * rw - lr * mhat / (vhat.sqrt() + 1e-8);
            assert!((w.data()[0] - rw).abs() < 1e-12, "t={t}: {} vs {rw}", w.data()[0]);
        }
    }

    #[test]
    fn early_stop_selection() {
        let probe = |step, acc: Option<f64>| Probe {
            step,
            lr: 0.0,
            train_loss: 0.0,
            train_acc_last_shot: 0.0,
            train_acc_mean: 0.0,
            ood_loss: None,
            ood_acc_last_shot: acc,
            ood_loss_mean: None,
            ood_acc_mean: None,
            task_acc: vec![],
        };
        let rec = |accs: &[f64]| RunRecord {
            probes: accs.iter().enumerate().map(|(i, &a)| probe(i as u64 * 10 + 10, Some(a))).collect(),
            ..Default::default()
        };
        assert_eq!(select_early_stop(&rec(&[0.1, 0.2, 0.5])), Some(2));
        assert_eq!(select_early_stop(&rec(&[0.1, 0.6, 0.3])), Some(1));
        assert_eq!(select_early_stop(&rec(&[0.4, 0.4, 0.4])), Some(0));
        let none = RunRecord { probes: vec![probe(1, None), probe(2, None)], ..Default::default() };
        assert_eq!(select_early_stop(&none), Some(1));
        assert_eq!(select_early_stop(&RunRecord::default()), None);
    }

    #[test]
    fn smoke_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let data = DataConfig { p: 5, n_id: 4, alpha: 0.8, n_ctx: 3, task_seed: 1, input_seed: 2 };
        let train_cfg = TrainConfig { steps: 20, batch_size: 8, probe_interval: 10, lr: 1e-3, ..Default::default() };
        let spec = RunSpec::new(data, 1, 2, 8, train_cfg);
        let out = train(&spec, Some(dir.path())).unwrap();
        assert_eq!(out.record.probes.iter().map(|p| p.step).collect::<Vec<_>>(), [10, 20]);
        for f in ["config.json", "metrics.csv", "probes.json", "best.ckpt", "final.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let (loaded, info) = crate::model::load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(info.step, 20);
        assert_eq!(loaded, out.final_params);
        let again = train(&spec, None).unwrap();
        assert_eq!(again.record.probes, out.record.probes);
    }

    #[test]
    fn indivisible_batch_is_rejected() {
        let data = DataConfig { p: 5, n_id: 4, alpha: 0.8, n_ctx: 3, task_seed: 1, input_seed: 2 };
        let spec = RunSpec::new(data, 1, 2, 8, TrainConfig { batch_size: 6, ..Default::default() });
        assert!(matches!(train(&spec, None), Err(TrainError::Config(_))));
    }
}
