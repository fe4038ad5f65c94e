//! Per-shot metrics, phase classification and sweeps, loss-curve shape,
//! model-versus-oracle prediction grids and label corruption.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, EvalSet, TaskVector, TokenSequence};
use crate::gfp::PrimeField;
use crate::model::{ModelError, ParameterSet};
use crate::oracles::{oracle_grid, Algorithm, CellStatus, OracleError};
use crate::trainer::{load_finished_run, train, Problem, RunSpec, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty sequence set")]
    Empty,
    #[error("sequences in one evaluation must share a length")]
    Ragged,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e.to_string())
    }
}

impl From<csv::Error> for EvalError {
    fn from(e: csv::Error) -> Self {
        EvalError::Io(e.to_string())
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

const CHUNK: usize = 128;

/// Argmax prediction for every label position, `[sequence][shot]`.
pub fn predict_labels(params: &ParameterSet<f32>, seqs: &[&[u32]]) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(CHUNK) {
        let logits = params.forward(part, false)?.logits;
        let (t, v) = (logits.shape()[1], logits.shape()[2]);
        for s in 0..part.len() {
            out.push(
                (0..t / 3)
                    .map(|i| {
                        let row = &logits.data()[(s * t + 3 * i + 1) * v..(s * t + 3 * i + 2) * v];
                        let mut best = 0;
                        for (j, &x) in row.iter().enumerate() {
                            if x > row[best] {
                                best = j;
                            }
                        }
                        best as u32
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Mean loss and accuracy at each label position over a sequence set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotMetrics {
    pub set: String,
    pub loss_per_shot: Vec<f64>,
    pub acc_per_shot: Vec<f64>,
    pub count: usize,
}

impl ShotMetrics {
    pub fn last_loss(&self) -> f64 {
        *self.loss_per_shot.last().unwrap_or(&f64::NAN)
    }

    pub fn last_acc(&self) -> f64 {
        *self.acc_per_shot.last().unwrap_or(&f64::NAN)
    }

    pub fn mean_acc(&self) -> f64 {
        self.acc_per_shot.iter().sum::<f64>() / self.acc_per_shot.len().max(1) as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_per_shot.iter().sum::<f64>() / self.loss_per_shot.len().max(1) as f64
    }

    /// Sample-weighted combination of two disjoint evaluations.
    pub fn merge(&self, other: &ShotMetrics) -> Result<ShotMetrics> {
        if self.loss_per_shot.len() != other.loss_per_shot.len() {
            return Err(EvalError::Ragged);
        }
        let n = (self.count + other.count) as f64;
        let (wa, wb) = (self.count as f64 / n, other.count as f64 / n);
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect();
        Ok(ShotMetrics {
            set: self.set.clone(),
            loss_per_shot: mix(&self.loss_per_shot, &other.loss_per_shot),
            acc_per_shot: mix(&self.acc_per_shot, &other.acc_per_shot),
            count: self.count + other.count,
        })
    }
}

pub fn per_shot_metrics(params: &ParameterSet<f32>, seqs: &[TokenSequence], set: &str) -> Result<ShotMetrics> {
    let first = seqs.first().ok_or(EvalError::Empty)?;
    let n_ctx = first.n_ctx();
    if seqs.iter().any(|s| s.tokens.len() != first.tokens.len()) {
        return Err(EvalError::Ragged);
    }
    let mut loss = vec![0.0; n_ctx];
    let mut acc = vec![0.0; n_ctx];
    for part in seqs.chunks(CHUNK) {
        let refs: Vec<&[u32]> = part.iter().map(|s| s.tokens.as_slice()).collect();
        let (nll, correct) = params.shot_scores(&refs)?;
        for (l, c) in nll.iter().zip(&correct) {
            for k in 0..n_ctx {
                loss[k] += l[k];
                acc[k] += c[k] as u8 as f64;
            }
        }
    }
    let n = seqs.len() as f64;
    Ok(ShotMetrics {
        set: set.to_string(),
        loss_per_shot: loss.into_iter().map(|v| v / n).collect(),
        acc_per_shot: acc.into_iter().map(|v| v / n).collect(),
        count: seqs.len(),
    })
}

/// Metrics on every non-empty evaluation set of a problem.
pub fn evaluate_sets(
    params: &ParameterSet<f32>,
    problem: &Problem,
    count: usize,
    seed: u64,
) -> Result<BTreeMap<EvalSet, ShotMetrics>> {
    let mut out = BTreeMap::new();
    for which in EvalSet::ALL {
        match problem.eval_sequences(which, count, seed) {
            Ok(seqs) => {
                out.insert(which, per_shot_metrics(params, &seqs, which.name())?);
            }
            Err(TrainError::Dataset(DatasetError::EmptySet(_))) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

pub fn write_shot_metrics_csv<W: std::io::Write>(metrics: &[ShotMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["set", "shot", "loss", "acc", "count"])?;
    for m in metrics {
        for (k, (l, a)) in m.loss_per_shot.iter().zip(&m.acc_per_shot).enumerate() {
            w.write_record([m.set.clone(), (k + 1).to_string(), l.to_string(), a.to_string(), m.count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Last-shot accuracies on the four sets, in the order id_train, id_test,
/// ood_train, ood_test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Quadruple {
    pub id_train: f64,
    pub id_test: f64,
    pub ood_train: f64,
    pub ood_test: f64,
}

impl Quadruple {
    pub fn new(id_train: f64, id_test: f64, ood_train: f64, ood_test: f64) -> Self {
        Self { id_train, id_test, ood_train, ood_test }
    }

    /// Missing sets count as zero accuracy.
    pub fn from_metrics(m: &BTreeMap<EvalSet, ShotMetrics>, last_shot: bool) -> Self {
        let get = |s| m.get(&s).map(|x: &ShotMetrics| if last_shot { x.last_acc() } else { x.mean_acc() }).unwrap_or(0.0);
        Self::new(get(EvalSet::IdTrain), get(EvalSet::IdTest), get(EvalSet::OodTrain), get(EvalSet::OodTest))
    }
}

/// 0 none, 1 i.d. memorization, 2 i.d. generalization, 3 o.o.d.
/// memorization, 4 o.o.d. generalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Phase(pub u8);

impl Phase {
    pub fn name(&self) -> &'static str {
        match self.0 {
            0 => "none",
            1 => "id-memorization",
            2 => "id-generalization",
            3 => "ood-memorization",
            _ => "ood-generalization",
        }
    }
}

pub fn classify_phase(q: &Quadruple, threshold: f64) -> Phase {
    Phase(if q.ood_test >= threshold {
        4
    } else if q.ood_train >= threshold {
        3
    } else if q.id_test >= threshold {
        2
    } else if q.id_train >= threshold {
        1
    } else {
        0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub n_id: usize,
    pub alpha: f64,
    pub acc: Quadruple,
    pub acc_mean_over_shots: Quadruple,
    pub phase: Phase,
    pub best_seed: u64,
    /// Early-stopped step of the best seed.
    pub step: u64,
    /// Early-stopped last-shot o.o.d.-test accuracy for every seed.
    pub seed_scores: Vec<(u64, f64)>,
    pub run_dirs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: RunSpec,
    pub grid: Vec<(usize, f64)>,
    pub seeds: Vec<u64>,
    /// Sequences per evaluation set when scoring a cell.
    pub eval_sequences: usize,
    pub eval_seed: u64,
    pub threshold: f64,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub n_id: usize,
    pub alpha: f64,
    pub cell: Option<PhaseCell>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub config: SweepConfig,
    pub cells: Vec<CellOutcome>,
}

fn cell_dir(root: &Path, n_id: usize, alpha: f64) -> PathBuf {
    root.join(format!("n{n_id}_a{alpha}"))
}

/// Trains and scores one grid cell with every seed, keeping the seed whose
/// early-stopped model scores best on o.o.d.-test.
pub fn run_cell(cfg: &SweepConfig, n_id: usize, alpha: f64, root: Option<&Path>) -> Result<PhaseCell> {
    if cfg.seeds.is_empty() {
        return Err(EvalError::Invalid("at least one seed is required".into()));
    }
    let mut best: Option<(f64, u64, u64, BTreeMap<EvalSet, ShotMetrics>)> = None;
    let mut seed_scores = Vec::new();
    let mut run_dirs = Vec::new();
    for &seed in &cfg.seeds {
        let mut spec = cfg.base.clone();
        spec.data.n_id = n_id;
        spec.data.alpha = alpha;
        spec.train.seed = seed;
        let dir = root.map(|r| cell_dir(r, n_id, alpha).join(format!("seed{seed}")));
        let outcome = match dir.as_deref().and_then(|d| load_finished_run(&spec, d)) {
            Some(done) => done,
            None => train(&spec, dir.as_deref())?,
        };
        let problem = spec.data.build()?;
        let metrics = evaluate_sets(&outcome.best_params, &problem, cfg.eval_sequences, cfg.eval_seed)?;
        let score = metrics.get(&EvalSet::OodTest).map(|m| m.last_acc()).unwrap_or(0.0);
        seed_scores.push((seed, score));
        if let Some(d) = dir {
            let all: Vec<ShotMetrics> = metrics.values().cloned().collect();
            write_shot_metrics_csv(&all, std::fs::File::create(d.join("shots.csv"))?)?;
            run_dirs.push(d);
        }
        if best.as_ref().map_or(true, |(b, ..)| score > *b) {
            best = Some((score, seed, outcome.record.best_step.unwrap_or(0), metrics));
        }
    }
    let (_, best_seed, step, metrics) = best.expect("at least one seed");
    let acc = Quadruple::from_metrics(&metrics, true);
    Ok(PhaseCell {
        n_id,
        alpha,
        acc,
        acc_mean_over_shots: Quadruple::from_metrics(&metrics, false),
        phase: classify_phase(&acc, cfg.threshold),
        best_seed,
        step,
        seed_scores,
        run_dirs,
    })
}

/// Runs every cell, `jobs` at a time. A failing cell is recorded and the
/// sweep continues. With `root`, writes per-cell run directories,
/// `phase_diagram.csv`, `phase_diagram.svg` and `manifest.json`.
pub fn phase_sweep(cfg: &SweepConfig, root: Option<&Path>) -> Result<SweepManifest> {
    if cfg.grid.is_empty() {
        return Err(EvalError::Invalid("sweep grid is empty".into()));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; cfg.grid.len()]);
    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.clamp(1, cfg.grid.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(n_id, alpha)) = cfg.grid.get(i) else { break };
                let outcome = match run_cell(cfg, n_id, alpha, root) {
                    Ok(cell) => CellOutcome { n_id, alpha, cell: Some(cell), error: None },
                    Err(e) => CellOutcome { n_id, alpha, cell: None, error: Some(e.to_string()) },
                };
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    let cells: Vec<CellOutcome> = results.into_inner().unwrap().into_iter().map(|c| c.expect("every cell ran")).collect();
    let manifest = SweepManifest { config: cfg.clone(), cells };
    if let Some(root) = root {
        std::fs::create_dir_all(root)?;
        write_phase_csv(&manifest.cells, std::fs::File::create(root.join("phase_diagram.csv"))?)?;
        std::fs::write(root.join("phase_diagram.svg"), phase_svg(&manifest.cells))?;
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| EvalError::Io(e.to_string()))?;
        std::fs::write(root.join("manifest.json"), json)?;
    }
    Ok(manifest)
}

pub fn write_phase_csv<W: std::io::Write>(cells: &[CellOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_id", "alpha", "id_train", "id_test", "ood_train", "ood_test", "phase"])?;
    for c in cells {
        let Some(cell) = &c.cell else { continue };
        let q = cell.acc;
        w.write_record([
            c.n_id.to_string(),
            c.alpha.to_string(),
            q.id_train.to_string(),
            q.id_test.to_string(),
            q.ood_train.to_string(),
            q.ood_test.to_string(),
            cell.phase.0.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn phase_svg(cells: &[CellOutcome]) -> String {
    let mut alphas: Vec<f64> = cells.iter().map(|c| c.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let mut ns: Vec<usize> = cells.iter().map(|c| c.n_id).collect();
    ns.sort();
    ns.dedup();
    let values: Vec<Vec<f64>> = alphas
        .iter()
        .rev()
        .map(|&a| {
            ns.iter()
                .map(|&n| {
                    cells
                        .iter()
                        .find(|c| c.n_id == n && c.alpha == a)
                        .and_then(|c| c.cell.as_ref())
                        .map_or(f64::NAN, |c| c.phase.0 as f64)
                })
                .collect()
        })
        .collect();
    let rows: Vec<String> = alphas.iter().rev().map(|a| format!("α={a}")).collect();
    let cols: Vec<String> = ns.iter().map(|n| n.to_string()).collect();
    crate::plot::heatmap("phase (0-4) by n_id and α", &rows, &cols, &values, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monotonicity {
    MonotonicIncreasing,
    NonMonotonic,
    MonotonicDecreasing,
}

/// Shape of a per-shot loss curve. Reversals smaller than 2% of the curve's
/// range are treated as noise; a constant curve counts as decreasing.
pub fn monotonicity_class(loss: &[f64]) -> Result<Monotonicity> {
    if loss.len() < 3 {
        return Err(EvalError::Invalid("need at least three shots".into()));
    }
    if loss.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Invalid("non-finite loss".into()));
    }
    let (lo, hi) = loss.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let eps = 0.02 * (hi - lo);
    // Hysteresis: a direction is committed once the curve moves more than
    // `eps` away from the running extreme.
    let (mut up, mut down) = (false, false);
    let mut dir = 0i8;
    let (mut run_min, mut run_max) = (loss[0], loss[0]);
    for &v in &loss[1..] {
        match dir {
            0 => {
                run_min = run_min.min(v);
                run_max = run_max.max(v);
                if v - run_min > eps {
                    dir = 1;
                    run_max = v;
                } else if run_max - v > eps {
                    dir = -1;
                    run_min = v;
                }
            }
            1 => {
                if v > run_max {
                    run_max = v;
                } else if run_max - v > eps {
                    dir = -1;
                    run_min = v;
                }
            }
            _ => {
                if v < run_min {
                    run_min = v;
                } else if v - run_min > eps {
                    dir = 1;
                    run_max = v;
                }
            }
        }
        up |= dir == 1;
        down |= dir == -1;
    }
    Ok(match (up, down) {
        (true, true) => Monotonicity::NonMonotonic,
        (true, false) => Monotonicity::MonotonicIncreasing,
        _ => Monotonicity::MonotonicDecreasing,
    })
}

/// `+1` where `a` is correct and `b` is not (red), `-1` for the reverse
/// (blue), `0` otherwise.
pub fn grid_diff(a: &[bool], b: &[bool]) -> Vec<i8> {
    a.iter().zip(b).map(|(&x, &y)| x as i8 - y as i8).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub p: u32,
    pub task: TaskVector,
    pub prefix: Vec<(u32, u32)>,
    pub algorithm: Algorithm,
    /// Model correctness at query `(x, y)`, index `x * p + y`.
    pub model: Vec<bool>,
    pub oracle: Vec<bool>,
    pub diff: Vec<i8>,
}

impl PredictionGrid {
    pub fn red(&self) -> usize {
        self.diff.iter().filter(|&&d| d > 0).count()
    }

    pub fn blue(&self) -> usize {
        self.diff.iter().filter(|&&d| d < 0).count()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "model", "oracle", "diff"])?;
        for x in 0..self.p {
            for y in 0..self.p {
                let i = (x * self.p + y) as usize;
                w.write_record([
                    x.to_string(),
                    y.to_string(),
                    (self.model[i] as u8).to_string(),
                    (self.oracle[i] as u8).to_string(),
                    self.diff[i].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Model, oracle and diff panels side by side as three SVG documents.
    pub fn svgs(&self) -> [String; 3] {
        let p = self.p as usize;
        let labels: Vec<String> = (0..p).map(|v| v.to_string()).collect();
        let rows = |v: Vec<f64>| -> Vec<Vec<f64>> { v.chunks(p).map(|c| c.to_vec()).collect() };
        let as_f = |b: &[bool]| b.iter().map(|&x| x as u8 as f64).collect::<Vec<_>>();
        [
            crate::plot::heatmap("model correct (rows x, cols y)", &labels, &labels, &rows(as_f(&self.model)), false),
            crate::plot::heatmap(
                &format!("{} oracle correct", self.algorithm.name()),
                &labels,
                &labels,
                &rows(as_f(&self.oracle)),
                false,
            ),
            crate::plot::heatmap(
                "model minus oracle (red +, blue -)",
                &labels,
                &labels,
                &rows(self.diff.iter().map(|&d| d as f64).collect()),
                true,
            ),
        ]
    }
}

/// Model correctness on every query `(x, y)` after a fixed labelled prefix,
/// alongside the oracle's.
pub fn prediction_grid(
    params: &ParameterSet<f32>,
    field: &PrimeField,
    task: TaskVector,
    prefix: &[(u32, u32)],
    algorithm: Algorithm,
) -> Result<PredictionGrid> {
    let p = field.modulus();
    let mut head = Vec::with_capacity(3 * prefix.len() + 3);
    for &(x, y) in prefix {
        head.extend_from_slice(&[x, y, task.apply(field, x, y)]);
    }
    let seqs: Vec<Vec<u32>> = (0..p)
        .flat_map(|x| (0..p).map(move |y| (x, y)))
        .map(|(x, y)| {
            let mut s = head.clone();
            s.extend_from_slice(&[x, y, task.apply(field, x, y)]);
            s
        })
        .collect();
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let preds = predict_labels(params, &refs)?;
    let model: Vec<bool> = preds.iter().zip(&seqs).map(|(pr, s)| *pr.last().unwrap() == s[s.len() - 1]).collect();
    let examples: Vec<(u32, u32, u32)> = head.chunks(3).map(|c| (c[0], c[1], c[2])).collect();
    let oracle: Vec<bool> = if examples.is_empty() {
        vec![false; (p * p) as usize]
    } else {
        oracle_grid(field, &examples, task, algorithm)?.cells.iter().map(|&c| c == CellStatus::Correct).collect()
    };
    let diff = grid_diff(&model, &oracle);
    Ok(PredictionGrid { p, task, prefix: prefix.to_vec(), algorithm, model, oracle, diff })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Corruption {
    /// Replace the label of example `position` (0-based).
    Single { position: usize },
    /// Replace a random `fraction` of the context labels (all but the last).
    Multi { fraction: f64 },
}

/// Per-shot accuracy, scored against the true labels, after corrupting the
/// context labels of every sequence.
pub fn corrupted_accuracy(
    params: &ParameterSet<f32>,
    p: u32,
    seqs: &[TokenSequence],
    corruption: Corruption,
    seed: u64,
) -> Result<Vec<f64>> {
    let first = seqs.first().ok_or(EvalError::Empty)?;
    let n_ctx = first.n_ctx();
    if p < 2 {
        return Err(EvalError::Invalid("corruption needs p >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corrupted = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.n_ctx() != n_ctx {
            return Err(EvalError::Ragged);
        }
        let positions: Vec<usize> = match corruption {
            Corruption::Single { position } => {
                if position >= n_ctx {
                    return Err(EvalError::Invalid(format!("position {position} outside 0..{n_ctx}")));
                }
                vec![position]
            }
            Corruption::Multi { fraction } => {
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(EvalError::Invalid(format!("fraction {fraction} outside [0, 1]")));
                }
                let pool = n_ctx.saturating_sub(1);
                let k = (fraction * pool as f64).round() as usize;
                rand::seq::index::sample(&mut rng, pool, k).into_vec()
            }
        };
        let mut toks = s.tokens.clone();
        for j in positions {
            let z = toks[3 * j + 2];
            let r = rng.gen_range(0..p - 1);
            toks[3 * j + 2] = if r >= z { r + 1 } else { r };
        }
        corrupted.push(toks);
    }
    let refs: Vec<&[u32]> = corrupted.iter().map(|s| s.as_slice()).collect();
    let preds = predict_labels(params, &refs)?;
    let mut acc = vec![0.0; n_ctx];
    for (pr, s) in preds.iter().zip(seqs) {
        for (k, (&guess, truth)) in pr.iter().zip(s.labels()).enumerate() {
            acc[k] += (guess == truth) as u8 as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a / seqs.len() as f64).collect())
}

/// Accuracy surface: one row per corruption setting, one column per shot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSurface {
    pub settings: Vec<Corruption>,
    pub acc: Vec<Vec<f64>>,
}

impl CorruptionSurface {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "value", "shot", "acc"])?;
        for (s, row) in self.settings.iter().zip(&self.acc) {
            let (mode, value) = match s {
                Corruption::Single { position } => ("single", (position + 1).to_string()),
                Corruption::Multi { fraction } => ("multi", fraction.to_string()),
            };
            for (k, a) in row.iter().enumerate() {
                w.write_record([mode.to_string(), value.clone(), (k + 1).to_string(), a.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs [`corrupted_accuracy`] for each setting with the same seed.
pub fn label_corruption(
    params: &ParameterSet<f32>,
    p: u32,
    seqs: &[TokenSequence],
    settings: &[Corruption],
    seed: u64,
) -> Result<CorruptionSurface> {
    let acc = settings.iter().map(|&c| corrupted_accuracy(params, p, seqs, c, seed)).collect::<Result<_>>()?;
    Ok(CorruptionSurface { settings: settings.to_vec(), acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::trainer::DataConfig;

    #[test]
    fn phase_examples() {
        assert_eq!(classify_phase(&Quadruple::new(0.9, 0.2, 0.2, 0.2), 0.75), Phase(1));
        assert_eq!(classify_phase(&Quadruple::new(0.9, 0.9, 0.3, 0.3), 0.75), Phase(2));
        assert_eq!(classify_phase(&Quadruple::new(0.5, 0.4, 0.8, 0.9), 0.75), Phase(4));
        assert_eq!(classify_phase(&Quadruple::new(0.5, 0.4, 0.8, 0.1), 0.75), Phase(3));
        assert_eq!(classify_phase(&Quadruple::new(0.1, 0.1, 0.1, 0.1), 0.75), Phase(0));
        assert_eq!(classify_phase(&Quadruple::new(0.75, 0.0, 0.0, 0.0), 0.75), Phase(1));
    }

    #[test]
    fn monotonicity_examples() {
        assert_eq!(monotonicity_class(&[3.0, 2.0, 1.5, 1.0]).unwrap(), Monotonicity::MonotonicDecreasing);
        assert_eq!(monotonicity_class(&[1.0, 2.0, 2.5, 3.0]).unwrap(), Monotonicity::MonotonicIncreasing);
        assert_eq!(monotonicity_class(&[1.0, 2.0, 1.5, 0.5]).unwrap(), Monotonicity::NonMonotonic);
        assert_eq!(monotonicity_class(&[2.0, 2.6, 2.1, 1.5, 0.9, 0.4]).unwrap(), Monotonicity::NonMonotonic);
        // wiggle below 2% of the range is ignored
        assert_eq!(monotonicity_class(&[3.0, 2.0, 2.01, 1.0, 0.0]).unwrap(), Monotonicity::MonotonicDecreasing);
        assert_eq!(monotonicity_class(&[1.0, 1.0, 1.0]).unwrap(), Monotonicity::MonotonicDecreasing);
        assert!(monotonicity_class(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn diff_is_antisymmetric() {
        let a = [true, false, true, false];
        let b = [true, true, false, false];
        let d = grid_diff(&a, &b);
        assert_eq!(d, [0, -1, 1, 0]);
        assert_eq!(grid_diff(&b, &a), d.iter().map(|v| -v).collect::<Vec<_>>());
    }

    fn tiny_problem() -> (ParameterSet<f32>, Problem) {
        let data = DataConfig { p: 7, n_id: 8, alpha: 0.7, n_ctx: 4, task_seed: 3, input_seed: 4 };
        let problem = data.build().unwrap();
        let params = init_params(&ModelConfig::new(1, 2, 16, 7, 4), 2).unwrap();
        (params, problem)
    }

    #[test]
    fn metrics_merge_matches_union() {
        let (params, problem) = tiny_problem();
        let a = problem.eval_sequences(EvalSet::IdTrain, 10, 1).unwrap();
        let b = problem.eval_sequences(EvalSet::OodTest, 23, 2).unwrap();
        let ma = per_shot_metrics(&params, &a, "a").unwrap();
        let mb = per_shot_metrics(&params, &b, "b").unwrap();
        let union: Vec<TokenSequence> = a.iter().chain(&b).cloned().collect();
        let mu = per_shot_metrics(&params, &union, "u").unwrap();
        let merged = ma.merge(&mb).unwrap();
        for k in 0..4 {
            assert!((merged.acc_per_shot[k] - mu.acc_per_shot[k]).abs() < 1e-6);
            assert!((merged.loss_per_shot[k] - mu.loss_per_shot[k]).abs() < 1e-6);
        }
        assert_eq!(merged.count, 33);
        assert!(matches!(per_shot_metrics(&params, &[], "e"), Err(EvalError::Empty)));
    }

    #[test]
    fn corruption_properties() {
        let (params, problem) = tiny_problem();
        let seqs = problem.eval_sequences(EvalSet::IdTrain, 40, 5).unwrap();
        let clean = per_shot_metrics(&params, &seqs, "id_train").unwrap();
        let none = corrupted_accuracy(&params, 7, &seqs, Corruption::Multi { fraction: 0.0 }, 9).unwrap();
        assert_eq!(none, clean.acc_per_shot);
        for j in 0..4 {
            let acc = corrupted_accuracy(&params, 7, &seqs, Corruption::Single { position: j }, 9).unwrap();
            assert_eq!(&acc[..=j], &clean.acc_per_shot[..=j]);
        }
        let s = [Corruption::Single { position: 1 }, Corruption::Multi { fraction: 0.5 }];
        assert_eq!(label_corruption(&params, 7, &seqs, &s, 3).unwrap(), label_corruption(&params, 7, &seqs, &s, 3).unwrap());
        assert!(corrupted_accuracy(&params, 7, &seqs, Corruption::Single { position: 4 }, 0).is_err());
    }

    #[test]
    fn prediction_grid_of_untrained_model() {
        let (params, problem) = tiny_problem();
        let task = TaskVector::new(2, 5);
        let g = prediction_grid(&params, &problem.field, task, &[(1, 3)], Algorithm::Ratio).unwrap();
        assert_eq!(g.model.len(), 49);
        assert_eq!(g.oracle.iter().filter(|&&c| c).count(), 7);
        assert_eq!(g.red() + g.blue() + g.diff.iter().filter(|&&d| d == 0).count(), 49);
    }
}
