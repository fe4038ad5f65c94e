//! The single JSON document every verb reads, with dotted-path overrides and
//! cross-field validation.

use std::path::Path;

use modicl::gfp::{is_prime, PrimeField};
use modicl::model::ModelConfig;
use modicl::trainer::{DataConfig, RunSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A configuration problem, reported as `field: message`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(field: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { field: field.to_string(), message: message.into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub p: u32,
    /// Primitive root for log annotations; the smallest one when absent.
    pub log_base: Option<u32>,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self { p: 29, log_base: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_id: usize,
    pub alpha: f64,
    pub n_ctx: usize,
    pub task_seed: u64,
    pub input_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        Self { n_id: d.n_id, alpha: d.alpha, n_ctx: d.n_ctx, task_seed: d.task_seed, input_seed: d.input_seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub heads: usize,
    pub d_embed: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { depth: 6, heads: 4, d_embed: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Sequences per evaluation set.
    pub sequences: usize,
    pub seed: u64,
    /// Accuracy threshold for phase classification.
    pub threshold: f64,
    /// `best` or `final`.
    pub checkpoint: String,
    /// Multi-label corruption fractions; empty skips the corruption surface.
    pub corruption_fractions: Vec<f64>,
    /// Also corrupt each single position in turn.
    pub corruption_single: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sequences: 128,
            seed: 7,
            threshold: 0.75,
            checkpoint: "best".into(),
            corruption_fractions: vec![0.0, 0.1, 0.2, 0.4],
            corruption_single: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub n_ids: Vec<usize>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { n_ids: vec![32, 64, 128, 256, 512], alphas: vec![0.3, 0.5, 0.7, 0.9], seeds: vec![0, 1, 2], jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpSection {
    pub checkpoint: String,
    /// Layer for head scans, similarity dumps and MLP grids.
    pub layer: usize,
    /// Task whose labels fill the scan prefix; the first o.o.d. task when absent.
    pub task: Option<(u32, u32)>,
    /// Explicit prefix inputs; when empty, `shots` training inputs are drawn.
    pub prefix: Vec<(u32, u32)>,
    pub shots: usize,
    pub seed: u64,
    /// PCA components kept for head scans.
    pub components: usize,
    /// Neurons for activation grids; when empty, the `top_neurons` with the
    /// largest activation variance over the scan.
    pub neurons: Vec<usize>,
    pub top_neurons: usize,
    pub band_width: usize,
    /// Sequences averaged for attention band mass.
    pub band_sequences: usize,
    pub shuffles: usize,
}

impl Default for InterpSection {
    fn default() -> Self {
        Self {
            checkpoint: "best".into(),
            layer: 0,
            task: None,
            prefix: Vec::new(),
            shots: 8,
            seed: 11,
            components: 2,
            neurons: Vec::new(),
            top_neurons: 8,
            band_width: 3,
            band_sequences: 32,
            shuffles: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Context sizes checked by the exhaustive audit.
    pub shots: Vec<usize>,
    pub contexts_per_task: usize,
    pub seed: u64,
    /// Task and prefix for grid export.
    pub task: (u32, u32),
    pub prefix: Vec<(u32, u32)>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { shots: vec![1, 2, 3, 4], contexts_per_task: 50, seed: 0, task: (1, 1), prefix: vec![(1, 2), (3, 5)] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub field: FieldSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub interp: InterpSection,
    pub oracle: OracleSection,
}

/// Sets `path` (dot separated) inside a JSON document. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return err(assignment, "override must look like section.key=value");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return err(path, "empty path segment");
        }
        if !cur.is_object() {
            return err(path, format!("{} is not a section", keys[..i].join(".")));
        }
        let map = cur.as_object_mut().expect("checked above");
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        cur = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields a segment")
}

/// Which sections a verb reads, and so which are validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Field and data only.
    Data,
    /// Everything a single run reads.
    Run,
    /// A run whose `n_id` and `alpha` come from the sweep grid.
    Sweep,
    /// Field and oracle only.
    Oracle,
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String], scope: Scope) -> Result<Self, ConfigError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).or_else(|e| err(&p.display().to_string(), e.to_string()))?;
                serde_json::from_str(&text).or_else(|e| err(&p.display().to_string(), e.to_string()))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("defaults serialize"),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).or_else(|e| err("config", e.to_string()))?;
        cfg.validate(scope)?;
        Ok(cfg)
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            p: self.field.p,
            n_id: self.data.n_id,
            alpha: self.data.alpha,
            n_ctx: self.data.n_ctx,
            task_seed: self.data.task_seed,
            input_seed: self.data.input_seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.model.depth, self.model.heads, self.model.d_embed, self.field.p as usize, self.data.n_ctx)
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec { data: self.data_config(), model: self.model_config(), train: self.train.clone() }
    }

    pub fn log_base(&self) -> u32 {
        let field = PrimeField::new(self.field.p).expect("validated");
        self.field.log_base.unwrap_or_else(|| field.default_log_base())
    }

    pub fn validate(&self, scope: Scope) -> Result<(), ConfigError> {
        let p = self.field.p;
        if !is_prime(p) {
            return err("field.p", format!("{p} is not prime"));
        }
        let field = PrimeField::new(p).expect("prime");
        if let Some(g) = self.field.log_base {
            if !field.is_primitive_root(g) {
                return err("field.log_base", format!("{g} is not a primitive root mod {p}"));
            }
        }
        if scope == Scope::Oracle {
            return self.validate_oracle();
        }
        let tasks = (p * p) as usize;
        let d = &self.data;
        if d.n_ctx == 0 {
            return err("data.n_ctx", "must be positive");
        }
        if scope != Scope::Sweep {
            check_n_id("data.n_id", d.n_id, tasks)?;
            check_alpha("data.alpha", d.alpha)?;
            let n_train = (d.alpha * tasks as f64).round() as usize;
            if d.n_ctx > n_train {
                return err("data.n_ctx", format!("{} exceeds the {n_train} training inputs at alpha {}", d.n_ctx, d.alpha));
            }
        }
        let e = &self.eval;
        if e.sequences == 0 {
            return err("eval.sequences", "must be positive");
        }
        if scope == Scope::Data {
            return Ok(());
        }

        let m = &self.model;
        if m.depth == 0 {
            return err("model.depth", "must be positive");
        }
        if m.heads == 0 {
            return err("model.heads", "must be positive");
        }
        if m.d_embed == 0 || m.d_embed % m.heads != 0 {
            return err("model.d_embed", format!("{} must be a positive multiple of model.heads ({})", m.d_embed, m.heads));
        }
        if (m.d_embed / m.heads) % 2 != 0 {
            return err("model.d_embed", format!("head dimension {} must be even", m.d_embed / m.heads));
        }

        let t = &self.train;
        if !(t.lr > 0.0) {
            return err("train.lr", "must be positive");
        }
        if !(t.weight_decay >= 0.0) {
            return err("train.weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&t.beta1) {
            return err("train.beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&t.beta2) {
            return err("train.beta2", "must lie in [0, 1)");
        }
        if !(t.eps > 0.0) {
            return err("train.eps", "must be positive");
        }
        if t.steps == 0 {
            return err("train.steps", "must be positive");
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) {
            return err("train.warmup_fraction", "must lie in [0, 1)");
        }
        if !(t.warmup_start > 0.0) {
            return err("train.warmup_start", "must be positive");
        }
        if !(t.final_lr > 0.0) {
            return err("train.final_lr", "must be positive");
        }
        if t.probe_interval == 0 {
            return err("train.probe_interval", "must be positive");
        }
        if t.probe_sequences == 0 {
            return err("train.probe_sequences", "must be positive");
        }
        if scope != Scope::Sweep {
            check_batch("train.batch_size", t.batch_size, d.n_id)?;
        }
        for (name, v) in [("train.stop_at_train_acc", t.stop_at_train_acc), ("train.stop_at_ood_acc", t.stop_at_ood_acc)] {
            if v.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
                return err(name, "must lie in [0, 1]");
            }
        }

        if !(0.0..=1.0).contains(&e.threshold) {
            return err("eval.threshold", "must lie in [0, 1]");
        }
        check_checkpoint("eval.checkpoint", &e.checkpoint)?;
        if let Some(f) = e.corruption_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return err("eval.corruption_fractions", format!("{f} outside [0, 1]"));
        }

        if scope == Scope::Sweep {
            self.validate_sweep(tasks)?;
        }
        self.validate_interp(scope)
    }

    fn validate_sweep(&self, tasks: usize) -> Result<(), ConfigError> {
        let (s, d, t) = (&self.sweep, &self.data, &self.train);
        if s.n_ids.is_empty() {
            return err("sweep.n_ids", "must not be empty");
        }
        for &n in &s.n_ids {
            check_n_id("sweep.n_ids", n, tasks)?;
            check_batch("train.batch_size", t.batch_size, n)?;
        }
        if s.alphas.is_empty() {
            return err("sweep.alphas", "must not be empty");
        }
        for &a in &s.alphas {
            check_alpha("sweep.alphas", a)?;
            let n_train = (a * tasks as f64).round() as usize;
            if d.n_ctx > n_train {
                return err("sweep.alphas", format!("alpha {a} leaves {n_train} training inputs, fewer than data.n_ctx"));
            }
        }
        if s.seeds.is_empty() {
            return err("sweep.seeds", "must not be empty");
        }
        if s.jobs == 0 {
            return err("sweep.jobs", "must be positive");
        }
        Ok(())
    }

    fn validate_interp(&self, scope: Scope) -> Result<(), ConfigError> {
        let (i, d, m, p) = (&self.interp, &self.data, &self.model, self.field.p);
        check_checkpoint("interp.checkpoint", &i.checkpoint)?;
        if i.layer >= m.depth {
            return err("interp.layer", format!("{} out of range for model.depth {}", i.layer, m.depth));
        }
        if let Some((a, b)) = i.task {
            if a >= p || b >= p {
                return err("interp.task", format!("({a}, {b}) is not a task mod {p}"));
            }
        }
        let prefix_len = if i.prefix.is_empty() { i.shots } else { i.prefix.len() };
        if prefix_len + 1 > d.n_ctx {
            return err("interp.shots", format!("a {prefix_len}-shot prefix plus the query exceeds data.n_ctx {}", d.n_ctx));
        }
        if i.prefix.iter().any(|&(x, y)| x >= p || y >= p) {
            return err("interp.prefix", format!("inputs must lie in 0..{p}"));
        }
        // sweeps vary alpha, and the grid check covers n_ctx against it
        let n_train = (d.alpha * (p * p) as f64).round() as usize;
        if scope != Scope::Sweep && i.prefix.is_empty() && i.shots > n_train {
            return err("interp.shots", "exceeds the training inputs");
        }
        if i.components == 0 {
            return err("interp.components", "must be positive");
        }
        let hidden = m.d_embed * 4;
        if let Some(n) = i.neurons.iter().find(|&&n| n >= hidden) {
            return err("interp.neurons", format!("neuron {n} out of range for hidden width {hidden}"));
        }
        if i.band_width == 0 {
            return err("interp.band_width", "must be positive");
        }
        if i.band_sequences == 0 {
            return err("interp.band_sequences", "must be positive");
        }
        Ok(())
    }

    fn validate_oracle(&self) -> Result<(), ConfigError> {
        let (o, p) = (&self.oracle, self.field.p);
        if o.shots.is_empty() || o.shots.contains(&0) {
            return err("oracle.shots", "must be a non-empty list of positive sizes");
        }
        if o.contexts_per_task == 0 {
            return err("oracle.contexts_per_task", "must be positive");
        }
        if o.task.0 >= p || o.task.1 >= p {
            return err("oracle.task", format!("({}, {}) is not a task mod {p}", o.task.0, o.task.1));
        }
        if o.prefix.iter().any(|&(x, y)| x >= p || y >= p) {
            return err("oracle.prefix", format!("inputs must lie in 0..{p}"));
        }
        Ok(())
    }
}

fn check_n_id(name: &str, n: usize, tasks: usize) -> Result<(), ConfigError> {
    if n == 0 || n % 4 != 0 {
        return err(name, format!("{n} must be a positive multiple of 4"));
    }
    if n > tasks {
        return err(name, format!("{n} exceeds the {tasks} tasks of the field"));
    }
    Ok(())
}

fn check_alpha(name: &str, a: f64) -> Result<(), ConfigError> {
    if !(a > 0.0 && a <= 1.0) {
        return err(name, format!("{a} outside (0, 1]"));
    }
    Ok(())
}

fn check_batch(name: &str, batch: usize, n_id: usize) -> Result<(), ConfigError> {
    if batch == 0 || batch % n_id != 0 {
        return err(name, format!("{batch} must be a positive multiple of n_id {n_id}"));
    }
    Ok(())
}

fn check_checkpoint(name: &str, c: &str) -> Result<(), ConfigError> {
    if c != "best" && c != "final" {
        return err(name, format!("{c:?} must be \"best\" or \"final\""));
    }
    Ok(())
}
