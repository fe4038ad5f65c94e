//! Task sets, input splits, token sequences and balanced training batches.
//!
//! A task `(a, b)` maps an input pair to `z = a*x + b*y mod p`. A sequence is
//! the flattened list of triples `x_1 y_1 z_1 x_2 y_2 z_2 ...`; only the `z`
//! positions are ever scored. The task itself is never tokenized.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gfp::PrimeField;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("n_id = {0} must be a positive multiple of 4")]
    NotMultipleOfFour(usize),
    #[error("n_id = {n_id} exceeds the {max} available tasks")]
    TooManyTasks { n_id: usize, max: usize },
    #[error("could not complete a rectangular task set of size {0}")]
    CannotComplete(usize),
    #[error("alpha = {0} must lie in (0, 1]")]
    AlphaOutOfRange(f64),
    #[error("input ({x}, {y}) is outside [0, {p})^2")]
    InputOutOfRange { x: u32, y: u32, p: u32 },
    #[error("batch size {batch_size} is not divisible by {n_tasks} tasks")]
    Indivisible { batch_size: usize, n_tasks: usize },
    #[error("expected {expected} input streams, got {got}")]
    StreamCount { expected: usize, got: usize },
    #[error("input streams have unequal lengths")]
    RaggedStreams,
    #[error("sequence set {0} is empty under this split")]
    EmptySet(EvalSet),
    #[error("n_ctx = {n_ctx} exceeds the {available} available inputs")]
    ContextTooLong { n_ctx: usize, available: usize },
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Coefficients `(a, b)` of one linear task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskVector {
    pub a: u32,
    pub b: u32,
}

impl TaskVector {
    pub fn new(a: u32, b: u32) -> Self {
        Self { a, b }
    }

    #[inline]
    pub fn apply(&self, field: &PrimeField, x: u32, y: u32) -> u32 {
        field.add(field.mul(self.a, x), field.mul(self.b, y))
    }
}

/// Every pair of `Z_p^2` in lexicographic order.
pub fn all_pairs(p: u32) -> Vec<(u32, u32)> {
    (0..p).flat_map(|x| (0..p).map(move |y| (x, y))).collect()
}

pub fn all_tasks(p: u32) -> Vec<TaskVector> {
    all_pairs(p).into_iter().map(|(a, b)| TaskVector { a, b }).collect()
}

/// Partition of the `p^2` tasks into pre-training and held-out sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub p: u32,
    pub seed: u64,
    /// Pre-training tasks in insertion order.
    pub in_distribution: Vec<TaskVector>,
    /// The complement, in lexicographic order.
    pub out_of_distribution: Vec<TaskVector>,
    /// Every rectangle accepted during sampling, as `[(a1,b1), (a1,b2), (a2,b1), (a2,b2)]`.
    pub rectangles: Vec<[TaskVector; 4]>,
}

fn corners(a1: u32, a2: u32, b1: u32, b2: u32) -> [TaskVector; 4] {
    [
        TaskVector::new(a1, b1),
        TaskVector::new(a1, b2),
        TaskVector::new(a2, b1),
        TaskVector::new(a2, b2),
    ]
}

/// Draws `n_id` pre-training tasks by the rectangular rule.
///
/// Each draw picks two distinct `a` values and two distinct `b` values and
/// adds the four corners. Corners already chosen are skipped; a rectangle is
/// accepted only if it adds at least one and at most the remaining number of
/// new tasks. When random draws stall near a dense set, the remaining
/// rectangles are scanned in a seeded random order instead.
pub fn sample_tasks_rectangular(n_id: usize, field: &PrimeField, seed: u64) -> Result<TaskSplit> {
    let p = field.modulus();
    let max = (p * p) as usize;
    if n_id == 0 || n_id % 4 != 0 {
        return Err(DatasetError::NotMultipleOfFour(n_id));
    }
    if n_id > max {
        return Err(DatasetError::TooManyTasks { n_id, max });
    }
    if p < 2 {
        return Err(DatasetError::CannotComplete(n_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: HashSet<TaskVector> = HashSet::with_capacity(n_id);
    let mut order = Vec::with_capacity(n_id);
    let mut rectangles = Vec::new();

    let mut try_insert = |rect: [TaskVector; 4], chosen: &mut HashSet<TaskVector>, order: &mut Vec<TaskVector>| {
        let remaining = n_id - order.len();
        let fresh: Vec<TaskVector> = {
            let mut seen = HashSet::new();
            rect.iter().copied().filter(|t| !chosen.contains(t) && seen.insert(*t)).collect()
        };
        if fresh.is_empty() || fresh.len() > remaining {
            return false;
        }
        for t in fresh {
            chosen.insert(t);
            order.push(t);
        }
        rectangles.push(rect);
        true
    };

    let mut failures = 0;
    while order.len() < n_id && failures < 10_000 {
        let a: Vec<u32> = index::sample(&mut rng, p as usize, 2).into_iter().map(|v| v as u32).collect();
        let b: Vec<u32> = index::sample(&mut rng, p as usize, 2).into_iter().map(|v| v as u32).collect();
        if try_insert(corners(a[0], a[1], b[0], b[1]), &mut chosen, &mut order) {
            failures = 0;
        } else {
            failures += 1;
        }
    }
    if order.len() < n_id {
        let mut all: Vec<(u32, u32, u32, u32)> = Vec::new();
        for a1 in 0..p {
            for a2 in a1 + 1..p {
                for b1 in 0..p {
                    for b2 in b1 + 1..p {
                        all.push((a1, a2, b1, b2));
                    }
                }
            }
        }
        all.shuffle(&mut rng);
        // Several passes: an early rejection may fit once fewer tasks remain.
        while order.len() < n_id {
            let before = order.len();
            for &(a1, a2, b1, b2) in &all {
                if order.len() == n_id {
                    break;
                }
                try_insert(corners(a1, a2, b1, b2), &mut chosen, &mut order);
            }
            if order.len() == before {
                return Err(DatasetError::CannotComplete(n_id));
            }
        }
    }
    let out_of_distribution = all_tasks(p).into_iter().filter(|t| !chosen.contains(t)).collect();
    Ok(TaskSplit { p, seed, in_distribution: order, out_of_distribution, rectangles })
}

/// Partition of the `p^2` input pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSplit {
    pub p: u32,
    pub alpha: f64,
    pub seed: u64,
    pub train: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
}

/// Uniformly random train subset of size `round(alpha * p^2)`.
pub fn split_inputs(alpha: f64, field: &PrimeField, seed: u64) -> Result<InputSplit> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DatasetError::AlphaOutOfRange(alpha));
    }
    let p = field.modulus();
    let mut pairs = all_pairs(p);
    let n_train = (alpha * pairs.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let test = pairs.split_off(n_train);
    Ok(InputSplit { p, alpha, seed, train: pairs, test })
}

/// One flattened sequence `x_1 y_1 z_1 ... x_n y_n z_n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub task: TaskVector,
}

impl TokenSequence {
    /// Number of in-context examples.
    pub fn n_ctx(&self) -> usize {
        self.tokens.len() / 3
    }

    /// Indices of the `z` tokens: 2, 5, 8, ...
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.n_ctx()).map(|i| 3 * i + 2).collect()
    }

    pub fn inputs(&self) -> Vec<(u32, u32)> {
        self.tokens.chunks_exact(3).map(|t| (t[0], t[1])).collect()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.tokens.chunks_exact(3).map(|t| t[2]).collect()
    }
}

pub fn build_sequence(field: &PrimeField, task: TaskVector, inputs: &[(u32, u32)]) -> Result<TokenSequence> {
    let p = field.modulus();
    let mut tokens = Vec::with_capacity(inputs.len() * 3);
    for &(x, y) in inputs {
        if x >= p || y >= p {
            return Err(DatasetError::InputOutOfRange { x, y, p });
        }
        tokens.extend_from_slice(&[x, y, task.apply(field, x, y)]);
    }
    Ok(TokenSequence { tokens, task })
}

/// A training batch in which every task appears equally often and all tasks
/// share the same input streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sequences: Vec<TokenSequence>,
    pub tasks: Vec<TaskVector>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// One sequence per (stream, task), grouped by stream then task.
pub fn build_balanced_batch(
    field: &PrimeField,
    tasks: &[TaskVector],
    input_streams: &[Vec<(u32, u32)>],
    batch_size: usize,
) -> Result<Batch> {
    if tasks.is_empty() || batch_size % tasks.len() != 0 {
        return Err(DatasetError::Indivisible { batch_size, n_tasks: tasks.len() });
    }
    let expected = batch_size / tasks.len();
    if input_streams.len() != expected {
        return Err(DatasetError::StreamCount { expected, got: input_streams.len() });
    }
    if input_streams.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(DatasetError::RaggedStreams);
    }
    let mut sequences = Vec::with_capacity(batch_size);
    for stream in input_streams {
        for &task in tasks {
            sequences.push(build_sequence(field, task, stream)?);
        }
    }
    Ok(Batch { sequences, tasks: tasks.to_vec() })
}

fn draw_inputs(rng: &mut impl Rng, pool: &[(u32, u32)], n_ctx: usize) -> Vec<(u32, u32)> {
    index::sample(rng, pool.len(), n_ctx).into_iter().map(|i| pool[i]).collect()
}

/// Deterministic source of pre-training batches: batch `step` depends only on
/// the seed and `step`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    field: PrimeField,
    tasks: Vec<TaskVector>,
    pool: Vec<(u32, u32)>,
    n_ctx: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(
        field: PrimeField,
        tasks: Vec<TaskVector>,
        pool: Vec<(u32, u32)>,
        n_ctx: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if tasks.is_empty() || batch_size % tasks.len() != 0 {
            return Err(DatasetError::Indivisible { batch_size, n_tasks: tasks.len() });
        }
        if n_ctx > pool.len() {
            return Err(DatasetError::ContextTooLong { n_ctx, available: pool.len() });
        }
        Ok(Self { field, tasks, pool, n_ctx, batch_size, seed })
    }

    pub fn batch(&self, step: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let streams: Vec<Vec<(u32, u32)>> = (0..self.batch_size / self.tasks.len())
            .map(|_| draw_inputs(&mut rng, &self.pool, self.n_ctx))
            .collect();
        build_balanced_batch(&self.field, &self.tasks, &streams, self.batch_size)
            .expect("sampler invariants checked at construction")
    }
}

/// The four evaluation sets: (task set) x (input set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalSet {
    IdTrain,
    IdTest,
    OodTrain,
    OodTest,
}

impl EvalSet {
    pub const ALL: [EvalSet; 4] = [EvalSet::IdTrain, EvalSet::IdTest, EvalSet::OodTrain, EvalSet::OodTest];

    pub fn name(&self) -> &'static str {
        match self {
            EvalSet::IdTrain => "id_train",
            EvalSet::IdTest => "id_test",
            EvalSet::OodTrain => "ood_train",
            EvalSet::OodTest => "ood_test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }

    pub fn tasks<'a>(&self, split: &'a TaskSplit) -> &'a [TaskVector] {
        match self {
            EvalSet::IdTrain | EvalSet::IdTest => &split.in_distribution,
            EvalSet::OodTrain | EvalSet::OodTest => &split.out_of_distribution,
        }
    }

    pub fn inputs<'a>(&self, split: &'a InputSplit) -> &'a [(u32, u32)] {
        match self {
            EvalSet::IdTrain | EvalSet::OodTrain => &split.train,
            EvalSet::IdTest | EvalSet::OodTest => &split.test,
        }
    }
}

impl std::fmt::Display for EvalSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Evaluation sequences whose task comes from the designated task set and
/// whose inputs, context and query alike, all come from the designated
/// input set, without repetition inside a sequence.
pub fn make_eval_sequences(
    field: &PrimeField,
    which: EvalSet,
    count: usize,
    tasks: &TaskSplit,
    inputs: &InputSplit,
    n_ctx: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    let task_pool = which.tasks(tasks);
    let input_pool = which.inputs(inputs);
    if task_pool.is_empty() || input_pool.is_empty() {
        return Err(DatasetError::EmptySet(which));
    }
    if n_ctx > input_pool.len() {
        return Err(DatasetError::ContextTooLong { n_ctx, available: input_pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64 + 1);
    (0..count)
        .map(|_| {
            let task = task_pool[rng.gen_range(0..task_pool.len())];
            let xs = draw_inputs(&mut rng, input_pool, n_ctx);
            build_sequence(field, task, &xs)
        })
        .collect()
}

/// Writes one row per sequence: `a,b,tokens` with space-separated tokens.
pub fn write_sequences_csv<W: Write>(sequences: &[TokenSequence], out: W) -> Result<()> {
    let io = |e: csv::Error| DatasetError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["a", "b", "tokens"]).map_err(io)?;
    for s in sequences {
        let toks = s.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        w.write_record([s.task.a.to_string(), s.task.b.to_string(), toks]).map_err(io)?;
    }
    w.flush().map_err(|e| DatasetError::Io(e.to_string()))
}
