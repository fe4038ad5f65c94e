//! Closed-form predictors for a k-shot context: Ratio Matching, Modular
//! Regression, and exhaustive task inference as ground truth.

use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TaskVector;
use crate::gfp::{solve_linear_mod_p, PrimeField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("context has no examples")]
    EmptyContext,
    #[error("value {value} is not an element of GF({p})")]
    OutOfRange { value: u32, p: u32 },
    #[error("unknown algorithm {0:?} (expected ratio or regression)")]
    UnknownAlgorithm(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T, E = OracleError> = std::result::Result<T, E>;

/// In-context examples `(x_i, y_i, z_i)` and a query `(x, y)`. Labels are
/// taken verbatim, so corrupted contexts are representable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSet {
    pub examples: Vec<(u32, u32, u32)>,
    pub query: (u32, u32),
}

impl ContextSet {
    pub fn new(field: &PrimeField, examples: Vec<(u32, u32, u32)>, query: (u32, u32)) -> Result<Self> {
        let p = field.modulus();
        let all = examples.iter().flat_map(|&(x, y, z)| [x, y, z]).chain([query.0, query.1]);
        for value in all {
            if value >= p {
                return Err(OracleError::OutOfRange { value, p });
            }
        }
        Ok(Self { examples, query })
    }

    /// Context built from a task's labels on the given inputs.
    pub fn labeled(field: &PrimeField, task: TaskVector, inputs: &[(u32, u32)], query: (u32, u32)) -> Result<Self> {
        let examples = inputs.iter().map(|&(x, y)| (x, y, task.apply(field, x, y))).collect();
        Self::new(field, examples, query)
    }

    pub fn with_query(&self, query: (u32, u32)) -> Self {
        Self { examples: self.examples.clone(), query }
    }
}

/// The scalar `c` with `c * (xi, yi) = (x, y)`, if any.
fn scalar_multiple(field: &PrimeField, (xi, yi): (u32, u32), (x, y): (u32, u32)) -> Option<u32> {
    if xi != 0 {
        let c = field.mul(x, field.inv(xi).ok()?);
        (field.mul(c, yi) == y).then_some(c)
    } else if yi != 0 {
        let c = field.mul(y, field.inv(yi).ok()?);
        (x == 0).then_some(c)
    } else {
        (x == 0 && y == 0).then_some(0)
    }
}

/// Rescales the first example whose input is a scalar multiple of the query.
pub fn ratio_match(field: &PrimeField, ctx: &ContextSet) -> Result<Option<u32>> {
    if ctx.examples.is_empty() {
        return Err(OracleError::EmptyContext);
    }
    Ok(ctx
        .examples
        .iter()
        .find_map(|&(xi, yi, zi)| scalar_multiple(field, (xi, yi), ctx.query).map(|c| field.mul(c, zi))))
}

/// Writes the query as a GF(p)-combination of context inputs and applies the
/// same combination to the labels.
pub fn modular_regress(field: &PrimeField, ctx: &ContextSet) -> Result<Option<u32>> {
    if ctx.examples.is_empty() {
        return Err(OracleError::EmptyContext);
    }
    let columns: Vec<(u32, u32)> = ctx.examples.iter().map(|&(x, y, _)| (x, y)).collect();
    Ok(solve_linear_mod_p(field, &columns, ctx.query).map(|coeffs| {
        coeffs.iter().zip(&ctx.examples).fold(0, |acc, (&c, &(_, _, z))| field.add(acc, field.mul(c, z)))
    }))
}

/// Every task consistent with all examples (the query is ignored).
pub fn infer_tasks(field: &PrimeField, examples: &[(u32, u32, u32)]) -> Vec<TaskVector> {
    let p = field.modulus();
    (0..p)
        .flat_map(|a| (0..p).map(move |b| TaskVector::new(a, b)))
        .filter(|t| examples.iter().all(|&(x, y, z)| t.apply(field, x, y) == z))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ratio,
    Regression,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Ratio => "ratio",
            Algorithm::Regression => "regression",
        }
    }

    pub fn predict(&self, field: &PrimeField, ctx: &ContextSet) -> Result<Option<u32>> {
        match self {
            Algorithm::Ratio => ratio_match(field, ctx),
            Algorithm::Regression => modular_regress(field, ctx),
        }
    }
}

impl FromStr for Algorithm {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(Algorithm::Ratio),
            "regression" => Ok(Algorithm::Regression),
            other => Err(OracleError::UnknownAlgorithm(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Correct,
    Incorrect,
    Unpredicted,
}

impl CellStatus {
    pub fn name(&self) -> &'static str {
        match self {
            CellStatus::Correct => "correct",
            CellStatus::Incorrect => "incorrect",
            CellStatus::Unpredicted => "unpredicted",
        }
    }
}

/// Status of every query `(x, y)`, stored at `x * p + y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub p: u32,
    pub cells: Vec<CellStatus>,
}

impl Grid {
    pub fn get(&self, x: u32, y: u32) -> CellStatus {
        self.cells[(x * self.p + y) as usize]
    }

    pub fn count(&self, status: CellStatus) -> usize {
        self.cells.iter().filter(|&&c| c == status).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| OracleError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "status"]).map_err(io)?;
        for x in 0..self.p {
            for y in 0..self.p {
                w.write_record([x.to_string(), y.to_string(), self.get(x, y).name().to_string()]).map_err(io)?;
            }
        }
        w.flush().map_err(|e| OracleError::Io(e.to_string()))
    }
}

/// Runs `algorithm` on every query of GF(p)^2 with a fixed context and marks
/// each prediction against the task's true label.
pub fn oracle_grid(
    field: &PrimeField,
    examples: &[(u32, u32, u32)],
    task: TaskVector,
    algorithm: Algorithm,
) -> Result<Grid> {
    let p = field.modulus();
    let mut ctx = ContextSet::new(field, examples.to_vec(), (0, 0))?;
    let mut cells = Vec::with_capacity((p * p) as usize);
    for x in 0..p {
        for y in 0..p {
            ctx.query = (x, y);
            cells.push(match algorithm.predict(field, &ctx)? {
                None => CellStatus::Unpredicted,
                Some(z) if z == task.apply(field, x, y) => CellStatus::Correct,
                Some(_) => CellStatus::Incorrect,
            });
        }
    }
    Ok(Grid { p, cells })
}

/// Counts from an exhaustive-over-tasks check of the oracles on random clean
/// contexts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub p: u32,
    pub contexts: usize,
    pub ratio_predictions: usize,
    pub regression_predictions: usize,
    /// Ratio predictions that disagree with the true task.
    pub ratio_violations: usize,
    pub regression_violations: usize,
    /// Queries predicted by ratio matching but not identically by regression.
    pub subsumption_violations: usize,
    /// Singleton task inferences that regression contradicts.
    pub agreement_violations: usize,
}

impl AuditReport {
    pub fn violations(&self) -> usize {
        self.ratio_violations + self.regression_violations + self.subsumption_violations + self.agreement_violations
    }
}

/// For every task and every `k` in `shots`, draws `per_task` contexts of `k`
/// uniformly random inputs and a random query, and checks soundness,
/// subsumption and agreement with exhaustive task inference.
pub fn audit(field: &PrimeField, shots: &[usize], per_task: usize, seed: u64) -> AuditReport {
    let p = field.modulus();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = AuditReport { p, ..Default::default() };
    for a in 0..p {
        for b in 0..p {
            let task = TaskVector::new(a, b);
            for &k in shots {
                for _ in 0..per_task {
                    let inputs: Vec<(u32, u32)> = (0..k).map(|_| (rng.gen_range(0..p), rng.gen_range(0..p))).collect();
                    let query = (rng.gen_range(0..p), rng.gen_range(0..p));
                    let truth = task.apply(field, query.0, query.1);
                    let ctx = ContextSet::labeled(field, task, &inputs, query).expect("values drawn in range");
                    r.contexts += 1;
                    let ratio = ratio_match(field, &ctx).expect("non-empty");
                    let reg = modular_regress(field, &ctx).expect("non-empty");
                    if let Some(v) = ratio {
                        r.ratio_predictions += 1;
                        r.ratio_violations += (v != truth) as usize;
                        r.subsumption_violations += (reg != Some(v)) as usize;
                    }
                    if let Some(v) = reg {
                        r.regression_predictions += 1;
                        r.regression_violations += (v != truth) as usize;
                    }
                    let tasks = infer_tasks(field, &ctx.examples);
                    if let ([only], Some(v)) = (tasks.as_slice(), reg) {
                        r.agreement_violations += (only.apply(field, query.0, query.1) != v) as usize;
                    }
                }
            }
        }
    }
    r
}

/// Number of queries ratio matching answers from one example.
pub fn ratio_coverage(field: &PrimeField, example: (u32, u32, u32)) -> usize {
    let p = field.modulus();
    let mut ctx = ContextSet { examples: vec![example], query: (0, 0) };
    let mut n = 0;
    for x in 0..p {
        for y in 0..p {
            ctx.query = (x, y);
            n += ratio_match(field, &ctx).expect("non-empty").is_some() as usize;
        }
    }
    n
}
