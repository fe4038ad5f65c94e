//! White-box analyses of a trained model: attention maps, PCA of head
//! outputs and embeddings under discrete-log annotation, cosine similarity of
//! block outputs, and MLP activation grids, each with a scalar statistic.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TaskVector;
use crate::gfp::{LogTable, PrimeField};
use crate::model::{ModelError, ParameterSet};

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("layer {layer} out of range (depth {depth})")]
    Layer { layer: usize, depth: usize },
    #[error("head {head} out of range ({heads} heads)")]
    Head { head: usize, heads: usize },
    #[error("requested {k} components but the data has rank {rank}")]
    Rank { k: usize, rank: usize },
    #[error("row {0} has zero norm after centering")]
    ZeroNorm(usize),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for InterpError {
    fn from(e: std::io::Error) -> Self {
        InterpError::Io(e.to_string())
    }
}

impl From<csv::Error> for InterpError {
    fn from(e: csv::Error) -> Self {
        InterpError::Io(e.to_string())
    }
}

pub type Result<T, E = InterpError> = std::result::Result<T, E>;

const CHUNK: usize = 121;

/// Token inside the final `(x, y, z)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    X,
    Y,
    Z,
}

impl Role {
    /// Offset from the end of the sequence.
    fn back(self) -> usize {
        match self {
            Role::X => 3,
            Role::Y => 2,
            Role::Z => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "x" => Some(Role::X),
            "y" => Some(Role::Y),
            "z" => Some(Role::Z),
            _ => None,
        }
    }
}

/// A fixed labelled prefix followed by every query `(x, y)`, in row-major
/// `x * p + y` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub task: TaskVector,
    pub prefix: Vec<(u32, u32)>,
}

impl Scan {
    pub fn new(task: TaskVector, prefix: Vec<(u32, u32)>) -> Self {
        Self { task, prefix }
    }

    pub fn sequences(&self, field: &PrimeField) -> Vec<Vec<u32>> {
        let p = field.modulus();
        let mut head = Vec::with_capacity(3 * self.prefix.len() + 3);
        for &(x, y) in &self.prefix {
            head.extend_from_slice(&[x, y, self.task.apply(field, x, y)]);
        }
        let mut out = Vec::with_capacity((p * p) as usize);
        for x in 0..p {
            for y in 0..p {
                let mut s = head.clone();
                s.extend_from_slice(&[x, y, self.task.apply(field, x, y)]);
                out.push(s);
            }
        }
        out
    }
}

fn check_layer(params: &ParameterSet<f32>, layer: usize) -> Result<()> {
    if layer >= params.config.depth {
        return Err(InterpError::Layer { layer, depth: params.config.depth });
    }
    Ok(())
}

/// Row-major matrix with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub meta: serde_json::Value,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Writes `<stem>.bin` (little-endian f32) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        save_f32_dump(stem, &[self.rows, self.cols], &self.data, self.meta.clone())
    }
}

pub fn save_f32_dump(stem: &Path, shape: &[usize], data: &[f32], meta: serde_json::Value) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(stem.with_extension("bin"), buf)?;
    let side = serde_json::json!({ "dtype": "f32", "endian": "little", "shape": shape, "meta": meta });
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&side).unwrap())?;
    Ok(())
}

/// Attention weights of every head, `[layer][head]`, each `T x T` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub seq_len: usize,
    pub maps: Vec<Vec<Vec<f32>>>,
}

pub fn attention_maps(params: &ParameterSet<f32>, tokens: &[u32]) -> Result<AttentionMaps> {
    let cap = params.forward(&[tokens], true)?.capture.expect("capture requested");
    let t = tokens.len();
    let maps = cap
        .attention
        .iter()
        .map(|a| a.data().chunks(t * t).map(|m| m.to_vec()).collect())
        .collect();
    Ok(AttentionMaps { seq_len: t, maps })
}

/// Mean attention mass a query puts on itself and the `width - 1` keys just
/// before it, over queries with a full band available.
pub fn band_mass(map: &[f32], t: usize, width: usize) -> f64 {
    let start = width.saturating_sub(1).min(t.saturating_sub(1));
    let rows = start..t;
    let n = rows.len().max(1) as f64;
    rows.map(|i| map[i * t + i + 1 - width.min(i + 1)..=i * t + i].iter().map(|&v| v as f64).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Band mass of every head in `layer`, averaged over sequences.
pub fn head_band_mass(params: &ParameterSet<f32>, layer: usize, seqs: &[&[u32]], width: usize) -> Result<Vec<f64>> {
    check_layer(params, layer)?;
    let mut acc = vec![0.0; params.config.heads];
    for s in seqs {
        let maps = attention_maps(params, s)?;
        for (h, m) in maps.maps[layer].iter().enumerate() {
            acc[h] += band_mass(m, maps.seq_len, width);
        }
    }
    Ok(acc.into_iter().map(|v| v / seqs.len().max(1) as f64).collect())
}

/// One head's post-projection output at the chosen final-triple positions,
/// concatenated, for every query of the scan.
pub fn head_feature_scan(
    params: &ParameterSet<f32>,
    field: &PrimeField,
    layer: usize,
    head: usize,
    scan: &Scan,
    roles: &[Role],
) -> Result<FeatureMatrix> {
    check_layer(params, layer)?;
    if head >= params.config.heads {
        return Err(InterpError::Head { head, heads: params.config.heads });
    }
    if roles.is_empty() {
        return Err(InterpError::Invalid("at least one position is required".into()));
    }
    let d = params.config.d_embed;
    let seqs = scan.sequences(field);
    let t = seqs[0].len();
    let mut data = Vec::with_capacity(seqs.len() * roles.len() * d);
    for part in seqs.chunks(CHUNK) {
        let refs: Vec<&[u32]> = part.iter().map(|s| s.as_slice()).collect();
        let cap = params.forward(&refs, true)?.capture.expect("capture requested");
        let ho = &cap.head_outputs[layer];
        let heads = params.config.heads;
        for b in 0..part.len() {
            for r in roles {
                let pos = t - r.back();
                let off = ((b * heads + head) * t + pos) * d;
                data.extend_from_slice(&ho.data()[off..off + d]);
            }
        }
    }
    Ok(FeatureMatrix {
        rows: seqs.len(),
        cols: roles.len() * d,
        data,
        meta: serde_json::json!({ "kind": "head_output", "layer": layer, "head": head, "roles": roles, "scan": scan }),
    })
}

/// Block output `h^l` at one final-triple position for every query.
pub fn block_output_scan(
    params: &ParameterSet<f32>,
    field: &PrimeField,
    layer: usize,
    scan: &Scan,
    role: Role,
) -> Result<FeatureMatrix> {
    check_layer(params, layer)?;
    let d = params.config.d_embed;
    let seqs = scan.sequences(field);
    let t = seqs[0].len();
    let mut data = Vec::with_capacity(seqs.len() * d);
    for part in seqs.chunks(CHUNK) {
        let refs: Vec<&[u32]> = part.iter().map(|s| s.as_slice()).collect();
        let cap = params.forward(&refs, true)?.capture.expect("capture requested");
        let h = &cap.block_outputs[layer];
        for b in 0..part.len() {
            let off = (b * t + t - role.back()) * d;
            data.extend_from_slice(&h.data()[off..off + d]);
        }
    }
    Ok(FeatureMatrix {
        rows: seqs.len(),
        cols: d,
        data,
        meta: serde_json::json!({ "kind": "block_output", "layer": layer, "role": role, "scan": scan }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// `k` orthonormal directions, each of length `cols`.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    /// `rows x k` coordinates of the centred data.
    pub projections: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Mean-centred PCA through the eigendecomposition of the covariance. Each
/// component is signed so its largest-magnitude coordinate is positive.
pub fn pca(rows: usize, cols: usize, data: &[f64], k: usize) -> Result<PcaResult> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(InterpError::Invalid(format!("bad matrix {rows}x{cols} with {} values", data.len())));
    }
    let mut mean = vec![0.0; cols];
    for r in data.chunks(cols) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let centred = DMatrix::from_fn(rows, cols, |i, j| data[i * cols + j] - mean[j]);
    let cov = centred.transpose() * &centred / rows as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-10 * top.max(f64::MIN_POSITIVE)).count();
    if k > rank {
        return Err(InterpError::Rank { k, rank });
    }
    let mut components = Vec::with_capacity(k);
    let mut explained_ratio = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_ratio.push(eig.eigenvalues[i].max(0.0) / total);
    }
    let projections = (0..rows)
        .map(|r| components.iter().map(|c| (0..cols).map(|j| centred[(r, j)] * c[j]).sum()).collect())
        .collect();
    Ok(PcaResult { components, explained_ratio, projections, mean })
}

pub fn pca_features(features: &FeatureMatrix, k: usize) -> Result<PcaResult> {
    let data: Vec<f64> = features.data.iter().map(|&v| v as f64).collect();
    pca(features.rows, features.cols, &data, k)
}

/// PCA of the token embeddings, one row per token.
pub fn embedding_pca(params: &ParameterSet<f32>, k: usize) -> Result<PcaResult> {
    let e = &params.embedding;
    let data: Vec<f64> = e.data().iter().map(|&v| v as f64).collect();
    pca(e.shape()[0], e.shape()[1], &data, k)
}

/// Scatter rows `x, y, log_x, log_y, pc1, pc2, ...` for a scan PCA.
pub fn write_scan_projection_csv<W: std::io::Write>(pca: &PcaResult, logs: &LogTable, out: W) -> Result<()> {
    let p = logs.modulus();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["x".to_string(), "y".into(), "log_x".into(), "log_y".into()];
    header.extend((1..=pca.components.len()).map(|i| format!("pc{i}")));
    w.write_record(&header)?;
    for (i, proj) in pca.projections.iter().enumerate() {
        let (x, y) = (i as u32 / p, i as u32 % p);
        let mut rec = vec![x.to_string(), y.to_string(), logs.log(x).to_string(), logs.log(y).to_string()];
        rec.extend(proj.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter rows `token, log, pc1, pc2, ...` for an embedding PCA.
pub fn write_embedding_projection_csv<W: std::io::Write>(pca: &PcaResult, logs: &LogTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["token".to_string(), "log".into()];
    header.extend((1..=pca.components.len()).map(|i| format!("pc{i}")));
    w.write_record(&header)?;
    for (t, proj) in pca.projections.iter().enumerate() {
        let mut rec = vec![t.to_string(), logs.log(t as u32).to_string()];
        rec.extend(proj.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Separation of two groups along the best of several coordinates, and its
/// significance against relabelings of the same points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationTest {
    /// Largest absolute Welch-style t statistic over the coordinates.
    pub statistic: f64,
    pub component: usize,
    pub p_value: f64,
    /// Whether every balanced relabeling was enumerated.
    pub exact: bool,
    pub labelings: usize,
}

fn t_stat(values: &[f64], group: &[bool]) -> f64 {
    let (mut s1, mut s2, mut n1, mut n2) = (0.0, 0.0, 0.0, 0.0);
    for (&v, &g) in values.iter().zip(group) {
        if g {
            s1 += v;
            n1 += 1.0;
        } else {
            s2 += v;
            n2 += 1.0;
        }
    }
    if n1 < 2.0 || n2 < 2.0 {
        return 0.0;
    }
    let (m1, m2) = (s1 / n1, s2 / n2);
    let (mut v1, mut v2) = (0.0, 0.0);
    for (&v, &g) in values.iter().zip(group) {
        if g {
            v1 += (v - m1).powi(2);
        } else {
            v2 += (v - m2).powi(2);
        }
    }
    let se = (v1 / (n1 - 1.0) / n1 + v2 / (n2 - 1.0) / n2).sqrt();
    if se == 0.0 {
        if m1 == m2 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (m1 - m2).abs() / se
    }
}

fn best_t(coords: &[Vec<f64>], group: &[bool]) -> (f64, usize) {
    coords
        .iter()
        .enumerate()
        .map(|(c, v)| (t_stat(v, group), c))
        .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Tests whether `group` separates the points along any coordinate. The null
/// holds group sizes fixed; all relabelings are enumerated when there are at
/// most `max_exact`, otherwise `samples` random ones are drawn (with the
/// observed labeling counted, so p is never zero).
pub fn separation_test(
    coords: &[Vec<f64>],
    group: &[bool],
    max_exact: usize,
    samples: usize,
    seed: u64,
) -> SeparationTest {
    let n = group.len();
    let k = group.iter().filter(|&&g| g).count();
    let (observed, component) = best_t(coords, group);
    let total = binomial(n, k);
    if total <= max_exact as f64 {
        let mut at_least = 0usize;
        let mut count = 0usize;
        let mut label = vec![false; n];
        let mut chosen: Vec<usize> = (0..k).collect();
        loop {
            label.iter_mut().for_each(|l| *l = false);
            for &c in &chosen {
                label[c] = true;
            }
            count += 1;
            if best_t(coords, &label).0 >= observed - 1e-12 {
                at_least += 1;
            }
            // next k-combination in lexicographic order
            let mut i = k;
            loop {
                if i == 0 {
                    return SeparationTest {
                        statistic: observed,
                        component,
                        p_value: at_least as f64 / count as f64,
                        exact: true,
                        labelings: count,
                    };
                }
                i -= 1;
                if chosen[i] < n - k + i {
                    chosen[i] += 1;
                    for j in i + 1..k {
                        chosen[j] = chosen[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label = group.to_vec();
    let mut at_least = 1usize;
    for _ in 0..samples {
        label.shuffle(&mut rng);
        if best_t(coords, &label).0 >= observed - 1e-12 {
            at_least += 1;
        }
    }
    SeparationTest {
        statistic: observed,
        component,
        p_value: at_least as f64 / (samples + 1) as f64,
        exact: false,
        labelings: samples + 1,
    }
}

/// Even- versus odd-log separation of the nonzero tokens along the top
/// embedding principal components.
pub fn even_odd_separation(pca: &PcaResult, logs: &LogTable, seed: u64) -> SeparationTest {
    let p = logs.modulus() as usize;
    let k = pca.components.len();
    let coords: Vec<Vec<f64>> = (0..k).map(|c| (1..p).map(|t| pca.projections[t][c]).collect()).collect();
    let group: Vec<bool> = (1..p as u32).map(|t| logs.log(t) % 2 == 0).collect();
    separation_test(&coords, &group, 200_000, 20_000, seed)
}

/// Cosine similarity between every pair of rows after removing each row's
/// own mean.
pub fn cosine_similarity(features: &FeatureMatrix) -> Result<Vec<f64>> {
    let (n, d) = (features.rows, features.cols);
    let mut unit = vec![0.0f64; n * d];
    for i in 0..n {
        let row = features.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let norm = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(InterpError::ZeroNorm(i));
        }
        for j in 0..d {
            unit[i * d + j] = (row[j] as f64 - mean) / norm;
        }
    }
    let mut sim = vec![0.0; n * n];
    crate::numerics::gemm(false, true, n, d, n, 1.0, &unit, &unit, 0.0, &mut sim);
    for i in 0..n {
        sim[i * n + i] = 1.0;
        for j in 0..i {
            let v = 0.5 * (sim[i * n + j] + sim[j * n + i]);
            sim[i * n + j] = v.clamp(-1.0, 1.0);
            sim[j * n + i] = v.clamp(-1.0, 1.0);
        }
    }
    Ok(sim)
}

/// `p^2 x p^2` similarity of layer outputs at the `y` or `z` position.
pub fn cosine_similarity_matrix(
    params: &ParameterSet<f32>,
    field: &PrimeField,
    layer: usize,
    role: Role,
    scan: &Scan,
) -> Result<Vec<f64>> {
    if role == Role::X {
        return Err(InterpError::Invalid("similarity is defined at the y or z position".into()));
    }
    cosine_similarity(&block_output_scan(params, field, layer, scan, role)?)
}

/// Ratio class of a query: `y / x` for `x != 0`, `p` for the line `x = 0`,
/// and `None` for the origin.
pub fn ratio_class(field: &PrimeField, x: u32, y: u32) -> Option<u32> {
    match (x, y) {
        (0, 0) => None,
        (0, _) => Some(field.modulus()),
        _ => Some(field.div(y, x).expect("x is nonzero")),
    }
}

/// Mean similarity of pairs in the same ratio class minus that of pairs in
/// different classes, over distinct non-origin queries.
pub fn ratio_class_statistic(field: &PrimeField, sim: &[f64]) -> f64 {
    let p = field.modulus();
    let n = (p * p) as usize;
    let class: Vec<Option<u32>> = (0..n as u32).map(|i| ratio_class(field, i / p, i % p)).collect();
    let (mut sw, mut nw, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        let Some(ci) = class[i] else { continue };
        for j in 0..n {
            if i == j {
                continue;
            }
            let Some(cj) = class[j] else { continue };
            if ci == cj {
                sw += sim[i * n + j];
                nw += 1;
            } else {
                sb += sim[i * n + j];
                nb += 1;
            }
        }
    }
    sw / nw.max(1) as f64 - sb / nb.max(1) as f64
}

/// Post-ReLU activation of selected neurons as a function of the scanned
/// query, one `p x p` grid per neuron (`x` rows, `y` columns).
pub fn mlp_activation_grid(
    params: &ParameterSet<f32>,
    field: &PrimeField,
    layer: usize,
    neurons: &[usize],
    scan: &Scan,
    role: Role,
) -> Result<Vec<Vec<f32>>> {
    check_layer(params, layer)?;
    let hidden = params.config.hidden();
    if let Some(&bad) = neurons.iter().find(|&&n| n >= hidden) {
        return Err(InterpError::Invalid(format!("neuron {bad} out of range ({hidden} hidden units)")));
    }
    let seqs = scan.sequences(field);
    let t = seqs[0].len();
    let mut grids = vec![Vec::with_capacity(seqs.len()); neurons.len()];
    for part in seqs.chunks(CHUNK) {
        let refs: Vec<&[u32]> = part.iter().map(|s| s.as_slice()).collect();
        let cap = params.forward(&refs, true)?.capture.expect("capture requested");
        let m = &cap.mlp_hidden[layer];
        for b in 0..part.len() {
            let off = (b * t + t - role.back()) * hidden;
            for (g, &n) in grids.iter_mut().zip(neurons) {
                g.push(m.data()[off + n]);
            }
        }
    }
    Ok(grids)
}

/// Reorders a `p x p` grid so rows and columns follow `log` order of the
/// nonzero values, giving a `(p-1) x (p-1)` grid.
pub fn reindex_by_log(grid: &[f32], logs: &LogTable) -> Vec<f32> {
    let p = logs.modulus();
    let by_log: Vec<u32> = (1..p).map(|k| logs.exp(k)).collect();
    let mut out = Vec::with_capacity(((p - 1) * (p - 1)) as usize);
    for &x in &by_log {
        for &y in &by_log {
            out.push(grid[(x * p + y) as usize]);
        }
    }
    out
}

/// Share of non-constant 2-D Fourier power carried by the strongest
/// frequency pair `(u, v)` and its conjugate.
pub fn spectral_concentration(grid: &[f32], n: usize) -> f64 {
    let mean = grid.iter().map(|&v| v as f64).sum::<f64>() / grid.len() as f64;
    let tau = std::f64::consts::TAU;
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..n).map(|k| tau * k as f64 / n as f64).map(|a| (a.cos(), -a.sin())).unzip();
    // separable DFT: transform along y for every row, then along x
    let mut half = vec![(0.0, 0.0); n * n];
    for x in 0..n {
        for v in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                let a = grid[x * n + y] as f64 - mean;
                let k = (v * y) % n;
                re += a * cos[k];
                im += a * sin[k];
            }
            half[x * n + v] = (re, im);
        }
    }
    let mut powers = Vec::with_capacity(n * n);
    for u in 0..n {
        for v in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for x in 0..n {
                let (hr, hi) = half[x * n + v];
                let k = (u * x) % n;
                re += hr * cos[k] - hi * sin[k];
                im += hr * sin[k] + hi * cos[k];
            }
            powers.push(re * re + im * im);
        }
    }
    let total: f64 = powers.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut best = 0.0f64;
    for u in 0..n {
        for v in 0..n {
            let conj = ((n - u) % n) * n + (n - v) % n;
            let pair = if conj == u * n + v { powers[conj] } else { powers[u * n + v] + powers[conj] };
            best = best.max(pair);
        }
    }
    best / total
}

/// Concentration of a grid and the fraction of shuffled grids that reach it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralTest {
    pub concentration: f64,
    pub p_value: f64,
}

pub fn spectral_test(grid: &[f32], n: usize, shuffles: usize, seed: u64) -> SpectralTest {
    let observed = spectral_concentration(grid, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = grid.to_vec();
    let mut hits = 1;
    for _ in 0..shuffles {
        g.shuffle(&mut rng);
        if spectral_concentration(&g, n) >= observed - 1e-12 {
            hits += 1;
        }
    }
    SpectralTest { concentration: observed, p_value: hits as f64 / (shuffles + 1) as f64 }
}

/// Scalar summaries of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpStats {
    /// Ratio-class statistic of block outputs at the final `y`, per layer.
    pub ratio_class_y: Vec<f64>,
    /// The same at the final `z`.
    pub ratio_class_z: Vec<f64>,
    /// `band_mass[layer][head]` over the supplied sequences.
    pub band_mass: Vec<Vec<f64>>,
    pub band_width: usize,
    /// Even/odd-log separation along the top three embedding components.
    pub even_odd: SeparationTest,
}

pub fn interp_stats(
    params: &ParameterSet<f32>,
    field: &PrimeField,
    logs: &LogTable,
    scan: &Scan,
    band_seqs: &[&[u32]],
    band_width: usize,
    seed: u64,
) -> Result<InterpStats> {
    let depth = params.config.depth;
    let mut ratio_class_y = Vec::with_capacity(depth);
    let mut ratio_class_z = Vec::with_capacity(depth);
    let mut band_mass = Vec::with_capacity(depth);
    for layer in 0..depth {
        ratio_class_y.push(ratio_class_statistic(field, &cosine_similarity_matrix(params, field, layer, Role::Y, scan)?));
        ratio_class_z.push(ratio_class_statistic(field, &cosine_similarity_matrix(params, field, layer, Role::Z, scan)?));
        band_mass.push(head_band_mass(params, layer, band_seqs, band_width)?);
    }
    let k = 3.min(params.config.d_embed).min(field.modulus() as usize - 1);
    let even_odd = even_odd_separation(&embedding_pca(params, k)?, logs, seed);
    Ok(InterpStats { ratio_class_y, ratio_class_z, band_mass, band_width, even_odd })
}
