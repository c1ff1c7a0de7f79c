//! Representation analyses: activation capture, PCA, kernel alignment,
//! cross-context correlation and linear decoders.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envcore::{LatentGraph, Suite, Task, ENCODING_DIM};
use crate::error::{Error, Result};
use crate::eval::context_tokens;
use crate::model::{query_forward, ContextCache, ModelParams};
use crate::rng::Rng;
use crate::stats::{bootstrap_ci, Interval, BOOTSTRAP_RESAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Query,
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub env: usize,
    pub node: usize,
    /// Context tokens only.
    pub action: Option<usize>,
    pub next_node: Option<usize>,
    pub position: Option<usize>,
    pub layer: usize,
    pub context_len: usize,
    pub role: TokenRole,
}

/// Row-major `rows x dim` regressors with one metadata entry per row.
///
/// Query rows at layer `l` hold the output of block `l` (`1..=L`); context
/// rows at layer `l` hold the input to block `l`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeDataset {
    pub dim: usize,
    pub x: Vec<f32>,
    pub meta: Vec<SampleMeta>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    fn push(&mut self, row: &[f32], meta: SampleMeta) {
        debug_assert_eq!(row.len(), self.dim);
        self.x.extend_from_slice(row);
        self.meta.push(meta);
    }

    pub fn extend(&mut self, other: ProbeDataset) {
        if self.dim == 0 {
            self.dim = other.dim;
        }
        assert_eq!(self.dim, other.dim);
        self.x.extend(other.x);
        self.meta.extend(other.meta);
    }

    /// Rows satisfying `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&SampleMeta) -> bool) -> ProbeDataset {
        let mut out = ProbeDataset {
            dim: self.dim,
            ..Default::default()
        };
        for (i, m) in self.meta.iter().enumerate() {
            if keep(m) {
                out.push(self.row(i), m.clone());
            }
        }
        out
    }

    pub fn layer(&self, layer: usize) -> ProbeDataset {
        self.filter(|m| m.layer == layer)
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.len(), self.dim, self.x.iter().map(|&v| v as f64))
    }
}

/// Query-token residuals for each of `nodes` after the first `context_len`
/// context tokens, one row per (node, layer).
pub fn capture_query_reps(
    params: &ModelParams<f32>,
    task: &Task,
    context_len: usize,
    nodes: &[usize],
) -> Result<ProbeDataset> {
    let width = params.config.token_width;
    let cache = ContextCache::build(params, &context_tokens(task, context_len, width))?;
    let mut q = vec![0.0f32; nodes.len() * width];
    for (i, &n) in nodes.iter().enumerate() {
        q[i * width..i * width + ENCODING_DIM].copy_from_slice(task.encoder.encode(n));
    }
    let out = query_forward(params, &cache, context_len, &q, true)?;
    let mut ds = ProbeDataset {
        dim: params.config.d_model,
        ..Default::default()
    };
    for layer in 1..=params.config.layers {
        for (i, &n) in nodes.iter().enumerate() {
            let meta = SampleMeta {
                env: task.id,
                node: n,
                action: None,
                next_node: None,
                position: None,
                layer,
                context_len,
                role: TokenRole::Query,
            };
            ds.push(out.resid_of(layer, i).expect("captured"), meta);
        }
    }
    Ok(ds)
}

/// Context positions visited backwards with stride two from the last token,
/// keeping the first occurrence of each distinct transition.
pub fn backward_unique_positions(task: &Task) -> Vec<usize> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let t_len = task.steps.len();
    let mut t = t_len;
    while t >= 1 {
        let st = task.steps[t - 1];
        if seen.insert((st.s, st.a, st.s_next, st.r)) {
            out.push(t - 1);
        }
        if t < 3 {
            break;
        }
        t -= 2;
    }
    out
}

/// Context-token representations entering every block, from one causal pass
/// over the whole context.
pub fn capture_context_reps(params: &ModelParams<f32>, task: &Task) -> Result<ProbeDataset> {
    if task.steps.is_empty() {
        return Err(Error::invalid("context reps need at least one transition"));
    }
    let width = params.config.token_width;
    let c = task.steps.len();
    let cache = ContextCache::build(params, &context_tokens(task, c, width))?;
    let mut ds = ProbeDataset {
        dim: params.config.d_model,
        ..Default::default()
    };
    let positions = backward_unique_positions(task);
    for layer in 1..=params.config.layers {
        for &t in &positions {
            let st = task.steps[t];
            let meta = SampleMeta {
                env: task.id,
                node: st.state(),
                action: Some(st.action()),
                next_node: Some(st.next_state()),
                position: Some(t),
                layer,
                context_len: c,
                role: TokenRole::Context,
            };
            ds.push(cache.context_resid(layer - 1, t), meta);
        }
    }
    Ok(ds)
}

fn double_center(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let row: Vec<f64> = (0..n).map(|i| k.row(i).mean()).collect();
    let col: Vec<f64> = (0..n).map(|j| k.column(j).mean()).collect();
    let all = k.mean();
    DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row[i] - col[j] + all)
}

/// Linear CKA between two kernels over the same samples.
pub fn cka(k: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<f64> {
    if !k.is_square() || k.shape() != l.shape() {
        return Err(Error::invalid("kernels must be square and of equal order"));
    }
    let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-9 * m.amax().max(1.0);
    if !sym(k) || !sym(l) {
        return Err(Error::invalid("kernels must be symmetric"));
    }
    let (kc, lc) = (double_center(k), double_center(l));
    let (nk, nl) = (kc.norm(), lc.norm());
    if nk == 0.0 || nl == 0.0 {
        return Err(Error::Undefined("centered kernel has zero norm".into()));
    }
    Ok(kc.dot(&lc) / (nk * nl))
}

/// `gamma^D` over graph distances for `nodes`.
pub fn structure_kernel(graph: &LatentGraph, nodes: &[usize], gamma: f64) -> DMatrix<f64> {
    let n = nodes.len();
    DMatrix::from_fn(n, n, |i, j| gamma.powi(graph.distance(nodes[i], nodes[j]) as i32))
}

/// `(X - mean)(X - mean)^T` for row-major samples.
pub fn rep_kernel(rows: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = rows.clone();
    for j in 0..x.ncols() {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    &x * x.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkaSpec {
    pub gamma: f64,
}

impl CkaSpec {
    pub fn for_suite(suite: Suite) -> Self {
        CkaSpec {
            gamma: match suite {
                Suite::Gridworld => 0.8,
                Suite::Tree => 0.6,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub config_hash: String,
    pub seed: u64,
    pub env: usize,
    /// 0 is the raw input encoding.
    pub layer: usize,
    pub context_len: usize,
    pub gamma: f64,
    pub cka: f64,
}

/// CKA between the structure kernel and query representations of every
/// node, per (env, layer, context length), plus a raw-encoding row.
pub fn alignment_curve(
    params: &ModelParams<f32>,
    tasks: &[&Task],
    contexts: &[usize],
    spec: CkaSpec,
    seed: u64,
    config_hash: &str,
) -> Result<Vec<AlignmentRow>> {
    let mut rows = Vec::new();
    for task in tasks {
        let nodes: Vec<usize> = (0..task.graph.node_count).collect();
        let k = structure_kernel(&task.graph, &nodes, spec.gamma);
        let raw = DMatrix::from_fn(nodes.len(), ENCODING_DIM, |i, j| task.encoder.encode(nodes[i])[j] as f64);
        let raw_cka = cka(&k, &rep_kernel(&raw))?;
        for &c in contexts {
            let c = c.min(task.steps.len());
            let mut push = |layer, v| {
                rows.push(AlignmentRow {
                    config_hash: config_hash.to_string(),
                    seed,
                    env: task.id,
                    layer,
                    context_len: c,
                    gamma: spec.gamma,
                    cka: v,
                })
            };
            push(0, raw_cka);
            let ds = capture_query_reps(params, task, c, &nodes)?;
            for layer in 1..=params.config.layers {
                match cka(&k, &rep_kernel(&ds.layer(layer).matrix())) {
                    Ok(v) => push(layer, v),
                    Err(Error::Undefined(_)) => log::warn!("env {}: degenerate kernel at layer {layer}", task.id),
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(rows)
}

/// Representations of one env keyed by a node identity shared across envs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvReps {
    pub env: usize,
    pub keys: Vec<u32>,
    pub reps: Vec<Vec<f32>>,
}

impl EnvReps {
    /// Keys are grid node ids or tree heap indices.
    pub fn from_dataset(ds: &ProbeDataset, graph: &LatentGraph) -> Self {
        let heaps = graph.heap_indices();
        EnvReps {
            env: ds.meta.first().map_or(0, |m| m.env),
            keys: ds
                .meta
                .iter()
                .map(|m| heaps.as_ref().map_or(m.node as u32, |h| h[m.node]))
                .collect(),
            reps: (0..ds.len()).map(|i| ds.row(i).to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossContextRow {
    pub group: usize,
    pub n_pairs: usize,
    pub same: Interval,
    pub diff: Interval,
    pub gap: Interval,
}

fn standardized(v: &[f32]) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let m = v.iter().map(|&a| a as f64).sum::<f64>() / n;
    let ss: f64 = v.iter().map(|&a| (a as f64 - m).powi(2)).sum();
    (ss > 0.0).then(|| {
        let s = ss.sqrt();
        v.iter().map(|&a| (a as f64 - m) / s).collect()
    })
}

/// Mean Pearson correlation of same-key and different-key representation
/// pairs across every pair of envs, summarized over env pairs. With `group`
/// both kinds of pair are restricted to keys in the same group.
pub fn cross_context_correlation(
    sets: &[EnvReps],
    group: &dyn Fn(u32) -> usize,
    rng: &mut Rng,
) -> Result<Vec<CrossContextRow>> {
    if sets.len() < 2 {
        return Err(Error::invalid("cross-context correlation needs at least two envs"));
    }
    let z: Vec<Vec<Option<Vec<f64>>>> = sets.iter().map(|s| s.reps.iter().map(|r| standardized(r)).collect()).collect();
    let mut per_group: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            let mut acc: BTreeMap<usize, [(f64, usize); 2]> = BTreeMap::new();
            for (i, ka) in sets[a].keys.iter().enumerate() {
                let Some(za) = &z[a][i] else { continue };
                for (j, kb) in sets[b].keys.iter().enumerate() {
                    let g = group(*ka);
                    if group(*kb) != g {
                        continue;
                    }
                    let Some(zb) = &z[b][j] else { continue };
                    let r: f64 = za.iter().zip(zb).map(|(x, y)| x * y).sum();
                    let slot = &mut acc.entry(g).or_default()[(ka != kb) as usize];
                    slot.0 += r;
                    slot.1 += 1;
                }
            }
            for (g, [same, diff]) in acc {
                if same.1 > 0 && diff.1 > 0 {
                    let e = per_group.entry(g).or_default();
                    e.0.push(same.0 / same.1 as f64);
                    e.1.push(diff.0 / diff.1 as f64);
                }
            }
        }
    }
    per_group
        .into_iter()
        .map(|(g, (same, diff))| {
            let gap: Vec<f64> = same.iter().zip(&diff).map(|(s, d)| s - d).collect();
            Ok(CrossContextRow {
                group: g,
                n_pairs: same.len(),
                same: bootstrap_ci(&same, BOOTSTRAP_RESAMPLES, 0.05, rng)?,
                diff: bootstrap_ci(&diff, BOOTSTRAP_RESAMPLES, 0.05, rng)?,
                gap: bootstrap_ci(&gap, BOOTSTRAP_RESAMPLES, 0.05, rng)?,
            })
        })
        .collect()
}

/// Depth of a heap index (root = 0).
pub fn heap_depth(heap: u32) -> usize {
    (31 - heap.leading_zeros()) as usize
}

/// Env-level split: `test_frac` of the envs (at least one) go to test.
pub fn split_envs(envs: &[usize], test_frac: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut e: Vec<usize> = envs.to_vec();
    e.sort_unstable();
    e.dedup();
    e.shuffle(rng);
    let n_test = ((e.len() as f64 * test_frac).round() as usize).clamp(1, e.len().saturating_sub(1).max(1));
    let test = e[..n_test].to_vec();
    let train = e[n_test..].to_vec();
    (train, test)
}

/// Log-spaced grid over `[10^lo, 10^hi]`.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64))
        .collect()
}

pub const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = DVector::from_fn(x.ncols(), |j, _| x.column(j).mean());
        let scale = DVector::from_fn(x.ncols(), |j, _| {
            let m = mean[j];
            let v = x.column(j).iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        });
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }
}

/// Shuffled k-fold assignment of `n` samples.
fn folds(n: usize, k: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = vec![Vec::new(); k];
    for (i, v) in idx.into_iter().enumerate() {
        out[i % k].push(v);
    }
    out
}

fn take_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Ridge solutions for several penalties from one eigendecomposition.
struct RidgeSystem {
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    /// `V^T X^T Y`.
    vxy: DMatrix<f64>,
    y_mean: DVector<f64>,
}

impl RidgeSystem {
    /// `x` already standardized (column means zero).
    fn new(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Self {
        let y_mean = DVector::from_fn(y.ncols(), |j, _| y.column(j).mean());
        let mut yc = y.clone();
        for j in 0..y.ncols() {
            yc.column_mut(j).add_scalar_mut(-y_mean[j]);
        }
        let eig = SymmetricEigen::new(x.transpose() * x);
        let vxy = eig.eigenvectors.transpose() * (x.transpose() * yc);
        RidgeSystem { eig, vxy, y_mean }
    }

    fn weights(&self, alpha: f64) -> DMatrix<f64> {
        let mut s = self.vxy.clone();
        for (i, mut row) in s.row_iter_mut().enumerate() {
            row /= self.eig.eigenvalues[i].max(0.0) + alpha;
        }
        &self.eig.eigenvectors * s
    }
}

fn r2(y: &DMatrix<f64>, pred: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for j in 0..y.ncols() {
        let m = y.column(j).mean();
        let ss_tot: f64 = y.column(j).iter().map(|v| (v - m).powi(2)).sum();
        let ss_res: f64 = y.column(j).iter().zip(pred.column(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
        total += if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    total / y.ncols() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub alpha: f64,
    pub cv_r2: Vec<f64>,
    pub standardizer: Standardizer,
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
    /// Set when the chosen fit was non-finite and the largest penalty was used.
    pub fallback: bool,
}

impl RidgeFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = self.standardizer.apply(x) * &self.weights;
        for mut row in p.row_iter_mut() {
            row += self.intercept.transpose();
        }
        p
    }
}

/// Multi-output ridge regression: standardized features, penalty chosen by
/// shuffled 5-fold cross-validation on mean R^2, final fit on all of `x`.
pub fn fit_ridge_cv(x: &DMatrix<f64>, y: &DMatrix<f64>, alphas: &[f64], rng: &mut Rng) -> Result<RidgeFit> {
    if x.nrows() != y.nrows() || x.nrows() < CV_FOLDS {
        return Err(Error::invalid("ridge needs matching rows and at least one sample per fold"));
    }
    let fs = folds(x.nrows(), CV_FOLDS, rng);
    let mut scores = vec![0.0; alphas.len()];
    for f in &fs {
        let train: Vec<usize> = (0..x.nrows()).filter(|i| !f.contains(i)).collect();
        let (xt, yt) = (take_rows(x, &train), take_rows(y, &train));
        let st = Standardizer::fit(&xt);
        let sys = RidgeSystem::new(&st.apply(&xt), &yt);
        let xv = st.apply(&take_rows(x, f));
        let yv = take_rows(y, f);
        for (s, &a) in scores.iter_mut().zip(alphas) {
            let mut p = &xv * sys.weights(a);
            for mut row in p.row_iter_mut() {
                row += sys.y_mean.transpose();
            }
            *s += r2(&yv, &p) / CV_FOLDS as f64;
        }
    }
    let best = (0..alphas.len())
        .filter(|&i| scores[i].is_finite())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
        .unwrap_or(alphas.len() - 1);
    let st = Standardizer::fit(x);
    let sys = RidgeSystem::new(&st.apply(x), y);
    let mut alpha = alphas[best];
    let mut w = sys.weights(alpha);
    let mut fallback = false;
    if w.iter().any(|v| !v.is_finite()) {
        alpha = alphas.iter().copied().fold(f64::MIN, f64::max);
        w = sys.weights(alpha);
        fallback = true;
    }
    Ok(RidgeFit {
        alpha,
        cv_r2: scores,
        standardizer: st,
        weights: w,
        intercept: sys.y_mean,
        fallback,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub alpha: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub r2: f64,
    /// Mean absolute error over samples and outputs.
    pub abs_error: f64,
    /// Mean Euclidean distance between predicted and true output vectors.
    pub euclid_error: f64,
}

fn rows_of_envs(ds: &ProbeDataset, envs: &[usize]) -> Vec<usize> {
    let set: HashSet<usize> = envs.iter().copied().collect();
    (0..ds.len()).filter(|&i| set.contains(&ds.meta[i].env)).collect()
}

fn target_matrix(rows: &[usize], targets: &[Vec<f64>]) -> DMatrix<f64> {
    let k = targets[0].len();
    DMatrix::from_fn(rows.len(), k, |i, j| targets[rows[i]][j])
}

/// Ridge probe with env-level train/test hygiene. `targets[i]` is the
/// target vector of row `i`.
pub fn fit_ridge(
    ds: &ProbeDataset,
    targets: &[Vec<f64>],
    train_envs: &[usize],
    test_envs: &[usize],
    rng: &mut Rng,
) -> Result<(RidgeFit, RegressionMetrics, DMatrix<f64>, DMatrix<f64>)> {
    if targets.len() != ds.len() || targets.is_empty() {
        return Err(Error::invalid("one target per row required"));
    }
    let (tr, te) = (rows_of_envs(ds, train_envs), rows_of_envs(ds, test_envs));
    if te.is_empty() {
        return Err(Error::EmptySelection("no test rows".into()));
    }
    let x = ds.matrix();
    let fit = fit_ridge_cv(&take_rows(&x, &tr), &target_matrix(&tr, targets), &logspace(0.0, 4.0, 10), rng)?;
    let yt = target_matrix(&te, targets);
    let pred = fit.predict(&take_rows(&x, &te));
    let diff = &pred - &yt;
    let metrics = RegressionMetrics {
        alpha: fit.alpha,
        n_train: tr.len(),
        n_test: te.len(),
        r2: r2(&yt, &pred),
        abs_error: diff.abs().mean(),
        euclid_error: diff.row_iter().map(|r| r.norm()).sum::<f64>() / te.len() as f64,
    };
    Ok((fit, metrics, pred, yt))
}

/// Smallest absolute difference between two angles.
pub fn wrapped_angle_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircularMetrics {
    pub n_test: usize,
    pub mean_error: f64,
    /// Test samples whose predicted (sin, cos) is too close to the origin.
    pub undefined: usize,
}

/// Angle probe through separate sine and cosine ridge fits.
pub fn fit_circular(
    ds: &ProbeDataset,
    angles: &[f64],
    train_envs: &[usize],
    test_envs: &[usize],
    rng: &mut Rng,
) -> Result<CircularMetrics> {
    let tr = rows_of_envs(ds, train_envs);
    let te = rows_of_envs(ds, test_envs);
    if te.is_empty() || angles.len() != ds.len() {
        return Err(Error::invalid("angle probe needs one angle per row and test rows"));
    }
    let x = ds.matrix();
    let (xtr, xte) = (take_rows(&x, &tr), take_rows(&x, &te));
    let alphas = logspace(0.0, 4.0, 10);
    let mut pred = Vec::new();
    for f in [f64::sin, f64::cos] {
        let y = DMatrix::from_fn(tr.len(), 1, |i, _| f(angles[tr[i]]));
        pred.push(fit_ridge_cv(&xtr, &y, &alphas, rng)?.predict(&xte));
    }
    let mut sum = 0.0;
    let mut undefined = 0;
    let mut n = 0;
    for (i, &r) in te.iter().enumerate() {
        let (s, c) = (pred[0][(i, 0)], pred[1][(i, 0)]);
        if s.hypot(c) < 1e-9 {
            undefined += 1;
            continue;
        }
        sum += wrapped_angle_error(s.atan2(c), angles[r]);
        n += 1;
    }
    Ok(CircularMetrics {
        n_test: te.len(),
        mean_error: if n > 0 { sum / n as f64 } else { f64::NAN },
        undefined,
    })
}

/// Binary L2 logistic regression by Newton iterations; minimizes
/// `C * sum(logloss) + |w|^2 / 2` with an unpenalized intercept.
fn logistic_binary(x: &DMatrix<f64>, y: &[bool], c: f64, init: Option<&DVector<f64>>) -> DVector<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let xa = x.clone().insert_column(d, 1.0);
    let mut w = init.cloned().unwrap_or_else(|| DVector::zeros(d + 1));
    for _ in 0..50 {
        let z = &xa * &w;
        let p: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let mut g = DVector::zeros(d + 1);
        let mut xw = xa.clone();
        for i in 0..n {
            let r = p[i] - y[i] as u8 as f64;
            g.axpy(c * r, &xa.row(i).transpose(), 1.0);
            let s = (c * p[i] * (1.0 - p[i])).max(1e-12).sqrt();
            xw.row_mut(i).scale_mut(s);
        }
        let mut h = xw.transpose() * &xw;
        for j in 0..d {
            g[j] += w[j];
            h[(j, j)] += 1.0;
        }
        h[(d, d)] += 1e-8;
        let Some(ch) = h.cholesky() else { break };
        let step = ch.solve(&g);
        w -= &step;
        if step.amax() < 1e-8 {
            break;
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub c: f64,
    pub classes: Vec<usize>,
    pub standardizer: Standardizer,
    /// One weight vector (with trailing intercept) per class, or a single
    /// one for the second class when there are two.
    pub weights: Vec<DVector<f64>>,
}

impl LogisticFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let xs = self.standardizer.apply(x);
        let d = xs.ncols();
        let xa = xs.insert_column(d, 1.0);
        let scores: Vec<DVector<f64>> = self.weights.iter().map(|w| &xa * w).collect();
        (0..xa.nrows())
            .map(|i| {
                if self.classes.len() == 2 {
                    self.classes[(scores[0][i] > 0.0) as usize]
                } else {
                    let k = (0..scores.len()).max_by(|&a, &b| scores[a][i].total_cmp(&scores[b][i])).unwrap();
                    self.classes[k]
                }
            })
            .collect()
    }
}

fn fit_logistic_raw(xs: &DMatrix<f64>, y: &[usize], classes: &[usize], c: f64) -> Vec<DVector<f64>> {
    if classes.len() == 2 {
        let yb: Vec<bool> = y.iter().map(|&v| v == classes[1]).collect();
        vec![logistic_binary(xs, &yb, c, None)]
    } else {
        classes
            .iter()
            .map(|&k| {
                let yb: Vec<bool> = y.iter().map(|&v| v == k).collect();
                logistic_binary(xs, &yb, c, None)
            })
            .collect()
    }
}

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        let e = per.entry(t).or_default();
        e.0 += (t == p) as usize;
        e.1 += 1;
    }
    per.values().map(|(h, n)| *h as f64 / *n as f64).sum::<f64>() / per.len() as f64
}

/// Logistic decoder: standardized features, inverse penalty chosen by
/// shuffled 5-fold cross-validation on balanced accuracy.
pub fn fit_logistic_cv(x: &DMatrix<f64>, y: &[usize], cs: &[f64], rng: &mut Rng) -> Result<LogisticFit> {
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("logistic probe needs at least two classes"));
    }
    let fs = folds(x.nrows(), CV_FOLDS, rng);
    let mut scores = vec![0.0; cs.len()];
    let mut used = 0usize;
    for f in &fs {
        let train: Vec<usize> = (0..x.nrows()).filter(|i| !f.contains(i)).collect();
        let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let yv: Vec<usize> = f.iter().map(|&i| y[i]).collect();
        let mut cl = ytr.clone();
        cl.sort_unstable();
        cl.dedup();
        let distinct_v: HashSet<usize> = yv.iter().copied().collect();
        if cl.len() < 2 || distinct_v.len() < 2 {
            continue;
        }
        used += 1;
        let xt = take_rows(x, &train);
        let st = Standardizer::fit(&xt);
        let xts = st.apply(&xt);
        for (s, &c) in scores.iter_mut().zip(cs) {
            let fit = LogisticFit {
                c,
                classes: cl.clone(),
                standardizer: st.clone(),
                weights: fit_logistic_raw(&xts, &ytr, &cl, c),
            };
            *s += balanced_accuracy(&yv, &fit.predict(&take_rows(x, f)));
        }
    }
    let best = if used == 0 {
        0
    } else {
        (0..cs.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).unwrap()
    };
    let st = Standardizer::fit(x);
    let weights = fit_logistic_raw(&st.apply(x), y, &classes, cs[best]);
    Ok(LogisticFit {
        c: cs[best],
        classes,
        standardizer: st,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub c: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub balanced_accuracy: f64,
}

/// Logistic probe with env-level train/test hygiene.
pub fn fit_logistic(
    ds: &ProbeDataset,
    labels: &[usize],
    train_envs: &[usize],
    test_envs: &[usize],
    rng: &mut Rng,
) -> Result<(LogisticFit, ClassificationMetrics, Vec<usize>)> {
    let (tr, te) = (rows_of_envs(ds, train_envs), rows_of_envs(ds, test_envs));
    if te.is_empty() || labels.len() != ds.len() {
        return Err(Error::invalid("logistic probe needs one label per row and test rows"));
    }
    let x = ds.matrix();
    let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
    let fit = fit_logistic_cv(&take_rows(&x, &tr), &ytr, &logspace(0.0, 4.0, 10), rng)?;
    let pred = fit.predict(&take_rows(&x, &te));
    let m = ClassificationMetrics {
        c: fit.c,
        n_train: tr.len(),
        n_test: te.len(),
        balanced_accuracy: balanced_accuracy(&yte, &pred),
    };
    Ok((fit, m, pred))
}

/// `gamma^d(s, goal)` over action distance, and over Euclidean distance on grids.
pub fn value_targets(graph: &LatentGraph, goal: usize, gamma: f64) -> (Vec<f64>, Option<Vec<f64>>) {
    let v: Vec<f64> = (0..graph.node_count).map(|s| gamma.powi(graph.distance(s, goal) as i32)).collect();
    let ve = (graph.suite == Suite::Gridworld)
        .then(|| (0..graph.node_count).map(|s| gamma.powf(graph.euclid_distance(s, goal))).collect());
    (v, ve)
}

/// Angle from `node` to the goal in grid coordinates; `None` at the goal.
pub fn angle_to_goal(graph: &LatentGraph, node: usize, goal: usize) -> Option<f64> {
    let (x, y) = graph.grid_xy(node)?;
    let (gx, gy) = graph.grid_xy(goal)?;
    (node != goal).then(|| (gy as f64 - y as f64).atan2(gx as f64 - x as f64))
}

/// Whether a transition runs along an edge of the root-to-goal path.
pub fn on_lr_path(graph: &LatentGraph, goal: usize, s: usize, s_next: usize) -> bool {
    let path = graph.tree_path_from_root(goal);
    s != s_next && path.contains(&s) && path.contains(&s_next)
}

/// The action undoing `s -> s_next`, if any.
pub fn inverse_action(graph: &LatentGraph, s: usize, s_next: usize) -> Option<usize> {
    (s != s_next).then(|| (0..graph.action_count).find(|&a| graph.step(s_next, a) == s)).flatten()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub coords: DMatrix<f64>,
    pub axes: DMatrix<f64>,
    pub explained: Vec<f64>,
    /// Fewer than `k` non-degenerate axes were available.
    pub rank_deficient: bool,
}

/// Projection onto the top `k` principal axes of mean-centered rows. Each
/// axis is signed so that its largest-magnitude loading is positive.
pub fn pca_project(x: &DMatrix<f64>, k: usize) -> Result<Pca> {
    if x.nrows() < k || k == 0 {
        return Err(Error::invalid("pca needs at least k samples"));
    }
    let mut xc = x.clone();
    for j in 0..xc.ncols() {
        let m = xc.column(j).mean();
        xc.column_mut(j).add_scalar_mut(-m);
    }
    let eig = SymmetricEigen::new(xc.transpose() * &xc);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = order.iter().copied().take(k).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let mut axes = DMatrix::zeros(x.ncols(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if big < 0.0 {
            v.neg_mut();
        }
        axes.set_column(c, &v);
    }
    Ok(Pca {
        coords: &xc * &axes,
        explained: keep.iter().map(|&i| eig.eigenvalues[i] / total).collect(),
        rank_deficient: keep.len() < k,
        axes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReportRow {
    pub config_hash: String,
    pub seed: u64,
    pub target: String,
    pub layer: usize,
    pub context_len: usize,
    pub metric: String,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::{build_gridworld_graph, grid_node};
    use crate::rng::substream;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, rng: &mut Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn cka_self_scale_rotation() {
        let mut rng = substream(0, "t", 0);
        let x = randn(20, 8, &mut rng);
        let k = rep_kernel(&x);
        assert!((cka(&k, &k).unwrap() - 1.0).abs() < 1e-9);
        assert!((cka(&k, &(&k * 3.5)).unwrap() - 1.0).abs() < 1e-9);
        let q = randn(8, 8, &mut rng).qr().q();
        let g = structure_kernel(&build_gridworld_graph(), &(0..20).collect::<Vec<_>>(), 0.8);
        let a = cka(&g, &k).unwrap();
        let b = cka(&g, &rep_kernel(&(&x * q))).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(cka(&k, &DMatrix::from_element(20, 20, 1.0)).is_err());
    }

    #[test]
    fn ridge_recovers_linear_map() {
        let mut rng = substream(1, "t", 0);
        let x = randn(200, 6, &mut rng);
        let w = DMatrix::from_row_slice(6, 1, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.5]);
        let y = &x * &w;
        let fit = fit_ridge_cv(&x, &y, &[1e-6, 1.0], &mut rng).unwrap();
        let err = (fit.predict(&x) - y).abs().max();
        assert!(fit.alpha < 1e-3 && err < 1e-4, "{} {err}", fit.alpha);
    }

    #[test]
    fn circular_wrap() {
        assert!(wrapped_angle_error(std::f64::consts::PI, -std::f64::consts::PI) < 1e-12);
        assert!((wrapped_angle_error(0.1, -0.1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn logistic_separable_and_balanced() {
        let mut rng = substream(2, "t", 0);
        let x = randn(120, 3, &mut rng);
        let y: Vec<usize> = (0..120).map(|i| (x[(i, 0)] + 0.5 * x[(i, 2)] > 0.0) as usize).collect();
        let fit = fit_logistic_cv(&x, &y, &[1.0, 100.0], &mut rng).unwrap();
        assert!(balanced_accuracy(&y, &fit.predict(&x)) > 0.97);
        assert_eq!(balanced_accuracy(&[0, 0, 0, 1], &[0, 0, 0, 0]), 0.5);
    }

    #[test]
    fn value_target_arithmetic() {
        let g = build_gridworld_graph();
        let goal = grid_node(2, 2);
        let (v, ve) = value_targets(&g, goal, 0.8);
        assert_eq!(v[goal], 1.0);
        assert!((v[grid_node(2, 4)] - 0.64).abs() < 1e-12);
        assert!((ve.unwrap()[grid_node(3, 3)] - 0.8f64.powf(2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn pca_plane_and_sign() {
        let mut rng = substream(3, "t", 0);
        let basis = randn(2, 30, &mut rng);
        let x = randn(40, 2, &mut rng) * basis;
        let p = pca_project(&x, 2).unwrap();
        assert!((p.explained.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for c in 0..2 {
            let col = p.axes.column(c);
            let big = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
            assert!(big > 0.0);
        }
        let line = DMatrix::from_fn(10, 3, |i, j| (i * (j + 1)) as f64);
        assert!(pca_project(&line, 2).unwrap().rank_deficient);
    }

    #[test]
    fn cross_context_identical_and_independent() {
        let mut rng = substream(4, "t", 0);
        let base: Vec<Vec<f32>> = (0..10).map(|_| (0..16).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let sets: Vec<EnvReps> = (0..3)
            .map(|e| EnvReps {
                env: e,
                keys: (0..10).collect(),
                reps: base.clone(),
            })
            .collect();
        let rows = cross_context_correlation(&sets, &|_| 0, &mut rng).unwrap();
        assert!((rows[0].same.mean - 1.0).abs() < 1e-9);
    }
}
