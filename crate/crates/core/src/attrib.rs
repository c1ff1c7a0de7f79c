//! Decision-time mechanism tests: integrated gradients over context tokens,
//! query-row attention ablations and restrictions, and attention-distance
//! profiles over context tokens.
//!
//! Layers are numbered from 1 throughout this module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::envcore::{Task, ENCODING_DIM};
use crate::error::{Error, Result};
use crate::model::{
    backward, context_then_query, forward_acts, forward_with, ModelParams, RowOverride, Scalar, TokenSequence,
};

/// Attribution of one output logit to every input token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub position: usize,
    pub target: usize,
    pub steps: usize,
    /// One entry per input token, summed over its components.
    pub per_token: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.per_token.iter().sum()
    }

    /// `|sum - (F(x) - F(b))| / |F(x) - F(b)|`; zero when both sides vanish.
    pub fn completeness_residual(&self) -> f64 {
        let want = self.f_input - self.f_baseline;
        let gap = (self.total() - want).abs();
        if want == 0.0 {
            gap
        } else {
            gap / want.abs()
        }
    }
}

/// The same sequence with the action field of every context token zeroed.
pub fn action_ablated_baseline(seq: &TokenSequence, action_count: usize) -> Vec<f32> {
    let mut b = seq.tokens.clone();
    for (i, role) in seq.roles.iter().enumerate() {
        if *role == crate::model::Role::Context {
            let t = &mut b[i * seq.width..(i + 1) * seq.width];
            t[ENCODING_DIM..ENCODING_DIM + action_count].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    b
}

fn logit_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[T],
    seq: &TokenSequence,
    position: usize,
    target: usize,
    scratch: &mut [T],
) -> Result<(f64, Vec<T>)> {
    let na = params.config.action_count;
    let acts = forward_acts(params, tokens, &seq.mask(), &[], None)?;
    let f = acts.logits[position * na + target].as_f64();
    let mut dl = vec![T::zero(); seq.len() * na];
    dl[position * na + target] = T::one();
    let g = backward(params, &acts, &dl, scratch, true).expect("input gradient requested");
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { layer: params.config.layers });
    }
    Ok((f, g))
}

/// Integrated gradients of the `target` logit at `position`, along the
/// straight line from the action-ablated baseline to the input, with a
/// midpoint Riemann sum of `steps` terms.
pub fn integrated_gradients<T: Scalar>(
    params: &ModelParams<T>,
    seq: &TokenSequence,
    position: usize,
    target: usize,
    steps: usize,
) -> Result<AttributionMap> {
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    if position >= seq.len() || target >= params.config.action_count {
        return Err(Error::invalid("attribution target out of range"));
    }
    let w = seq.width;
    let x: Vec<T> = seq.tokens.iter().map(|&v| T::lit(v as f64)).collect();
    let b: Vec<T> = action_ablated_baseline(seq, params.config.action_count)
        .into_iter()
        .map(|v| T::lit(v as f64))
        .collect();
    let mut scratch = vec![T::zero(); params.layout.total];
    let mut acc = vec![0.0f64; x.len()];
    let mut point = vec![T::zero(); x.len()];
    for k in 0..steps {
        let alpha = T::lit((k as f64 + 0.5) / steps as f64);
        for ((p, xi), bi) in point.iter_mut().zip(&x).zip(&b) {
            *p = *bi + alpha * (*xi - *bi);
        }
        let (_, g) = logit_and_grad(params, &point, seq, position, target, &mut scratch)?;
        acc.iter_mut().zip(&g).for_each(|(a, gi)| *a += gi.as_f64());
    }
    let per_token = (0..seq.len())
        .map(|i| {
            (i * w..(i + 1) * w)
                .map(|j| (x[j] - b[j]).as_f64() * acc[j] / steps as f64)
                .sum()
        })
        .collect();
    let endpoint = |t: &[T]| -> Result<f64> {
        let acts = forward_acts(params, t, &seq.mask(), &[], None)?;
        Ok(acts.logits[position * params.config.action_count + target].as_f64())
    };
    Ok(AttributionMap {
        position,
        target,
        steps,
        per_token,
        f_input: endpoint(&x)?,
        f_baseline: endpoint(&b)?,
    })
}

/// Context token indices (within the first `c`) whose state or next state is `node`.
pub fn tokens_with_node(task: &Task, c: usize, node: usize) -> Vec<usize> {
    (0..c.min(task.steps.len())).filter(|&t| task.steps[t].involves(node)).collect()
}

/// Direction filter for tokens on a path toward the goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathDirection {
    Any,
    TowardGoal,
    AwayFromGoal,
}

/// Tokens involving `node` whose transition runs along `path` (consecutive
/// nodes), filtered by direction. With `on_path = false`, the tokens
/// involving `node` that are not path edges.
pub fn path_tokens(task: &Task, c: usize, node: usize, path: &[usize], on_path: bool, dir: PathDirection) -> Vec<usize> {
    let idx = |n: usize| path.iter().position(|&p| p == n);
    tokens_with_node(task, c, node)
        .into_iter()
        .filter(|&t| {
            let st = task.steps[t];
            let edge = match (idx(st.state()), idx(st.next_state())) {
                (Some(i), Some(j)) if i.abs_diff(j) == 1 => Some(j > i),
                _ => None,
            };
            match (on_path, edge) {
                (false, e) => e.is_none(),
                (true, None) => false,
                (true, Some(toward)) => match dir {
                    PathDirection::Any => true,
                    PathDirection::TowardGoal => toward,
                    PathDirection::AwayFromGoal => !toward,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    Necessity,
    Sufficiency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub mode: InterventionMode,
    /// Context token indices.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub ce_original: f64,
    pub ce_intervened: f64,
    pub delta_ce: f64,
    /// Empty selection: a no-op for necessity, undefined for sufficiency.
    pub flagged: bool,
}

/// Cross-entropy of the optimal-action set: `-ln` of the probability mass
/// the model puts on oracle-optimal actions.
pub fn optimal_set_ce(logits: &[f32], optimal_mask: u8) -> f64 {
    let lp = crate::model::sample::log_softmax(logits);
    let m = lp
        .iter()
        .enumerate()
        .filter(|(a, _)| optimal_mask & (1 << a) != 0)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = lp
        .iter()
        .enumerate()
        .filter(|(a, _)| optimal_mask & (1 << a) != 0)
        .map(|(_, v)| (v - m).exp())
        .sum();
    -(m + s.ln())
}

/// Runs the query after `c` context tokens with the query row of one layer
/// masked (necessity) or restricted (sufficiency) to `spec.tokens`.
pub fn intervene(
    params: &ModelParams<f32>,
    task: &Task,
    c: usize,
    query: usize,
    spec: &InterventionSpec,
) -> Result<InterventionResult> {
    if spec.layer == 0 || spec.layer > params.config.layers {
        return Err(Error::invalid(format!("layer {} out of range", spec.layer)));
    }
    if spec.tokens.iter().any(|&t| t >= c) {
        return Err(Error::invalid("selected token outside the context prefix"));
    }
    let seq = context_then_query(task, c, query)?;
    let mask = seq.mask();
    let na = params.config.action_count;
    let opt = task.oracle().optimal_mask(query);
    let base = forward_with(params, &seq.tokens, &mask, &[], false)?;
    let ce_original = optimal_set_ce(&base.logits[c * na..(c + 1) * na], opt);
    let flagged = spec.tokens.is_empty();
    if flagged && spec.mode == InterventionMode::Necessity {
        return Ok(InterventionResult {
            ce_original,
            ce_intervened: ce_original,
            delta_ce: 0.0,
            flagged,
        });
    }
    let mut allowed = mask.row(c).to_vec();
    match spec.mode {
        InterventionMode::Necessity => spec.tokens.iter().for_each(|&t| allowed[t] = false),
        InterventionMode::Sufficiency => {
            allowed[..c].iter_mut().for_each(|v| *v = false);
            spec.tokens.iter().for_each(|&t| allowed[t] = true);
        }
    }
    let ov = RowOverride {
        layer: spec.layer - 1,
        row: c,
        allowed,
    };
    let out = forward_with(params, &seq.tokens, &mask, &[ov], false)?;
    let ce = optimal_set_ce(&out.logits[c * na..(c + 1) * na], opt);
    Ok(InterventionResult {
        ce_original,
        ce_intervened: ce,
        delta_ce: ce - ce_original,
        flagged,
    })
}

pub fn necessity_ablation(
    params: &ModelParams<f32>,
    task: &Task,
    c: usize,
    query: usize,
    layer: usize,
    tokens: Vec<usize>,
) -> Result<InterventionResult> {
    intervene(
        params,
        task,
        c,
        query,
        &InterventionSpec {
            layer,
            mode: InterventionMode::Necessity,
            tokens,
        },
    )
}

pub fn sufficiency_restriction(
    params: &ModelParams<f32>,
    task: &Task,
    c: usize,
    query: usize,
    layer: usize,
    tokens: Vec<usize>,
) -> Result<InterventionResult> {
    intervene(
        params,
        task,
        c,
        query,
        &InterventionSpec {
            layer,
            mode: InterventionMode::Sufficiency,
            tokens,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub config_hash: String,
    pub seed: u64,
    pub env: usize,
    pub spec: String,
    pub layer: usize,
    pub path_index: usize,
    pub node: usize,
    pub n_tokens: usize,
    pub delta_ce: f64,
    pub flagged: bool,
}

/// Necessity ablation of the tokens involving each node of `path`, at every
/// layer; one row per (layer, path position).
pub fn necessity_along_path(
    params: &ModelParams<f32>,
    task: &Task,
    c: usize,
    query: usize,
    path: &[usize],
    seed: u64,
    config_hash: &str,
) -> Result<Vec<InterventionRow>> {
    let mut rows = Vec::new();
    for layer in 1..=params.config.layers {
        for (i, &node) in path.iter().enumerate() {
            let toks = tokens_with_node(task, c, node);
            let n = toks.len();
            let r = necessity_ablation(params, task, c, query, layer, toks)?;
            rows.push(InterventionRow {
                config_hash: config_hash.to_string(),
                seed,
                env: task.id,
                spec: "necessity".into(),
                layer,
                path_index: i,
                node,
                n_tokens: n,
                delta_ce: r.delta_ce,
                flagged: r.flagged,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub distance: u32,
    /// Attention mass per source token falling on this bin, averaged over
    /// source tokens and heads.
    pub mean_mass: f64,
    /// Mean attention weight of a single (source, target) pair in this bin.
    pub mean_weight: f64,
    pub pairs: usize,
}

/// Context-to-context attention at `layer` binned by graph distance
/// between the source states of the attending and attended tokens.
pub fn attention_distance_profile(params: &ModelParams<f32>, task: &Task, layer: usize) -> Result<Vec<DistanceBin>> {
    if layer == 0 || layer >= params.config.layers {
        return Err(Error::invalid("profile layer must precede the last layer"));
    }
    let c = task.steps.len();
    let width = params.config.token_width;
    let tokens = crate::eval::context_tokens(task, c, width);
    let mask = crate::model::AttentionMask::causal(c);
    let out = forward_with(params, &tokens, &mask, &[], true)?;
    let tr = out.trace.expect("captured");
    let h = params.config.heads;
    let mut bins: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
    for i in 0..c {
        let si = task.steps[i].state();
        let mut row_mass: BTreeMap<u32, f64> = BTreeMap::new();
        for j in 0..=i {
            let dist = task.graph.distance(si, task.steps[j].state());
            let w: f64 = (0..h).map(|hd| tr.attn(layer - 1, hd, i, j) as f64).sum::<f64>() / h as f64;
            *row_mass.entry(dist).or_default() += w;
            let e = bins.entry(dist).or_default();
            e.1 += w;
            e.2 += 1;
        }
        for (d, m) in row_mass {
            bins.entry(d).or_default().0 += m;
        }
    }
    Ok(bins
        .into_iter()
        .map(|(d, (mass, w, n))| DistanceBin {
            distance: d,
            mean_mass: mass / c as f64,
            mean_weight: w / n as f64,
            pairs: n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub config_hash: String,
    pub seed: u64,
    pub env: usize,
    pub token: usize,
    pub s: usize,
    pub s_next: usize,
    pub dist_query: u32,
    pub dist_goal: u32,
    pub bucket: u32,
    pub strength: f64,
    pub normalized: f64,
}

/// Per context token: |IG| and distances of its transition to the query and
/// goal (nearest endpoint), with a per-env max-normalized column.
pub fn attribution_rows(
    task: &Task,
    map: &AttributionMap,
    c: usize,
    query: usize,
    seed: u64,
    config_hash: &str,
) -> Vec<AttributionRow> {
    let g = &task.graph;
    let near = |st: &crate::envcore::Step, n: usize| g.distance(st.state(), n).min(g.distance(st.next_state(), n));
    let max = map.per_token[..c].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (0..c)
        .map(|t| {
            let st = task.steps[t];
            let (dq, dg) = (near(&st, query), near(&st, task.goal));
            let strength = map.per_token[t].abs();
            AttributionRow {
                config_hash: config_hash.to_string(),
                seed,
                env: task.id,
                token: t,
                s: st.state(),
                s_next: st.next_state(),
                dist_query: dq,
                dist_goal: dg,
                bucket: dq.min(dg),
                strength,
                normalized: if max > 0.0 { strength / max } else { 0.0 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::{build_taskset, EnvConfig};
    use crate::model::{ModelConfig, ModelParams};
    use crate::rng::substream;

    fn fixture() -> (crate::envcore::TaskSet, ModelParams<f32>) {
        let cfg = EnvConfig {
            trajectory_len: 24,
            ..EnvConfig::tree()
        };
        let ts = build_taskset(10, 3, &cfg).unwrap();
        let mc = ModelConfig::sized(ts.tasks[0].suite(), 3, 2, 16);
        let mut p = ModelParams::<f32>::init(&mc, &mut substream(0, "init", 0)).unwrap();
        p.data.iter_mut().for_each(|v| *v *= 4.0);
        (ts, p)
    }

    #[test]
    fn zero_path_gives_zero_attribution() {
        let (ts, p) = fixture();
        let task = &ts.tasks[0];
        let mut seq = context_then_query(task, 10, 0).unwrap();
        seq.tokens = action_ablated_baseline(&seq, 4);
        let m = integrated_gradients(&p, &seq, 10, 1, 8).unwrap();
        assert!(m.per_token.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn completeness_improves_with_steps() {
        let (ts, p) = fixture();
        let p64: ModelParams<f64> = p.cast();
        let task = &ts.tasks[1];
        let seq = context_then_query(task, 20, 3).unwrap();
        let coarse = integrated_gradients(&p64, &seq, 20, 0, 20).unwrap();
        let fine = integrated_gradients(&p64, &seq, 20, 0, 128).unwrap();
        assert!(fine.completeness_residual() <= coarse.completeness_residual() + 1e-9);
        assert!(fine.completeness_residual() < 0.02, "{}", fine.completeness_residual());
    }

    #[test]
    fn identity_interventions_are_noops() {
        let (ts, p) = fixture();
        let task = &ts.tasks[0];
        let r = necessity_ablation(&p, task, 20, 2, 2, vec![]).unwrap();
        assert!(r.flagged && r.delta_ce == 0.0);
        let r = sufficiency_restriction(&p, task, 20, 2, 2, (0..20).collect()).unwrap();
        assert_eq!(r.delta_ce, 0.0);
        let r = sufficiency_restriction(&p, task, 20, 2, 1, vec![0, 3]).unwrap();
        assert!(r.delta_ce.is_finite());
    }

    #[test]
    fn profile_mass_bounded() {
        let (ts, p) = fixture();
        let prof = attention_distance_profile(&p, &ts.tasks[0], 1).unwrap();
        assert_eq!(prof[0].distance, 0);
        let total: f64 = prof.iter().map(|b| b.mean_mass).sum();
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn optimal_set_ce_values() {
        assert!((optimal_set_ce(&[0.0; 4], 0b0001) - 4f64.ln()).abs() < 1e-12);
        assert!((optimal_set_ce(&[0.0; 4], 0b0011) - 2f64.ln()).abs() < 1e-12);
    }
}
