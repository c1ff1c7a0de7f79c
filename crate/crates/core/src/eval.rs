//! Closed-loop evaluation of transformer and baseline policies on held-out
//! tasks: return curves, stratified summaries and the shortcut test.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{dqn_train, q_policy, tabular_q_train, DqnConfig, QFunction, QTrainConfig, TEMPERATURE_GRID};
use crate::envcore::graph::grid as gact;
use crate::envcore::{grid_node, EncodingIndex, Oracle, Step, Suite, Task, ENCODING_DIM};
use crate::error::{Error, Result};
use crate::model::{query_forward, select_action, ContextCache, Decoding, ModelParams};
use crate::rng::{substream, Rng};
use crate::stats::{bootstrap_ci, Interval, BOOTSTRAP_RESAMPLES};

/// A policy sees only the encoding of its current state.
pub trait Policy {
    fn act(&mut self, s: &[f32], rng: &mut Rng) -> usize;
}

/// The transformer, conditioned on a fixed context prefix.
pub struct TransformerPolicy<'a> {
    params: &'a ModelParams<f32>,
    cache: &'a ContextCache,
    context_len: usize,
    decoding: Decoding,
    memo: HashMap<[u32; ENCODING_DIM], Vec<f32>>,
}

impl<'a> TransformerPolicy<'a> {
    pub fn new(params: &'a ModelParams<f32>, cache: &'a ContextCache, context_len: usize, decoding: Decoding) -> Self {
        TransformerPolicy {
            params,
            cache,
            context_len,
            decoding,
            memo: HashMap::new(),
        }
    }

    pub fn logits(&mut self, s: &[f32]) -> Result<Vec<f32>> {
        let key = crate::envcore::encoder::encoding_key(s);
        if let Some(l) = self.memo.get(&key) {
            return Ok(l.clone());
        }
        let mut tok = vec![0.0f32; self.params.config.token_width];
        tok[..ENCODING_DIM].copy_from_slice(&s[..ENCODING_DIM]);
        let out = query_forward(self.params, self.cache, self.context_len, &tok, false)?;
        self.memo.insert(key, out.logits.clone());
        Ok(out.logits)
    }
}

impl Policy for TransformerPolicy<'_> {
    fn act(&mut self, s: &[f32], rng: &mut Rng) -> usize {
        let logits = self.logits(s).expect("query forward on a validated cache");
        select_action(&logits, self.decoding, rng)
    }
}

/// Softmax over learned action values.
pub struct QPolicy<'a> {
    pub q: &'a dyn QFunction,
    pub temperature: f64,
}

impl Policy for QPolicy<'_> {
    fn act(&mut self, s: &[f32], rng: &mut Rng) -> usize {
        let p = q_policy(&self.q.q_values(s), self.temperature);
        crate::model::sample::sample_categorical(&p, rng)
    }
}

/// Lowest-index shortest-path action (needs the latent graph).
pub struct OraclePolicy {
    pub oracle: Oracle,
    pub index: EncodingIndex,
}

impl OraclePolicy {
    pub fn for_task(task: &Task) -> Self {
        OraclePolicy {
            oracle: task.oracle(),
            index: task.encoder.decoder(),
        }
    }
}

impl Policy for OraclePolicy {
    fn act(&mut self, s: &[f32], _rng: &mut Rng) -> usize {
        let node = self.index.lookup(s).expect("state of this task");
        self.oracle.first_action(node)
    }
}

/// Uniform over a fixed action subset.
pub struct RandomPolicy {
    pub actions: Vec<usize>,
}

impl Policy for RandomPolicy {
    fn act(&mut self, _s: &[f32], rng: &mut Rng) -> usize {
        *self.actions.choose(rng).expect("nonempty action set")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryType {
    #[serde(rename = "pre")]
    Pre,
    #[serde(rename = "post")]
    Post,
    #[serde(rename = "pre_and_post")]
    PreAndPost,
    #[serde(rename = "novel")]
    Novel,
}

impl QueryType {
    pub fn label(self) -> &'static str {
        match self {
            QueryType::Pre => "pre",
            QueryType::Post => "post",
            QueryType::PreAndPost => "pre_and_post",
            QueryType::Novel => "novel",
        }
    }

    /// Three-way grouping: states seen both before and after reward count as pre.
    pub fn coarse(self) -> QueryType {
        match self {
            QueryType::PreAndPost => QueryType::Pre,
            t => t,
        }
    }
}

/// Tags `node` by when it occurs in `steps` relative to reward. A state at
/// step `t` sits at time `2t` and the next state at `2t + 1`; a reward is
/// experienced at `2t + 1`. "Pre" means every occurrence is at or before the
/// first reward, "post" that every occurrence is after the last one.
pub fn query_type(steps: &[Step], node: usize) -> QueryType {
    let rewards: Vec<usize> = steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.r)
        .map(|(t, _)| 2 * t + 1)
        .collect();
    let times: Vec<usize> = steps
        .iter()
        .enumerate()
        .flat_map(|(t, s)| {
            let mut v = Vec::new();
            if s.state() == node {
                v.push(2 * t);
            }
            if s.next_state() == node {
                v.push(2 * t + 1);
            }
            v
        })
        .collect();
    if times.is_empty() {
        return QueryType::Novel;
    }
    let (Some(&first), Some(&last)) = (rewards.first(), rewards.last()) else {
        return QueryType::Pre;
    };
    if times.iter().all(|&t| t <= first) {
        QueryType::Pre
    } else if times.iter().all(|&t| t > last) {
        QueryType::Post
    } else {
        QueryType::PreAndPost
    }
}

pub fn seen_in_context(steps: &[Step], node: usize) -> bool {
    steps.iter().any(|s| s.involves(node))
}

pub fn rewards_in_context(steps: &[Step]) -> usize {
    steps.iter().filter(|s| s.r).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub env: usize,
    pub query: usize,
    pub context_len: usize,
    pub path: Vec<usize>,
    pub raw_return: usize,
    pub oracle_return: usize,
    /// `None` when the oracle itself cannot collect reward within the horizon.
    pub normalized: Option<f64>,
    pub query_type: QueryType,
}

/// Runs `policy` for `horizon` steps from `query`; reward 1 for every step
/// that ends on the goal.
pub fn rollout(
    policy: &mut dyn Policy,
    task: &Task,
    context_len: usize,
    query: usize,
    horizon: usize,
    rng: &mut Rng,
) -> Result<RolloutResult> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if context_len > task.steps.len() || query >= task.graph.node_count {
        return Err(Error::invalid("context length or query out of range"));
    }
    let mut node = query;
    let mut path = vec![node];
    let mut raw = 0;
    for _ in 0..horizon {
        let a = policy.act(task.encoder.encode(node), rng);
        if a >= task.graph.action_count {
            return Err(Error::invalid(format!("policy emitted action {a}")));
        }
        node = task.graph.step(node, a);
        path.push(node);
        raw += (node == task.goal) as usize;
    }
    let oracle_return = task.oracle().oracle_return(query, horizon);
    Ok(RolloutResult {
        env: task.id,
        query,
        context_len,
        path,
        raw_return: raw,
        oracle_return,
        normalized: (oracle_return > 0).then(|| raw as f64 / oracle_return as f64),
        query_type: query_type(&task.steps[..context_len], query),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryFilter {
    pub seen_in_context: bool,
    pub min_distance: u32,
}

impl QueryFilter {
    pub fn for_suite(suite: Suite) -> Self {
        match suite {
            Suite::Gridworld => QueryFilter {
                seen_in_context: true,
                min_distance: 6,
            },
            Suite::Tree => QueryFilter {
                seen_in_context: true,
                min_distance: 0,
            },
        }
    }

    pub fn eligible(&self, task: &Task, context_len: usize, horizon: usize) -> Vec<usize> {
        let oracle = task.oracle();
        let ctx = &task.steps[..context_len];
        (0..task.graph.node_count)
            .filter(|&n| !self.seen_in_context || seen_in_context(ctx, n))
            .filter(|&n| oracle.distance_to_goal[n] >= self.min_distance)
            .filter(|&n| oracle.oracle_return(n, horizon) > 0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub horizon: usize,
    pub queries_per_context: usize,
    pub filter: QueryFilter,
    pub decoding_greedy: bool,
    pub temperature: f64,
}

impl EvalSettings {
    pub fn for_suite(suite: Suite) -> Self {
        match suite {
            Suite::Gridworld => EvalSettings {
                horizon: 15,
                queries_per_context: 20,
                filter: QueryFilter::for_suite(suite),
                decoding_greedy: true,
                temperature: 1.0,
            },
            Suite::Tree => EvalSettings {
                horizon: 100,
                queries_per_context: 20,
                filter: QueryFilter::for_suite(suite),
                decoding_greedy: false,
                temperature: 1.0,
            },
        }
    }

    pub fn decoding(&self) -> Decoding {
        if self.decoding_greedy {
            Decoding::Greedy
        } else {
            Decoding::Softmax {
                temperature: self.temperature,
            }
        }
    }
}

/// Queries for one (env, context length) point. Sampled without
/// replacement when enough states are eligible, otherwise with replacement.
pub fn sample_queries(eligible: &[usize], n: usize, rng: &mut Rng) -> (Vec<usize>, bool) {
    if eligible.is_empty() {
        return (Vec::new(), false);
    }
    if eligible.len() >= n {
        (eligible.choose_multiple(rng, n).copied().collect(), false)
    } else {
        ((0..n).map(|_| *eligible.choose(rng).unwrap()).collect(), true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub config_hash: String,
    pub seed: u64,
    pub agent: String,
    pub env: usize,
    pub context_len: usize,
    pub rewards_in_context: usize,
    pub temperature: f64,
    pub n_queries: usize,
    pub with_replacement: bool,
    pub mean_return: f64,
}

/// Which agent to evaluate at each curve point.
pub enum Agent<'a> {
    Transformer(&'a ModelParams<f32>),
    Tabular(QTrainConfig),
    Dqn(DqnConfig),
    Oracle,
    Random,
}

impl Agent<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Agent::Transformer(_) => "transformer",
            Agent::Tabular(_) => "tabular",
            Agent::Dqn(_) => "dqn",
            Agent::Oracle => "oracle",
            Agent::Random => "random",
        }
    }
}

/// Mean normalized return of `policy` over `queries`.
fn mean_return(
    policy: &mut dyn Policy,
    task: &Task,
    c: usize,
    queries: &[usize],
    horizon: usize,
    rng: &mut Rng,
) -> Result<(f64, Vec<RolloutResult>)> {
    let mut results = Vec::with_capacity(queries.len());
    let (mut sum, mut n) = (0.0, 0);
    for &q in queries {
        let r = rollout(policy, task, c, q, horizon, rng)?;
        if let Some(v) = r.normalized {
            sum += v;
            n += 1;
        }
        results.push(r);
    }
    Ok((sum / n.max(1) as f64, results))
}

/// Flattened tokens of the first `c` context steps.
pub fn context_tokens(task: &Task, c: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * width];
    for t in 0..c {
        task.write_token(t, &mut out[t * width..(t + 1) * width]);
    }
    out
}

pub fn context_buffer(task: &Task, c: usize) -> Vec<crate::envcore::TransitionTuple> {
    (0..c).map(|t| task.tuple(t)).collect()
}

/// Evaluates `agent` at every `(queries, context length)` point of one task.
/// `points` lists the context lengths and their sampled queries. Q agents pick the
/// temperature from the grid with the best mean return over all points.
pub fn evaluate_points(
    agent: &Agent<'_>,
    task: &Task,
    points: &[(usize, Vec<usize>)],
    settings: &EvalSettings,
    seed: u64,
) -> Result<Vec<(f64, f64, Vec<RolloutResult>)>> {
    let horizon = settings.horizon;
    let mut rng = substream(seed, &format!("eval-{}", agent.name()), task.id as u64);
    match agent {
        Agent::Transformer(params) => {
            let max_c = points.iter().map(|p| p.0).max().unwrap_or(0);
            let width = params.config.token_width;
            let cache = ContextCache::build(params, &context_tokens(task, max_c, width))?;
            points
                .iter()
                .map(|(c, qs)| {
                    let mut pol = TransformerPolicy::new(params, &cache, *c, settings.decoding());
                    let (m, r) = mean_return(&mut pol, task, *c, qs, horizon, &mut rng)?;
                    Ok((m, settings.temperature, r))
                })
                .collect()
        }
        Agent::Oracle => points
            .iter()
            .map(|(c, qs)| {
                let (m, r) = mean_return(&mut OraclePolicy::for_task(task), task, *c, qs, horizon, &mut rng)?;
                Ok((m, 0.0, r))
            })
            .collect(),
        Agent::Random => points
            .iter()
            .map(|(c, qs)| {
                let mut pol = RandomPolicy {
                    actions: (0..task.graph.action_count).collect(),
                };
                let (m, r) = mean_return(&mut pol, task, *c, qs, horizon, &mut rng)?;
                Ok((m, 0.0, r))
            })
            .collect(),
        Agent::Tabular(_) | Agent::Dqn(_) => {
            // one value function per context length, then a temperature sweep
            let mut qs_by_point: Vec<Option<Box<dyn QFunction>>> = Vec::new();
            for (i, (c, _)) in points.iter().enumerate() {
                if *c == 0 {
                    qs_by_point.push(None);
                    continue;
                }
                let buf = context_buffer(task, *c);
                let mut qrng = substream(seed, &format!("fit-{}", agent.name()), (task.id * 100_003 + i) as u64);
                let q: Box<dyn QFunction> = match agent {
                    Agent::Tabular(cfg) => Box::new(tabular_q_train(&buf, cfg, &mut qrng)?),
                    Agent::Dqn(cfg) => Box::new(dqn_train(&buf, cfg, &mut qrng)?),
                    _ => unreachable!(),
                };
                qs_by_point.push(Some(q));
            }
            let zero = ZeroQ(task.graph.action_count);
            let mut best: Option<(f64, f64, Vec<(f64, f64, Vec<RolloutResult>)>)> = None;
            for &temp in &TEMPERATURE_GRID {
                let mut trng = substream(seed, &format!("eval-{}-t{temp}", agent.name()), task.id as u64);
                let mut rows = Vec::with_capacity(points.len());
                let mut total = 0.0;
                for ((c, qs), q) in points.iter().zip(&qs_by_point) {
                    let qf: &dyn QFunction = q.as_deref().unwrap_or(&zero);
                    let mut pol = QPolicy { q: qf, temperature: temp };
                    let (m, r) = mean_return(&mut pol, task, *c, qs, horizon, &mut trng)?;
                    total += m;
                    rows.push((m, temp, r));
                }
                if best.as_ref().is_none_or(|b| total > b.0) {
                    best = Some((total, temp, rows));
                }
            }
            Ok(best.map(|b| b.2).unwrap_or_default())
        }
    }
}

struct ZeroQ(usize);

impl QFunction for ZeroQ {
    fn q_values(&self, _s: &[f32]) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

/// The query sample used by every agent at each context length of a task.
pub fn curve_points(task: &Task, grid: &[usize], settings: &EvalSettings, seed: u64) -> Vec<(usize, Vec<usize>, bool)> {
    let mut rng = substream(seed, "eval-queries", task.id as u64);
    grid.iter()
        .filter(|&&c| c <= task.steps.len())
        .map(|&c| {
            let elig = settings.filter.eligible(task, c, settings.horizon);
            let (q, repl) = sample_queries(&elig, settings.queries_per_context, &mut rng);
            (c, q, repl)
        })
        .collect()
}

/// Return curve over `grid` for each task. Points with no eligible query
/// are recorded as zero.
pub fn return_vs_context(
    agent: &Agent<'_>,
    tasks: &[&Task],
    grid: &[usize],
    settings: &EvalSettings,
    seed: u64,
    config_hash: &str,
) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for task in tasks {
        let pts = curve_points(task, grid, settings, seed);
        let eval_pts: Vec<(usize, Vec<usize>)> = pts.iter().filter(|p| !p.1.is_empty()).map(|p| (p.0, p.1.clone())).collect();
        let results = evaluate_points(agent, task, &eval_pts, settings, seed)?;
        let mut it = results.into_iter();
        for (c, qs, repl) in pts {
            let (mean, temp) = if qs.is_empty() {
                (0.0, f64::NAN)
            } else {
                let (m, t, _) = it.next().expect("one result per evaluated point");
                (m, t)
            };
            rows.push(CurveRow {
                config_hash: config_hash.to_string(),
                seed,
                agent: agent.name().to_string(),
                env: task.id,
                context_len: c,
                rewards_in_context: rewards_in_context(&task.steps[..c]),
                temperature: temp,
                n_queries: qs.len(),
                with_replacement: repl,
                mean_return: mean,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub config_hash: String,
    pub seed: u64,
    pub agent: String,
    pub group: String,
    pub n_envs: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl GroupSummary {
    pub fn interval(&self) -> Interval {
        Interval {
            mean: self.mean,
            lo: self.ci_lo,
            hi: self.ci_hi,
        }
    }
}

/// Groups `(env, key, value)` observations: values are first averaged within
/// each env, then summarized across envs with a bootstrap 95% interval.
/// Empty groups cannot arise; keys absent from the data are simply omitted.
pub fn stratify(
    observations: &[(usize, String, f64)],
    rng: &mut Rng,
) -> Result<Vec<(String, usize, Interval)>> {
    if observations.is_empty() {
        return Err(Error::EmptySelection("nothing to stratify".into()));
    }
    let mut by_group: std::collections::BTreeMap<&str, std::collections::BTreeMap<usize, (f64, usize)>> =
        Default::default();
    for (env, key, v) in observations {
        let e = by_group.entry(key.as_str()).or_default().entry(*env).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let mut out = Vec::new();
    for (key, envs) in by_group {
        let vals: Vec<f64> = envs.values().map(|(s, n)| s / *n as f64).collect();
        let ci = bootstrap_ci(&vals, BOOTSTRAP_RESAMPLES, 0.05, rng)?;
        out.push((key.to_string(), vals.len(), ci));
    }
    Ok(out)
}

/// Stratifies curve rows by the number of rewards seen in context, capping
/// the key at `max_rewards` ("3+" style bucket).
pub fn stratify_by_rewards(rows: &[CurveRow], max_rewards: usize, seed: u64) -> Result<Vec<GroupSummary>> {
    let mut out = Vec::new();
    let mut agents: Vec<&str> = rows.iter().map(|r| r.agent.as_str()).collect();
    agents.sort();
    agents.dedup();
    for agent in agents {
        let obs: Vec<(usize, String, f64)> = rows
            .iter()
            .filter(|r| r.agent == agent && r.n_queries > 0)
            .map(|r| (r.env, format!("{:02}", r.rewards_in_context.min(max_rewards)), r.mean_return))
            .collect();
        if obs.is_empty() {
            continue;
        }
        let mut rng = substream(seed, "stratify-rewards", 0);
        for (g, n, ci) in stratify(&obs, &mut rng)? {
            out.push(GroupSummary {
                config_hash: rows[0].config_hash.clone(),
                seed,
                agent: agent.to_string(),
                group: g,
                n_envs: n,
                mean: ci.mean,
                ci_lo: ci.lo,
                ci_hi: ci.hi,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTypeRow {
    pub config_hash: String,
    pub seed: u64,
    pub agent: String,
    pub env: usize,
    pub context_len: usize,
    pub query: usize,
    pub query_type: QueryType,
    pub normalized_return: f64,
}

/// Rollouts from every reachable state at one context length, tagged by
/// query type (no seen-in-context filter).
pub fn query_type_returns(
    agent: &Agent<'_>,
    tasks: &[&Task],
    context_len: usize,
    settings: &EvalSettings,
    seed: u64,
    config_hash: &str,
) -> Result<Vec<QueryTypeRow>> {
    let mut rows = Vec::new();
    for task in tasks {
        let c = context_len.min(task.steps.len());
        let oracle = task.oracle();
        let queries: Vec<usize> = (0..task.graph.node_count)
            .filter(|&n| oracle.oracle_return(n, settings.horizon) > 0 && n != task.goal)
            .collect();
        let res = evaluate_points(agent, task, &[(c, queries)], settings, seed)?;
        for r in res.into_iter().flat_map(|p| p.2) {
            rows.push(QueryTypeRow {
                config_hash: config_hash.to_string(),
                seed,
                agent: agent.name().to_string(),
                env: task.id,
                context_len: c,
                query: r.query,
                query_type: r.query_type,
                normalized_return: r.normalized.unwrap_or(0.0),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutSpec {
    pub name: String,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    /// Experienced path, start to goal inclusive, as grid coordinates.
    pub path: Vec<(usize, usize)>,
}

impl ShortcutSpec {
    /// Up the left wall and across the top, then down to the goal.
    pub fn left() -> Self {
        ShortcutSpec {
            name: "left".into(),
            start: (0, 0),
            goal: (2, 2),
            path: vec![(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (1, 4), (2, 4), (2, 3), (2, 2)],
        }
    }

    /// Along the bottom wall to the corner, then up and in to the goal.
    pub fn right() -> Self {
        ShortcutSpec {
            name: "right".into(),
            start: (4, 0),
            goal: (2, 2),
            path: vec![(4, 0), (3, 0), (2, 0), (1, 0), (0, 0), (0, 1), (0, 2), (1, 2), (2, 2)],
        }
    }

    /// Transition steps of the experienced path, validated against the grid.
    pub fn steps(&self, graph: &crate::envcore::LatentGraph) -> Result<Vec<Step>> {
        let goal = grid_node(self.goal.0, self.goal.1);
        let mut steps = Vec::new();
        for w in self.path.windows(2) {
            let (s, sn) = (grid_node(w[0].0, w[0].1), grid_node(w[1].0, w[1].1));
            let a = (0..gact::STAY)
                .find(|&a| graph.step(s, a) == sn)
                .ok_or_else(|| Error::invalid("shortcut path is not a chain of moves"))?;
            steps.push(Step {
                s: s as u16,
                a: a as u8,
                s_next: sn as u16,
                r: sn == goal,
            });
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutRow {
    pub config_hash: String,
    pub seed: u64,
    pub agent: String,
    pub test: String,
    pub env: usize,
    pub success: bool,
    pub path_len: usize,
    pub oracle_len: usize,
}

/// Builds the `n_envs` shortcut tasks: same layout, fresh encoders.
pub fn shortcut_tasks(spec: &ShortcutSpec, n_envs: usize, sigma: f64, seed: u64) -> Result<Vec<Task>> {
    let graph = Arc::new(crate::envcore::build_gridworld_graph());
    let steps = spec.steps(&graph)?;
    (0..n_envs)
        .map(|i| {
            let mut rng = substream(seed, &format!("shortcut-{}", spec.name), i as u64);
            let encoder = crate::envcore::make_state_encoder(&mut rng, &graph, sigma)?;
            Ok(Task {
                id: i,
                graph: graph.clone(),
                encoder,
                goal: grid_node(spec.goal.0, spec.goal.1),
                start: grid_node(spec.start.0, spec.start.1),
                steps: steps.clone(),
                split: crate::envcore::Split::Test,
            })
        })
        .collect()
}

/// Success when the policy reaches the goal in exactly the shortest-path
/// number of steps from the start.
pub fn shortcut_success(policy: &mut dyn Policy, task: &Task, rng: &mut Rng) -> Result<(bool, usize)> {
    let d = task.graph.distance(task.start, task.goal) as usize;
    let r = rollout(policy, task, task.steps.len(), task.start, d.max(1), rng)?;
    let reached = r.path.iter().position(|&n| n == task.goal).unwrap_or(usize::MAX);
    Ok((reached == d, if reached == usize::MAX { 0 } else { reached }))
}

pub fn shortcut_test(
    agent: &Agent<'_>,
    spec: &ShortcutSpec,
    n_envs: usize,
    sigma: f64,
    seed: u64,
    config_hash: &str,
) -> Result<Vec<ShortcutRow>> {
    let tasks = shortcut_tasks(spec, n_envs, sigma, seed)?;
    let mut rows = Vec::new();
    for task in &tasks {
        let mut rng = substream(seed, &format!("shortcut-roll-{}", agent.name()), task.id as u64);
        let c = task.steps.len();
        let (ok, len) = match agent {
            Agent::Transformer(params) => {
                let width = params.config.token_width;
                let cache = ContextCache::build(params, &context_tokens(task, c, width))?;
                let mut pol = TransformerPolicy::new(params, &cache, c, Decoding::Greedy);
                shortcut_success(&mut pol, task, &mut rng)?
            }
            Agent::Oracle => shortcut_success(&mut OraclePolicy::for_task(task), task, &mut rng)?,
            Agent::Random => {
                let mut pol = RandomPolicy {
                    actions: (0..gact::STAY).collect(),
                };
                shortcut_success(&mut pol, task, &mut rng)?
            }
            Agent::Tabular(cfg) => {
                let q = tabular_q_train(&context_buffer(task, c), cfg, &mut rng)?;
                shortcut_success(&mut QPolicy { q: &q, temperature: 0.005 }, task, &mut rng)?
            }
            Agent::Dqn(cfg) => {
                let q = dqn_train(&context_buffer(task, c), cfg, &mut rng)?;
                shortcut_success(&mut QPolicy { q: &q, temperature: 0.005 }, task, &mut rng)?
            }
        };
        rows.push(ShortcutRow {
            config_hash: config_hash.to_string(),
            seed,
            agent: agent.name().to_string(),
            test: spec.name.clone(),
            env: task.id,
            success: ok,
            path_len: len,
            oracle_len: task.graph.distance(task.start, task.goal) as usize,
        });
    }
    Ok(rows)
}

/// Success rate with a bootstrap interval.
pub fn success_rate(rows: &[ShortcutRow], seed: u64) -> Result<Interval> {
    let v: Vec<f64> = rows.iter().map(|r| r.success as u8 as f64).collect();
    bootstrap_ci(&v, BOOTSTRAP_RESAMPLES, 0.05, &mut substream(seed, "shortcut-ci", 0))
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<R: Serialize>(path: &std::path::Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    crate::store::write_atomic(path, &bytes)
}

pub fn read_csv<R: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    r.deserialize().map(|x| x.map_err(|e| Error::Format(e.to_string()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::{build_taskset, EnvConfig, Split};

    fn grid_tasks() -> crate::envcore::TaskSet {
        build_taskset(60, 11, &EnvConfig::gridworld()).unwrap()
    }

    fn step(s: usize, sn: usize, r: bool) -> Step {
        Step {
            s: s as u16,
            a: 0,
            s_next: sn as u16,
            r,
        }
    }

    #[test]
    fn oracle_normalized_return_is_one() {
        let ts = grid_tasks();
        let task = &ts.tasks[0];
        let mut rng = substream(0, "r", 0);
        for q in 0..25 {
            let r = rollout(&mut OraclePolicy::for_task(task), task, 10, q, 15, &mut rng).unwrap();
            assert_eq!(r.normalized, Some(1.0));
        }
        let at_goal = rollout(&mut OraclePolicy::for_task(task), task, 0, task.goal, 7, &mut rng).unwrap();
        assert_eq!(at_goal.raw_return, 7);
    }

    #[test]
    fn random_policy_far_queries_score_low() {
        let ts = grid_tasks();
        let mut medians = Vec::new();
        for task in ts.tasks.iter().take(50) {
            let oracle = task.oracle();
            let far: Vec<usize> = (0..25).filter(|&n| oracle.distance_to_goal[n] >= 6).collect();
            if far.is_empty() {
                continue;
            }
            let mut rng = substream(1, "r", task.id as u64);
            let mut pol = RandomPolicy {
                actions: (0..5).collect(),
            };
            let (m, _) = mean_return(&mut pol, task, 0, &far, 15, &mut rng).unwrap();
            medians.push(m);
        }
        medians.sort_by(f64::total_cmp);
        assert!(medians[medians.len() / 2] < 0.1);
    }

    #[test]
    fn query_type_fixtures() {
        // states 1..=9, goal 9; rewards at steps 2 and 5
        let ctx = vec![
            step(1, 2, false),
            step(2, 3, false),
            step(3, 9, true),
            step(9, 4, false),
            step(4, 3, false),
            step(3, 9, true),
            step(9, 5, false),
            step(5, 6, false),
        ];
        let cases = [
            (1, QueryType::Pre),
            (2, QueryType::Pre),
            (3, QueryType::PreAndPost),
            (4, QueryType::PreAndPost),
            (5, QueryType::Post),
            (6, QueryType::Post),
            (7, QueryType::Novel),
            (9, QueryType::PreAndPost),
        ];
        for (n, want) in cases {
            assert_eq!(query_type(&ctx, n), want, "node {n}");
        }
        // no reward at all: every seen state is pre
        assert_eq!(query_type(&ctx[..2], 3), QueryType::Pre);
        assert_eq!(query_type(&ctx[..2], 5), QueryType::Novel);
        assert_eq!(QueryType::PreAndPost.coarse(), QueryType::Pre);
    }

    #[test]
    fn curve_has_one_row_per_env_and_context() {
        let ts = grid_tasks();
        let tasks: Vec<&Task> = ts.split(Split::Test).take(3).collect();
        let s = EvalSettings::for_suite(Suite::Gridworld);
        let rows = return_vs_context(&Agent::Oracle, &tasks, &[0, 50, 100], &s, 0, "h").unwrap();
        assert_eq!(rows.len(), 9);
        for r in &rows {
            if r.context_len == 0 {
                assert_eq!((r.n_queries, r.mean_return), (0, 0.0));
            } else if r.n_queries > 0 {
                assert_eq!(r.mean_return, 1.0);
            }
        }
    }

    #[test]
    fn shortcut_oracle_and_chance() {
        let spec = ShortcutSpec::left();
        let rows = shortcut_test(&Agent::Oracle, &spec, 20, 0.8, 0, "h").unwrap();
        assert!(rows.iter().all(|r| r.success));
        let rows = shortcut_test(&Agent::Random, &spec, 4000, 0.8, 0, "h").unwrap();
        let rate = rows.iter().filter(|r| r.success).count() as f64 / 4000.0;
        assert!((rate - 6.0 / 256.0).abs() < 0.008, "{rate}");
        assert!(ShortcutSpec::right().steps(&crate::envcore::build_gridworld_graph()).is_ok());
    }

    #[test]
    fn stratify_identical_values() {
        let obs: Vec<(usize, String, f64)> = (0..10).map(|e| (e, "a".to_string(), 0.5)).collect();
        let g = stratify(&obs, &mut substream(0, "s", 0)).unwrap();
        assert_eq!(g[0].2.lo, g[0].2.hi);
    }
}
