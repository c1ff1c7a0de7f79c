//! Stage commands. Every stage reads its inputs from the output directory,
//! stamps the hash of the configuration sections it depends on, and writes
//! its tables under `reports/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use icrl_core::attrib::{
    attention_distance_profile, attribution_rows, integrated_gradients, necessity_along_path, path_tokens,
    sufficiency_restriction, tokens_with_node, InterventionRow, PathDirection,
};
use icrl_core::envcore::graph::tree as tact;
use icrl_core::envcore::persist::{load_taskset, save_taskset, MANIFEST};
use icrl_core::envcore::{build_taskset, Split, Suite, Task, TaskSet};
use icrl_core::eval::{
    context_tokens, query_type_returns, read_csv, return_vs_context, rollout, shortcut_test, stratify_by_rewards,
    write_csv, Agent, CurveRow, QueryTypeRow, ShortcutSpec, TransformerPolicy,
};
use icrl_core::model::{context_then_query, load_params, ContextCache, Decoding, ModelParams};
use icrl_core::probe::{
    alignment_curve, angle_to_goal, balanced_accuracy, capture_context_reps, capture_query_reps,
    cross_context_correlation, fit_circular, fit_logistic, fit_ridge, heap_depth, inverse_action, on_lr_path,
    split_envs, value_targets, CkaSpec, EnvReps, ProbeDataset, ProbeReportRow,
};
use icrl_core::rng::{subseed, substream};
use icrl_core::stats::{bootstrap_ci, BOOTSTRAP_RESAMPLES};
use icrl_core::store::{read_json, write_json};
use icrl_core::train::{run_dir, select_model, train_all, RunRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Stage};

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub stage_hash: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub config_hash: String,
    pub seed: u64,
    pub dropout: f64,
    /// Relative to the output directory.
    pub checkpoint: PathBuf,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>, force: bool) -> Self {
        let out = out.unwrap_or_else(|| cfg.out.clone());
        Ctx { cfg, out, force }
    }

    pub fn reports(&self) -> PathBuf {
        self.out.join("reports")
    }

    fn report(&self, name: &str) -> PathBuf {
        self.reports().join(name)
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.out.join("stamps").join(format!("{}.json", stage.name()))
    }

    /// Refuses to mix artifacts from different configurations.
    fn check_stamp(&self, stage: Stage) -> anyhow::Result<()> {
        let p = self.stamp_path(stage);
        if let Ok(prev) = read_json::<Stamp>(&p) {
            let now = self.cfg.stage_hash(stage);
            if prev.stage_hash != now && !self.force {
                bail!(
                    "{} holds {} artifacts from a different configuration ({} vs {}); pass --force to overwrite",
                    self.out.display(),
                    stage.name(),
                    prev.stage_hash,
                    now
                );
            }
        }
        Ok(())
    }

    fn write_stamp(&self, stage: Stage) -> anyhow::Result<()> {
        write_json(
            &self.stamp_path(stage),
            &Stamp {
                stage: stage.name().into(),
                stage_hash: self.cfg.stage_hash(stage),
                config_hash: self.cfg.hash(),
                seed: self.cfg.seed,
            },
        )?;
        Ok(())
    }

    fn hash(&self) -> String {
        self.cfg.hash()
    }

    pub fn taskset(&self) -> anyhow::Result<TaskSet> {
        let dir = self.out.join("taskset");
        if !dir.join(MANIFEST).exists() {
            bail!("no task set at {}; run `icrl generate` with this config first", dir.display());
        }
        self.check_stamp(Stage::Generate)?;
        Ok(load_taskset(&dir)?)
    }

    pub fn model(&self) -> anyhow::Result<(ModelParams<f32>, SelectedModel)> {
        let p = self.out.join("model.json");
        if !p.exists() {
            bail!("no trained model at {}; run `icrl train` with this config first", p.display());
        }
        let sel: SelectedModel = read_json(&p)?;
        let params = load_params(&self.out.join(&sel.checkpoint))
            .with_context(|| format!("loading checkpoint {}", sel.checkpoint.display()))?;
        Ok((params, sel))
    }

    fn test_tasks<'a>(&self, ts: &'a TaskSet, n: usize) -> Vec<&'a Task> {
        ts.split(Split::Test).take(n).collect()
    }
}

pub fn cmd_generate(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.out.join("taskset");
    if dir.join(MANIFEST).exists() && !ctx.force {
        bail!("{} already exists; pass --force to regenerate", dir.display());
    }
    let ts = build_taskset(ctx.cfg.tasks, ctx.cfg.seed, &ctx.cfg.env)?;
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    save_taskset(&ts, &dir)?;
    ctx.write_stamp(Stage::Generate)?;
    log::info!("wrote {} tasks to {}", ts.tasks.len(), dir.display());
    Ok(())
}

pub fn cmd_train(ctx: &Ctx) -> anyhow::Result<()> {
    ctx.check_stamp(Stage::Train)?;
    let ts = ctx.taskset()?;
    let runs_dir = ctx.out.join("runs");
    let runs: Vec<RunRecord> = train_all(&ts, &ctx.cfg.train, &runs_dir)?;
    let best = select_model(&runs)?;
    let rel = run_dir(Path::new("runs"), best.seed, best.dropout).join("best");
    write_json(
        &ctx.out.join("model.json"),
        &SelectedModel {
            config_hash: best.config_hash.clone(),
            seed: best.seed,
            dropout: best.dropout,
            checkpoint: rel,
        },
    )?;
    ctx.write_stamp(Stage::Train)?;
    Ok(())
}

fn curves(
    agent: &Agent<'_>,
    tasks: &[&Task],
    ctx: &Ctx,
) -> anyhow::Result<Vec<CurveRow>> {
    let e = &ctx.cfg.eval;
    let parts: Vec<Vec<CurveRow>> = tasks
        .par_iter()
        .map(|t| return_vs_context(agent, &[*t], &e.context_grid, &e.settings, ctx.cfg.seed, &ctx.hash()))
        .collect::<Result<_, _>>()?;
    Ok(parts.concat())
}

fn query_types(agent: &Agent<'_>, tasks: &[&Task], ctx: &Ctx) -> anyhow::Result<Vec<QueryTypeRow>> {
    let e = &ctx.cfg.eval;
    let parts: Vec<Vec<QueryTypeRow>> = tasks
        .par_iter()
        .map(|t| query_type_returns(agent, &[*t], e.query_type_context, &e.settings, ctx.cfg.seed, &ctx.hash()))
        .collect::<Result<_, _>>()?;
    Ok(parts.concat())
}

/// Tabular (and optionally DQN) curves and query-type rows on the test envs.
pub fn cmd_baseline(ctx: &Ctx) -> anyhow::Result<()> {
    ctx.check_stamp(Stage::Baseline)?;
    let ts = ctx.taskset()?;
    let tasks = ctx.test_tasks(&ts, ctx.cfg.eval.n_envs);
    let b = &ctx.cfg.baseline;
    let mut rows = curves(&Agent::Tabular(b.tabular.clone()), &tasks, ctx)?;
    if b.run_dqn {
        rows.extend(curves(&Agent::Dqn(b.dqn.clone()), &tasks, ctx)?);
    }
    write_csv(&ctx.report("baselines.csv"), &rows)?;
    let qt = query_types(&Agent::Tabular(b.tabular.clone()), &tasks, ctx)?;
    write_csv(&ctx.report("query_types_baseline.csv"), &qt)?;
    ctx.write_stamp(Stage::Baseline)?;
    Ok(())
}

/// Transformer return curves, reward-stratified summaries, query-type
/// returns and (gridworld) shortcut tests.
pub fn cmd_eval(ctx: &Ctx) -> anyhow::Result<()> {
    ctx.check_stamp(Stage::Eval)?;
    let ts = ctx.taskset()?;
    let (params, _) = ctx.model()?;
    let tasks = ctx.test_tasks(&ts, ctx.cfg.eval.n_envs);
    let agent = Agent::Transformer(&params);
    let mut rows = curves(&agent, &tasks, ctx)?;
    write_csv(&ctx.report("fig2a.csv"), &rows)?;
    let base = ctx.report("baselines.csv");
    if base.exists() {
        rows.extend(read_csv::<CurveRow>(&base)?);
    }
    write_csv(&ctx.report("fig2b.csv"), &stratify_by_rewards(&rows, 3, ctx.cfg.seed)?)?;
    let mut qt = query_types(&agent, &tasks, ctx)?;
    let qb = ctx.report("query_types_baseline.csv");
    if qb.exists() {
        qt.extend(read_csv::<QueryTypeRow>(&qb)?);
    }
    write_csv(&ctx.report("fig2def.csv"), &qt)?;
    if ctx.cfg.suite == Suite::Gridworld && ctx.cfg.eval.shortcut_envs > 0 {
        let mut sc = Vec::new();
        for spec in [ShortcutSpec::left(), ShortcutSpec::right()] {
            for a in [Agent::Transformer(&params), Agent::Random] {
                sc.extend(shortcut_test(&a, &spec, ctx.cfg.eval.shortcut_envs, ctx.cfg.env.sigma, ctx.cfg.seed, &ctx.hash())?);
            }
        }
        write_csv(&ctx.report("fig13c.csv"), &sc)?;
    }
    ctx.write_stamp(Stage::Eval)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossContextCsvRow {
    pub config_hash: String,
    pub seed: u64,
    pub layer: usize,
    pub context_len: usize,
    pub group: usize,
    pub n_pairs: usize,
    pub same_mean: f64,
    pub same_lo: f64,
    pub same_hi: f64,
    pub diff_mean: f64,
    pub diff_lo: f64,
    pub diff_hi: f64,
    pub gap_mean: f64,
    pub gap_lo: f64,
    pub gap_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceAccuracyRow {
    pub config_hash: String,
    pub seed: u64,
    pub target: String,
    pub layer: usize,
    pub distance: u32,
    pub n: usize,
    pub balanced_accuracy: f64,
}

fn report_row(ctx: &Ctx, target: &str, layer: usize, c: usize, metric: &str, samples: &[f64], salt: u64) -> anyhow::Result<ProbeReportRow> {
    let ci = bootstrap_ci(samples, BOOTSTRAP_RESAMPLES, 0.05, &mut substream(ctx.cfg.seed, "probe-ci", salt))?;
    Ok(ProbeReportRow {
        config_hash: ctx.hash(),
        seed: ctx.cfg.seed,
        target: target.into(),
        layer,
        context_len: c,
        metric: metric.into(),
        value: ci.mean,
        ci_lo: ci.lo,
        ci_hi: ci.hi,
    })
}

fn cross_context(ctx: &Ctx, params: &ModelParams<f32>, tasks: &[&Task]) -> anyhow::Result<Vec<CrossContextCsvRow>> {
    let mut rows = Vec::new();
    let layers = params.config.layers;
    for &c in &ctx.cfg.probe.contexts {
        let ds: Vec<ProbeDataset> = tasks
            .par_iter()
            .map(|t| {
                let nodes: Vec<usize> = (0..t.graph.node_count).collect();
                capture_query_reps(params, t, c.min(t.steps.len()), &nodes)
            })
            .collect::<Result<_, _>>()?;
        for layer in 1..=layers {
            let sets: Vec<EnvReps> = ds.iter().zip(tasks).map(|(d, t)| EnvReps::from_dataset(&d.layer(layer), &t.graph)).collect();
            let group: &dyn Fn(u32) -> usize = match ctx.cfg.suite {
                Suite::Gridworld => &|_| 0,
                Suite::Tree => &|h| heap_depth(h),
            };
            let mut rng = substream(ctx.cfg.seed, "cross-context", (c * 16 + layer) as u64);
            for r in cross_context_correlation(&sets, group, &mut rng)? {
                rows.push(CrossContextCsvRow {
                    config_hash: ctx.hash(),
                    seed: ctx.cfg.seed,
                    layer,
                    context_len: c,
                    group: r.group,
                    n_pairs: r.n_pairs,
                    same_mean: r.same.mean,
                    same_lo: r.same.lo,
                    same_hi: r.same.hi,
                    diff_mean: r.diff.mean,
                    diff_lo: r.diff.lo,
                    diff_hi: r.diff.hi,
                    gap_mean: r.gap.mean,
                    gap_lo: r.gap.lo,
                    gap_hi: r.gap.hi,
                });
            }
        }
        // pooled across depth groups for trees
        if ctx.cfg.suite == Suite::Tree {
            for layer in 1..=layers {
                let sets: Vec<EnvReps> = ds.iter().zip(tasks).map(|(d, t)| EnvReps::from_dataset(&d.layer(layer), &t.graph)).collect();
                let mut rng = substream(ctx.cfg.seed, "cross-context-pooled", (c * 16 + layer) as u64);
                for r in cross_context_correlation(&sets, &|_| usize::MAX, &mut rng)? {
                    rows.push(CrossContextCsvRow {
                        config_hash: ctx.hash(),
                        seed: ctx.cfg.seed,
                        layer,
                        context_len: c,
                        group: r.group,
                        n_pairs: r.n_pairs,
                        same_mean: r.same.mean,
                        same_lo: r.same.lo,
                        same_hi: r.same.hi,
                        diff_mean: r.diff.mean,
                        diff_lo: r.diff.lo,
                        diff_hi: r.diff.hi,
                        gap_mean: r.gap.mean,
                        gap_lo: r.gap.lo,
                        gap_hi: r.gap.hi,
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn decoder_tasks<'a>(ctx: &Ctx, ts: &'a TaskSet) -> Vec<&'a Task> {
    let split = match ctx.cfg.suite {
        Suite::Gridworld => Split::Train,
        Suite::Tree => Split::Test,
    };
    let c = ctx.cfg.probe.decoder_context;
    let mut pool: Vec<&Task> = ts
        .split(split)
        .filter(|t| t.steps[..c.min(t.steps.len())].iter().any(|s| s.r))
        .collect();
    use rand::seq::SliceRandom;
    pool.shuffle(&mut substream(ctx.cfg.seed, "decoder-envs", 0));
    pool.truncate(ctx.cfg.probe.decoder_envs);
    pool.sort_by_key(|t| t.id);
    pool
}

fn grid_decoders(ctx: &Ctx, params: &ModelParams<f32>, tasks: &[&Task]) -> anyhow::Result<Vec<ProbeReportRow>> {
    let c = ctx.cfg.probe.decoder_context;
    let parts: Vec<ProbeDataset> = tasks
        .par_iter()
        .map(|t| {
            let cc = c.min(t.steps.len());
            let nodes: Vec<usize> = (0..t.graph.node_count).filter(|&n| icrl_core::eval::seen_in_context(&t.steps[..cc], n)).collect();
            capture_query_reps(params, t, cc, &nodes)
        })
        .collect::<Result<_, _>>()?;
    let by_env: BTreeMap<usize, &Task> = tasks.iter().map(|t| (t.id, *t)).collect();
    let mut ds = ProbeDataset::default();
    for p in parts {
        ds.extend(p);
    }
    let envs: Vec<usize> = tasks.iter().map(|t| t.id).collect();
    let (train, test) = split_envs(&envs, ctx.cfg.probe.test_frac, &mut substream(ctx.cfg.seed, "decoder-split", 0));
    let mut rows = Vec::new();
    for layer in 1..=params.config.layers {
        let d = ds.layer(layer);
        let mut rng = substream(ctx.cfg.seed, "decoder-fit", layer as u64);
        let xy: Vec<Vec<f64>> = d
            .meta
            .iter()
            .map(|m| {
                let (x, y) = by_env[&m.env].graph.grid_xy(m.node).expect("grid node");
                vec![x as f64, y as f64]
            })
            .collect();
        let (_, met, pred, truth) = fit_ridge(&d, &xy, &train, &test, &mut rng)?;
        let err: Vec<f64> = (0..pred.nrows()).map(|i| (pred.row(i) - truth.row(i)).norm()).collect();
        rows.push(report_row(ctx, "xy", layer, c, "euclid_error", &err, layer as u64)?);
        rows.push(report_row(ctx, "xy", layer, c, "r2", &[met.r2], layer as u64)?);

        let val = |gamma: f64, euclid: bool| -> Vec<Vec<f64>> {
            d.meta
                .iter()
                .map(|m| {
                    let t = by_env[&m.env];
                    let (v, ve) = value_targets(&t.graph, t.goal, gamma);
                    vec![if euclid { ve.expect("grid")[m.node] } else { v[m.node] }]
                })
                .collect()
        };
        for (name, euclid) in [("value", false), ("value_euclid", true)] {
            let (_, _, pred, truth) = fit_ridge(&d, &val(ctx.cfg.probe.value_gamma, euclid), &train, &test, &mut rng)?;
            let err: Vec<f64> = (0..pred.nrows()).map(|i| (pred[(i, 0)] - truth[(i, 0)]).abs()).collect();
            rows.push(report_row(ctx, name, layer, c, "abs_error", &err, 100 + layer as u64)?);
        }

        let keep = |m: &icrl_core::probe::SampleMeta| by_env[&m.env].goal != m.node;
        let da = d.filter(keep);
        let angles: Vec<f64> = da
            .meta
            .iter()
            .map(|m| {
                let t = by_env[&m.env];
                angle_to_goal(&t.graph, m.node, t.goal).expect("non-goal grid node")
            })
            .collect();
        let cm = fit_circular(&da, &angles, &train, &test, &mut rng)?;
        rows.push(ProbeReportRow {
            config_hash: ctx.hash(),
            seed: ctx.cfg.seed,
            target: "angle_to_goal".into(),
            layer,
            context_len: c,
            metric: "angular_error".into(),
            value: cm.mean_error,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
        });
    }
    Ok(rows)
}

/// Caps a training pool for cross-validated logistic fits.
const LOGISTIC_ROW_CAP: usize = 20_000;

fn cap_rows(ds: &ProbeDataset, train_envs: &[usize], cap: usize, seed: u64) -> ProbeDataset {
    let train: std::collections::HashSet<usize> = train_envs.iter().copied().collect();
    let n_train = ds.meta.iter().filter(|m| train.contains(&m.env)).count();
    if n_train <= cap {
        return ds.clone();
    }
    let p = cap as f64 / n_train as f64;
    ds.filter(|m| {
        let key = (m.env as u64) << 20 | m.position.unwrap_or(m.node) as u64;
        !train.contains(&m.env) || (subseed(seed, "logistic-cap", key) as f64) < p * u64::MAX as f64
    })
}

fn tree_decoders(
    ctx: &Ctx,
    params: &ModelParams<f32>,
    tasks: &[&Task],
) -> anyhow::Result<(Vec<ProbeReportRow>, Vec<DistanceAccuracyRow>)> {
    let parts: Vec<ProbeDataset> = tasks.par_iter().map(|t| capture_context_reps(params, t)).collect::<Result<_, _>>()?;
    let by_env: BTreeMap<usize, &Task> = tasks.iter().map(|t| (t.id, *t)).collect();
    let mut ds = ProbeDataset::default();
    for p in parts {
        ds.extend(p);
    }
    let envs: Vec<usize> = tasks.iter().map(|t| t.id).collect();
    let (train, test) = split_envs(&envs, ctx.cfg.probe.test_frac, &mut substream(ctx.cfg.seed, "decoder-split", 0));
    let test_set: std::collections::HashSet<usize> = test.iter().copied().collect();
    let c = ctx.cfg.probe.decoder_context;
    let mut rows = Vec::new();
    let mut dist_rows = Vec::new();
    for layer in 1..=params.config.layers {
        let d = cap_rows(&ds.layer(layer), &train, LOGISTIC_ROW_CAP, ctx.cfg.seed + layer as u64);
        let mut rng = substream(ctx.cfg.seed, "tree-decoder-fit", layer as u64);
        let lr: Vec<usize> = d
            .meta
            .iter()
            .map(|m| {
                let t = by_env[&m.env];
                on_lr_path(&t.graph, t.goal, m.node, m.next_node.expect("context row")) as usize
            })
            .collect();
        let (_, met, pred) = fit_logistic(&d, &lr, &train, &test, &mut rng)?;
        rows.push(ProbeReportRow {
            config_hash: ctx.hash(),
            seed: ctx.cfg.seed,
            target: "lr_path".into(),
            layer,
            context_len: c,
            metric: "balanced_accuracy".into(),
            value: met.balanced_accuracy,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
        });
        // accuracy by distance of the transition from the goal
        let test_rows: Vec<usize> = (0..d.len()).filter(|&i| test_set.contains(&d.meta[i].env)).collect();
        let mut by_dist: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (k, &i) in test_rows.iter().enumerate() {
            let m = &d.meta[i];
            let t = by_env[&m.env];
            let dist = t.graph.distance(m.node, t.goal).min(t.graph.distance(m.next_node.unwrap(), t.goal));
            let e = by_dist.entry(dist).or_default();
            e.0.push(lr[i]);
            e.1.push(pred[k]);
        }
        for (dist, (truth, p)) in by_dist {
            dist_rows.push(DistanceAccuracyRow {
                config_hash: ctx.hash(),
                seed: ctx.cfg.seed,
                target: "lr_path".into(),
                layer,
                distance: dist,
                n: truth.len(),
                balanced_accuracy: balanced_accuracy(&truth, &p),
            });
        }

        let parent = d.filter(|m| m.action == Some(tact::PARENT) && m.next_node != Some(m.node));
        let inv: Vec<usize> = parent
            .meta
            .iter()
            .map(|m| inverse_action(&by_env[&m.env].graph, m.node, m.next_node.unwrap()).expect("moving transition"))
            .collect();
        let (_, met, _) = fit_logistic(&parent, &inv, &train, &test, &mut rng)?;
        rows.push(ProbeReportRow {
            config_hash: ctx.hash(),
            seed: ctx.cfg.seed,
            target: "inverse_action".into(),
            layer,
            context_len: c,
            metric: "balanced_accuracy".into(),
            value: met.balanced_accuracy,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
        });
    }
    Ok((rows, dist_rows))
}

/// Kernel alignment, cross-context correlation and linear decoders.
pub fn cmd_probe(ctx: &Ctx) -> anyhow::Result<()> {
    ctx.check_stamp(Stage::Probe)?;
    let ts = ctx.taskset()?;
    let (params, _) = ctx.model()?;
    let tasks = ctx.test_tasks(&ts, ctx.cfg.probe.n_envs);
    let spec = CkaSpec {
        gamma: ctx.cfg.probe.cka_gamma,
    };
    let parts: Vec<_> = tasks
        .par_iter()
        .map(|t| alignment_curve(&params, &[*t], &ctx.cfg.probe.contexts, spec, ctx.cfg.seed, &ctx.hash()))
        .collect::<Result<_, _>>()?;
    write_csv(&ctx.report("fig3c.csv"), &parts.concat())?;
    write_csv(&ctx.report("fig4b.csv"), &cross_context(ctx, &params, &tasks)?)?;
    let dtasks = decoder_tasks(ctx, &ts);
    if dtasks.len() < 2 {
        bail!("only {} decoder envs with reward in context; need at least 2", dtasks.len());
    }
    match ctx.cfg.suite {
        Suite::Gridworld => write_csv(&ctx.report("fig6bc.csv"), &grid_decoders(ctx, &params, &dtasks)?)?,
        Suite::Tree => {
            let (rows, dist) = tree_decoders(ctx, &params, &dtasks)?;
            write_csv(&ctx.report("fig7d.csv"), &rows)?;
            write_csv(&ctx.report("fig7e.csv"), &dist)?;
        }
    }
    ctx.write_stamp(Stage::Probe)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub config_hash: String,
    pub seed: u64,
    pub env: usize,
    pub layer: usize,
    pub distance: u32,
    pub mean_mass: f64,
    pub mean_weight: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgRow {
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
    /// Both endpoints on the query-to-goal path.
    pub on_path: bool,
    pub completeness_residual: f64,
}

/// Greedy rollout path from `query` to the goal, if the model reaches it.
fn model_path(params: &ModelParams<f32>, task: &Task, c: usize, query: usize, horizon: usize) -> anyhow::Result<Option<Vec<usize>>> {
    let cache = ContextCache::build(params, &context_tokens(task, c, params.config.token_width))?;
    let mut pol = TransformerPolicy::new(params, &cache, c, Decoding::Greedy);
    let mut rng = substream(0, "unused", 0);
    let r = rollout(&mut pol, task, c, query, horizon, &mut rng)?;
    Ok(r.path.iter().position(|&n| n == task.goal).map(|k| r.path[..=k].to_vec()))
}

fn grid_attrib(ctx: &Ctx, params: &ModelParams<f32>, task: &Task) -> anyhow::Result<(Vec<InterventionRow>, Vec<ProfileRow>)> {
    let c = ctx.cfg.attrib.context_len.min(task.steps.len());
    let oracle = task.oracle();
    let mut rows = Vec::new();
    // farthest seen state the model navigates from successfully
    let mut cands: Vec<usize> = (0..task.graph.node_count)
        .filter(|&n| icrl_core::eval::seen_in_context(&task.steps[..c], n) && oracle.distance_to_goal[n] >= 3)
        .collect();
    cands.sort_by_key(|&n| (std::cmp::Reverse(oracle.distance_to_goal[n]), n));
    for q in cands {
        if let Some(path) = model_path(params, task, c, q, ctx.cfg.eval.settings.horizon)? {
            let mut r = necessity_along_path(params, task, c, q, &path, ctx.cfg.seed, &ctx.hash())?;
            r.iter_mut().for_each(|x| x.spec = format!("necessity/{}", path.len()));
            rows = r;
            break;
        }
    }
    let mut prof = Vec::new();
    for layer in 1..params.config.layers {
        for b in attention_distance_profile(params, task, layer)? {
            prof.push(ProfileRow {
                config_hash: ctx.hash(),
                seed: ctx.cfg.seed,
                env: task.id,
                layer,
                distance: b.distance,
                mean_mass: b.mean_mass,
                mean_weight: b.mean_weight,
                pairs: b.pairs,
            });
        }
    }
    Ok((rows, prof))
}

type TreeAttrib = (Vec<IgRow>, Vec<InterventionRow>, Vec<InterventionRow>);

fn tree_attrib(ctx: &Ctx, params: &ModelParams<f32>, task: &Task) -> anyhow::Result<TreeAttrib> {
    let c = ctx.cfg.attrib.context_len.min(task.steps.len());
    let root = task.graph.tree_path_from_root(task.goal)[0];
    let path = task.graph.tree_path_from_root(task.goal);
    let oracle = task.oracle();
    let target = oracle.first_action(root);
    let seq = context_then_query(task, c, root)?;
    let map = integrated_gradients(params, &seq, c, target, ctx.cfg.attrib.ig_steps)?;
    let on = |n: usize| path.contains(&n);
    let ig: Vec<IgRow> = attribution_rows(task, &map, c, root, ctx.cfg.seed, &ctx.hash())
        .into_iter()
        .map(|r| IgRow {
            on_path: on(r.s) && on(r.s_next),
            completeness_residual: map.completeness_residual(),
            config_hash: r.config_hash,
            seed: r.seed,
            env: r.env,
            token: r.token,
            s: r.s,
            s_next: r.s_next,
            dist_query: r.dist_query,
            dist_goal: r.dist_goal,
            bucket: r.bucket,
            strength: r.strength,
            normalized: r.normalized,
        })
        .collect();
    let nec = necessity_along_path(params, task, c, root, &path, ctx.cfg.seed, &ctx.hash())?;
    let mut suf = Vec::new();
    let mut push = |spec: &str, layer: usize, i: usize, node: usize, toks: Vec<usize>| -> anyhow::Result<()> {
        let n = toks.len();
        if n == 0 {
            return Ok(());
        }
        let r = sufficiency_restriction(params, task, c, root, layer, toks)?;
        suf.push(InterventionRow {
            config_hash: ctx.hash(),
            seed: ctx.cfg.seed,
            env: task.id,
            spec: spec.into(),
            layer,
            path_index: i,
            node,
            n_tokens: n,
            delta_ce: r.delta_ce,
            flagged: r.flagged,
        });
        Ok(())
    };
    for layer in 1..=params.config.layers {
        push("query_state", layer, 0, root, tokens_with_node(task, c, root))?;
        for (i, &node) in path.iter().enumerate() {
            push("path", layer, i, node, path_tokens(task, c, node, &path, true, PathDirection::Any))?;
            push("toward", layer, i, node, path_tokens(task, c, node, &path, true, PathDirection::TowardGoal))?;
            push("away", layer, i, node, path_tokens(task, c, node, &path, true, PathDirection::AwayFromGoal))?;
            push("off_path", layer, i, node, path_tokens(task, c, node, &path, false, PathDirection::Any))?;
        }
    }
    Ok((ig, nec, suf))
}

/// Integrated gradients, necessity and sufficiency interventions, and
/// attention-distance profiles.
pub fn cmd_attrib(ctx: &Ctx) -> anyhow::Result<()> {
    ctx.check_stamp(Stage::Attrib)?;
    let ts = ctx.taskset()?;
    let (params, _) = ctx.model()?;
    let tasks = ctx.test_tasks(&ts, ctx.cfg.attrib.n_envs);
    match ctx.cfg.suite {
        Suite::Gridworld => {
            let parts: Vec<_> = tasks.par_iter().map(|t| grid_attrib(ctx, &params, t)).collect::<Result<_, _>>()?;
            let (nec, prof): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
            write_csv(&ctx.report("fig6d.csv"), &nec.concat())?;
            write_csv(&ctx.report("fig6e.csv"), &prof.concat())?;
        }
        Suite::Tree => {
            let parts: Vec<TreeAttrib> = tasks.par_iter().map(|t| tree_attrib(ctx, &params, t)).collect::<Result<_, _>>()?;
            let mut ig = Vec::new();
            let mut nec = Vec::new();
            let mut suf = Vec::new();
            for (a, b, c) in parts {
                ig.extend(a);
                nec.extend(b);
                suf.extend(c);
            }
            write_csv(&ctx.report("fig5b.csv"), &ig)?;
            write_csv(&ctx.report("fig21f.csv"), &nec)?;
            write_csv(&ctx.report("fig7c.csv"), &suf)?;
        }
    }
    ctx.write_stamp(Stage::Attrib)?;
    Ok(())
}
