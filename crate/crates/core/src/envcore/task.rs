//! Tasks and train/eval/test task sets.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::encoder::{make_state_encoder, Encoding, StateEncoder, ENCODING_DIM};
use super::graph::{build_gridworld_graph, full_tree, sample_tree_graph, LatentGraph, Suite};
use super::oracle::Oracle;
use super::walk::{exploration_walk, Step, WalkConfig};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

/// Flattened `(s, a, s', r)` view of one context step.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTuple {
    pub s: Encoding,
    pub a: Vec<f32>,
    pub s_next: Encoding,
    pub r: f32,
}

impl TransitionTuple {
    pub fn width(&self) -> usize {
        2 * ENCODING_DIM + self.a.len() + 1
    }

    pub fn flatten_into(&self, out: &mut Vec<f32>) {
        out.extend_from_slice(&self.s);
        out.extend_from_slice(&self.a);
        out.extend_from_slice(&self.s_next);
        out.push(self.r);
    }
}

/// Token width for a suite: `s (10) + one-hot action + s' (10) + r`.
pub fn token_width(suite: Suite) -> usize {
    2 * ENCODING_DIM + suite.action_count() + 1
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: usize,
    pub graph: Arc<LatentGraph>,
    pub encoder: StateEncoder,
    pub goal: usize,
    pub start: usize,
    pub steps: Vec<Step>,
    pub split: Split,
}

impl Task {
    pub fn suite(&self) -> Suite {
        self.graph.suite
    }

    pub fn oracle(&self) -> Oracle {
        Oracle::new(&self.graph, self.goal)
    }

    pub fn tuple(&self, t: usize) -> TransitionTuple {
        let st = self.steps[t];
        let mut a = vec![0.0f32; self.graph.action_count];
        a[st.action()] = 1.0;
        TransitionTuple {
            s: *self.encoder.encode(st.state()),
            a,
            s_next: *self.encoder.encode(st.next_state()),
            r: if st.r { 1.0 } else { 0.0 },
        }
    }

    /// Writes the flattened token of step `t` into `out` (length = token width).
    pub fn write_token(&self, t: usize, out: &mut [f32]) {
        let st = self.steps[t];
        let na = self.graph.action_count;
        out[..ENCODING_DIM].copy_from_slice(self.encoder.encode(st.state()));
        for (i, v) in out[ENCODING_DIM..ENCODING_DIM + na].iter_mut().enumerate() {
            *v = if i == st.action() { 1.0 } else { 0.0 };
        }
        out[ENCODING_DIM + na..2 * ENCODING_DIM + na]
            .copy_from_slice(self.encoder.encode(st.next_state()));
        out[2 * ENCODING_DIM + na] = if st.r { 1.0 } else { 0.0 };
    }

    /// Copy of this task whose context carries no reward signal.
    pub fn reward_ablated(&self) -> Task {
        let mut t = self.clone();
        for st in &mut t.steps {
            st.r = false;
        }
        t
    }

    pub fn with_steps(&self, steps: Vec<Step>) -> Task {
        let mut t = self.clone();
        t.steps = steps;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub suite: Suite,
    pub sigma: f64,
    pub trajectory_len: usize,
    pub branch_prob: f64,
    pub max_attempts: usize,
    pub walk: WalkConfig,
    pub ratios: [f64; 3],
}

impl EnvConfig {
    pub fn gridworld() -> Self {
        EnvConfig {
            suite: Suite::Gridworld,
            sigma: 0.8,
            trajectory_len: 250,
            branch_prob: 0.9,
            max_attempts: 1000,
            walk: WalkConfig::default(),
            ratios: [0.8, 0.1, 0.1],
        }
    }

    pub fn tree() -> Self {
        EnvConfig {
            suite: Suite::Tree,
            sigma: 0.6,
            trajectory_len: 1600,
            ..Self::gridworld()
        }
    }

    pub fn for_suite(suite: Suite) -> Self {
        match suite {
            Suite::Gridworld => Self::gridworld(),
            Suite::Tree => Self::tree(),
        }
    }

    pub fn hash(&self) -> String {
        crate::store::config_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    /// Gridworld goal partition (train, eval, test).
    pub goal_partition: Option<[Vec<usize>; 3]>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TaskSet {
    pub config: EnvConfig,
    pub tasks: Vec<Task>,
    pub provenance: Provenance,
}

impl TaskSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(move |t| t.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Sizes of the three splits for `m` tasks.
pub fn split_sizes(m: usize, ratios: [f64; 3]) -> [usize; 3] {
    let n_eval = ((m as f64) * ratios[1]).round() as usize;
    let n_test = ((m as f64) * ratios[2]).round() as usize;
    let n_train = m.saturating_sub(n_eval + n_test);
    [n_train, n_eval, m - n_train - n_eval]
}

fn split_of(i: usize, sizes: [usize; 3]) -> Split {
    if i < sizes[0] {
        Split::Train
    } else if i < sizes[0] + sizes[1] {
        Split::Eval
    } else {
        Split::Test
    }
}

/// Partition of grid goal states: 0.8/0.1/0.1 of the 25 states, with the
/// remainder going to train (21/2/2).
fn grid_goal_partition(seed: u64, ratios: [f64; 3], n: usize) -> [Vec<usize>; 3] {
    let mut states: Vec<usize> = (0..n).collect();
    states.shuffle(&mut substream(seed, "env-goals", 0));
    let n_eval = ((n as f64 * ratios[1]).floor() as usize).max(1);
    let n_test = ((n as f64 * ratios[2]).floor() as usize).max(1);
    let n_train = n - n_eval - n_test;
    let train = states[..n_train].to_vec();
    let eval = states[n_train..n_train + n_eval].to_vec();
    let test = states[n_train + n_eval..].to_vec();
    [train, eval, test]
}

fn make_task(
    id: usize,
    graph: Arc<LatentGraph>,
    goal: usize,
    split: Split,
    seed: u64,
    config: &EnvConfig,
) -> Result<Task> {
    let mut rng = substream(seed, "env-task", id as u64);
    let encoder = make_state_encoder(&mut rng, &graph, config.sigma)?;
    let start = match graph.suite {
        Suite::Gridworld => rng.random_range(0..graph.node_count),
        Suite::Tree => 0,
    };
    let steps = exploration_walk(
        &mut rng,
        &graph,
        goal,
        start,
        config.trajectory_len,
        &config.walk,
    )?;
    Ok(Task {
        id,
        graph,
        encoder,
        goal,
        start,
        steps,
        split,
    })
}

pub fn build_taskset(m: usize, seed: u64, config: &EnvConfig) -> Result<TaskSet> {
    if m < 10 {
        return Err(Error::invalid("task sets need at least 10 tasks"));
    }
    let sizes = split_sizes(m, config.ratios);
    let mut notes = Vec::new();
    let mut tasks = Vec::with_capacity(m);
    let mut goal_partition = None;

    match config.suite {
        Suite::Gridworld => {
            let graph = Arc::new(build_gridworld_graph());
            let part = grid_goal_partition(seed, config.ratios, graph.node_count);
            notes.push(format!(
                "goal partition sizes {}/{}/{}",
                part[0].len(),
                part[1].len(),
                part[2].len()
            ));
            let mut goal_rng = substream(seed, "env-goal-draw", 0);
            for id in 0..m {
                let split = split_of(id, sizes);
                let pool = match split {
                    Split::Train => &part[0],
                    Split::Eval => &part[1],
                    Split::Test => &part[2],
                };
                let goal = pool[goal_rng.random_range(0..pool.len())];
                tasks.push(make_task(id, graph.clone(), goal, split, seed, config)?);
            }
            goal_partition = Some(part);
        }
        Suite::Tree => {
            let full = Arc::new(full_tree());
            let mut train_shapes: HashSet<Vec<u32>> = HashSet::new();
            for id in 0..m {
                let split = split_of(id, sizes);
                let mut rng = substream(seed, "env-graph", id as u64);
                let graph = match split {
                    Split::Test => full.clone(),
                    Split::Train | Split::Eval => {
                        let mut attempts = 0;
                        loop {
                            attempts += 1;
                            if attempts > config.max_attempts {
                                return Err(Error::GenerationFailed {
                                    attempts: config.max_attempts,
                                });
                            }
                            let g = sample_tree_graph(
                                &mut rng,
                                config.branch_prob,
                                super::graph::TREE_LAYERS,
                                config.max_attempts,
                            )?;
                            if g.is_full_tree() {
                                continue;
                            }
                            let shape = g.heap_indices().expect("tree");
                            if split == Split::Eval && train_shapes.contains(&shape) {
                                continue;
                            }
                            if split == Split::Train {
                                train_shapes.insert(shape);
                            }
                            break Arc::new(g);
                        }
                    }
                };
                let leaves = graph.leaves();
                let goal = leaves[rng.random_range(0..leaves.len())];
                tasks.push(make_task(id, graph, goal, split, seed, config)?);
            }
        }
    }

    Ok(TaskSet {
        config: config.clone(),
        tasks,
        provenance: Provenance {
            seed,
            config_hash: config.hash(),
            goal_partition,
            notes,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(suite: Suite, len: usize) -> EnvConfig {
        EnvConfig {
            trajectory_len: len,
            ..EnvConfig::for_suite(suite)
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(split_sizes(40960, [0.8, 0.1, 0.1]), [32768, 4096, 4096]);
        let s = split_sizes(17, [0.8, 0.1, 0.1]);
        assert_eq!(s.iter().sum::<usize>(), 17);
    }

    #[test]
    fn grid_goals_disjoint_across_splits() {
        let ts = build_taskset(200, 3, &small(Suite::Gridworld, 20)).unwrap();
        let goals = |s| ts.split(s).map(|t| t.goal).collect::<HashSet<_>>();
        let (a, b, c) = (goals(Split::Train), goals(Split::Eval), goals(Split::Test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        let part = ts.provenance.goal_partition.as_ref().unwrap();
        assert_eq!(
            [part[0].len(), part[1].len(), part[2].len()],
            [21, 2, 2]
        );
    }

    #[test]
    fn tree_splits() {
        let ts = build_taskset(40, 5, &small(Suite::Tree, 50)).unwrap();
        for t in &ts.tasks {
            assert!(t.graph.leaves().contains(&t.goal));
            assert_eq!(t.steps[0].state(), 0);
            match t.split {
                Split::Train => assert!(t.graph.node_count < 127),
                Split::Test => assert!(t.graph.is_full_tree()),
                Split::Eval => assert!(!t.graph.is_full_tree()),
            }
        }
        let train: HashSet<_> = ts
            .split(Split::Train)
            .map(|t| t.graph.heap_indices().unwrap())
            .collect();
        for t in ts.split(Split::Eval) {
            assert!(!train.contains(&t.graph.heap_indices().unwrap()));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = build_taskset(12, 9, &small(Suite::Gridworld, 30)).unwrap();
        let b = build_taskset(12, 9, &small(Suite::Gridworld, 30)).unwrap();
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.steps, y.steps);
            assert_eq!(x.encoder, y.encoder);
            assert_eq!(x.goal, y.goal);
        }
    }

    #[test]
    fn token_layout() {
        let ts = build_taskset(10, 1, &small(Suite::Gridworld, 30)).unwrap();
        let t = &ts.tasks[0];
        assert_eq!(token_width(Suite::Gridworld), 26);
        assert_eq!(token_width(Suite::Tree), 25);
        let mut flat = Vec::new();
        t.tuple(0).flatten_into(&mut flat);
        let mut tok = vec![0.0; 26];
        t.write_token(0, &mut tok);
        assert_eq!(flat, tok);
        for (i, st) in t.steps.iter().enumerate() {
            t.write_token(i, &mut tok);
            assert_eq!(tok[25], if st.r { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn decode_consistency() {
        let ts = build_taskset(10, 2, &small(Suite::Tree, 300)).unwrap();
        for t in &ts.tasks {
            let dec = t.encoder.decoder();
            for i in 0..t.steps.len() {
                let tup = t.tuple(i);
                let s = dec.lookup(&tup.s).unwrap();
                let sn = dec.lookup(&tup.s_next).unwrap();
                let a = tup.a.iter().position(|&v| v == 1.0).unwrap();
                assert_eq!(t.graph.step(s, a), sn);
                assert_eq!(tup.r == 1.0, sn == t.goal);
            }
        }
    }
}
