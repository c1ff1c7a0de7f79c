//! Tabular Q-learning over exactly matched state encodings.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::QFunction;
use crate::envcore::encoder::encoding_key;
use crate::envcore::{TransitionTuple, ENCODING_DIM};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
}

impl Default for QTrainConfig {
    fn default() -> Self {
        QTrainConfig {
            lr: 0.1,
            batch_size: 512,
            epochs: 1000,
            gamma: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QTable {
    pub action_count: usize,
    index: HashMap<[u32; ENCODING_DIM], usize>,
    values: Vec<f64>,
    /// Max |TD error| seen in each epoch.
    pub td_history: Vec<f64>,
}

impl QTable {
    pub fn new(action_count: usize) -> Self {
        QTable {
            action_count,
            index: HashMap::new(),
            values: Vec::new(),
            td_history: Vec::new(),
        }
    }

    pub fn state_count(&self) -> usize {
        self.index.len()
    }

    pub fn row_of(&self, s: &[f32]) -> Option<usize> {
        self.index.get(&encoding_key(s)).copied()
    }

    fn intern(&mut self, s: &[f32]) -> usize {
        let n = self.index.len();
        let row = *self.index.entry(encoding_key(s)).or_insert(n);
        if row == n {
            self.values.extend(std::iter::repeat_n(0.0, self.action_count));
        }
        row
    }

    pub fn get(&self, s: &[f32], a: usize) -> f64 {
        self.row_of(s).map_or(0.0, |r| self.values[r * self.action_count + a])
    }

    fn row_max(&self, row: usize) -> f64 {
        self.values[row * self.action_count..(row + 1) * self.action_count]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl QFunction for QTable {
    fn q_values(&self, s: &[f32]) -> Vec<f64> {
        match self.row_of(s) {
            Some(r) => self.values[r * self.action_count..(r + 1) * self.action_count].to_vec(),
            None => vec![0.0; self.action_count],
        }
    }
}

/// Minibatch TD(0). Targets use the table as it stood at the start of each
/// batch; repeated `(s, a)` pairs within a batch apply their mean error.
pub fn tabular_q_train(buffer: &[TransitionTuple], cfg: &QTrainConfig, rng: &mut Rng) -> Result<QTable> {
    if buffer.is_empty() {
        return Err(Error::EmptySelection("empty replay buffer".into()));
    }
    if !(0.0..1.0).contains(&cfg.gamma) || cfg.batch_size == 0 {
        return Err(Error::invalid("gamma must lie in [0, 1) and batch_size be positive"));
    }
    let na = buffer[0].a.len();
    let mut q = QTable::new(na);
    let items: Vec<(usize, usize, usize, f64)> = buffer
        .iter()
        .map(|t| {
            let a = t.a.iter().position(|&v| v == 1.0).unwrap_or(0);
            let s = q.intern(&t.s);
            let sn = q.intern(&t.s_next);
            (s, a, sn, t.r as f64)
        })
        .collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut sum = vec![0.0f64; q.values.len()];
    let mut count = vec![0u32; q.values.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut max_td = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut touched = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (s, a, sn, r) = items[i];
                let cell = s * na + a;
                let td = r + cfg.gamma * q.row_max(sn) - q.values[cell];
                max_td = max_td.max(td.abs());
                if count[cell] == 0 {
                    touched.push(cell);
                }
                sum[cell] += td;
                count[cell] += 1;
            }
            for cell in touched {
                q.values[cell] += cfg.lr * sum[cell] / count[cell] as f64;
                sum[cell] = 0.0;
                count[cell] = 0;
            }
        }
        q.td_history.push(max_td);
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::{build_gridworld_graph, grid_node, make_state_encoder, Oracle};
    use crate::rng::substream;

    fn tuple(enc: &crate::envcore::StateEncoder, s: usize, a: usize, sn: usize, goal: usize) -> TransitionTuple {
        let mut av = vec![0.0; 5];
        av[a] = 1.0;
        TransitionTuple {
            s: *enc.encode(s),
            a: av,
            s_next: *enc.encode(sn),
            r: if sn == goal { 1.0 } else { 0.0 },
        }
    }

    #[test]
    fn single_rewarded_transition_fixed_point() {
        let g = build_gridworld_graph();
        let enc = make_state_encoder(&mut substream(0, "e", 0), &g, 0.8).unwrap();
        let goal = grid_node(2, 2);
        let s = grid_node(1, 2);
        let buf = vec![tuple(&enc, s, 1, goal, goal)];
        let q = tabular_q_train(&buf, &QTrainConfig::default(), &mut substream(0, "q", 0)).unwrap();
        assert!((q.get(enc.encode(s), 1) - 1.0).abs() < 1e-6);
        assert_eq!(q.q_values(enc.encode(goal)), vec![0.0; 5]);
        assert_eq!(q.state_count(), 2);
    }

    #[test]
    fn no_reward_stays_zero() {
        let g = build_gridworld_graph();
        let enc = make_state_encoder(&mut substream(1, "e", 0), &g, 0.8).unwrap();
        let buf: Vec<_> = (0..10).map(|i| tuple(&enc, i, 1, g.step(i, 1), 99)).collect();
        let q = tabular_q_train(&buf, &QTrainConfig::default(), &mut substream(0, "q", 0)).unwrap();
        for i in 0..10 {
            assert!(q.q_values(enc.encode(i)).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn full_coverage_recovers_oracle() {
        let g = build_gridworld_graph();
        let enc = make_state_encoder(&mut substream(2, "e", 0), &g, 0.8).unwrap();
        let goal = grid_node(3, 1);
        let mut buf = Vec::new();
        for s in 0..25 {
            for a in 0..5 {
                buf.push(tuple(&enc, s, a, g.step(s, a), goal));
            }
        }
        let q = tabular_q_train(&buf, &QTrainConfig::default(), &mut substream(0, "q", 0)).unwrap();
        let oracle = Oracle::new(&g, goal);
        for s in 0..25 {
            let v = q.q_values(enc.encode(s));
            let best = (0..5).fold(0, |b, a| if v[a] > v[b] { a } else { b });
            assert!(oracle.is_optimal(s, best), "state {s}: {v:?}");
        }
    }
}
