//! Biased exploratory random walks that produce the in-context data.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{tree, LatentGraph, Suite};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One transition in node-id form. Encodings are attached by the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub s: u16,
    pub a: u8,
    pub s_next: u16,
    pub r: bool,
}

impl Step {
    pub fn state(&self) -> usize {
        self.s as usize
    }
    pub fn next_state(&self) -> usize {
        self.s_next as usize
    }
    pub fn action(&self) -> usize {
        self.a as usize
    }
    pub fn involves(&self, node: usize) -> bool {
        self.state() == node || self.next_state() == node
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkConfig {
    /// Weight of the stay action relative to a move.
    pub stay_weight: f64,
    /// Tree only: multiplier on the child move opposite to the last child move.
    pub alternation: f64,
    /// Tree only: multiplier on the move returning to the previous state.
    pub backtrack: f64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            stay_weight: 0.5,
            alternation: 2.0,
            backtrack: 0.5,
        }
    }
}

/// Runs a length-`len` walk from `start`. Actions that bounced off a wall
/// get weight zero until the walk enters a new state.
pub fn exploration_walk(
    rng: &mut Rng,
    graph: &LatentGraph,
    goal: usize,
    start: usize,
    len: usize,
    config: &WalkConfig,
) -> Result<Vec<Step>> {
    if len == 0 {
        return Err(Error::invalid("walk length must be at least 1"));
    }
    if start >= graph.node_count || goal >= graph.node_count {
        return Err(Error::invalid("start or goal outside the graph"));
    }
    let nact = graph.action_count;
    let stay = graph.suite.stay();
    let is_tree = graph.suite == Suite::Tree;

    let mut out = Vec::with_capacity(len);
    let mut cur = start;
    let mut blocked = vec![false; nact];
    let mut prev_node: Option<usize> = None;
    let mut last_child: Option<usize> = None;
    let mut weights = vec![0.0f64; nact];

    for _ in 0..len {
        for (a, w) in weights.iter_mut().enumerate() {
            *w = if a == stay {
                config.stay_weight
            } else if blocked[a] {
                0.0
            } else {
                1.0
            };
        }
        if is_tree {
            if let Some(lc) = last_child {
                let opposite = if lc == tree::LEFT_CHILD {
                    tree::RIGHT_CHILD
                } else {
                    tree::LEFT_CHILD
                };
                weights[opposite] *= config.alternation;
            }
            if let Some(p) = prev_node {
                for a in 0..nact {
                    if a != stay && graph.step(cur, a) == p {
                        weights[a] *= config.backtrack;
                    }
                }
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("all walk action weights are zero"));
        }
        let mut u = rng.random::<f64>() * total;
        let mut action = nact - 1;
        for (a, &w) in weights.iter().enumerate() {
            if u < w {
                action = a;
                break;
            }
            u -= w;
        }
        // guard against landing on a zero-weight tail after rounding
        if weights[action] == 0.0 {
            action = stay;
        }

        let next = graph.step(cur, action);
        out.push(Step {
            s: cur as u16,
            a: action as u8,
            s_next: next as u16,
            r: next == goal,
        });
        if next == cur {
            if action != stay {
                blocked[action] = true;
            }
        } else {
            blocked.iter_mut().for_each(|b| *b = false);
            prev_node = Some(cur);
            if is_tree && (action == tree::LEFT_CHILD || action == tree::RIGHT_CHILD) {
                last_child = Some(action);
            }
            cur = next;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::graph::{build_gridworld_graph, full_tree, grid, grid_node};
    use crate::rng::substream;

    #[test]
    fn length_and_start() {
        let g = build_gridworld_graph();
        let w = exploration_walk(&mut substream(0, "w", 0), &g, 0, 7, 1, &WalkConfig::default())
            .unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].state(), 7);
        assert!(exploration_walk(&mut substream(0, "w", 0), &g, 0, 7, 0, &WalkConfig::default())
            .is_err());
    }

    #[test]
    fn consistent_with_graph_and_reward() {
        let g = full_tree();
        let goal = g.leaves()[3];
        let w = exploration_walk(&mut substream(1, "w", 0), &g, goal, 0, 2000, &WalkConfig::default())
            .unwrap();
        assert_eq!(w[0].state(), 0);
        for pair in w.windows(2) {
            assert_eq!(pair[0].next_state(), pair[1].state());
        }
        for st in &w {
            assert_eq!(g.step(st.state(), st.action()), st.next_state());
            assert_eq!(st.r, st.next_state() == goal);
        }
    }

    #[test]
    fn blocked_action_not_repeated_before_leaving() {
        let g = build_gridworld_graph();
        let w = exploration_walk(
            &mut substream(2, "w", 0),
            &g,
            12,
            grid_node(0, 0),
            10_000,
            &WalkConfig::default(),
        )
        .unwrap();
        let mut bounced: Vec<usize> = Vec::new();
        let mut hits = 0;
        for st in &w {
            if bounced.contains(&st.action()) {
                panic!("blocked action {} repeated at node {}", st.action(), st.state());
            }
            if st.state() == st.next_state() {
                if st.action() != grid::STAY {
                    bounced.push(st.action());
                    hits += 1;
                }
            } else {
                bounced.clear();
            }
        }
        assert!(hits > 100, "walk should hit walls regularly ({hits})");
    }

    #[test]
    fn stay_frequency_in_interior() {
        // interior cells never block, so stay has weight 0.5 of 4.5
        let g = build_gridworld_graph();
        let mut rng = substream(3, "w", 0);
        let mut interior = 0usize;
        let mut stays = 0usize;
        let mut start = grid_node(2, 2);
        while interior < 100_000 {
            let w = exploration_walk(&mut rng, &g, 0, start, 1000, &WalkConfig::default()).unwrap();
            let mut blocked_here = false;
            for st in &w {
                let (x, y) = g.grid_xy(st.state()).unwrap();
                let inner = (1..4).contains(&x) && (1..4).contains(&y);
                // a stay after a wall bounce cannot happen in the interior,
                // but staying itself does not reset the blocked set
                if inner && !blocked_here {
                    interior += 1;
                    if st.action() == grid::STAY {
                        stays += 1;
                    }
                }
                if st.state() != st.next_state() {
                    blocked_here = false;
                } else if st.action() != grid::STAY {
                    blocked_here = true;
                }
            }
            start = w.last().unwrap().next_state();
        }
        let freq = stays as f64 / interior as f64;
        assert!((freq - 1.0 / 9.0).abs() < 0.01, "stay frequency {freq}");
    }
}
