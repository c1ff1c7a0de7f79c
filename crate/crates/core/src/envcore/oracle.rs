//! Shortest-path oracle policy on a known graph and goal.

use rand::Rng as _;

use super::graph::LatentGraph;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub goal: usize,
    pub distance_to_goal: Vec<u32>,
    /// Bitmask of optimal actions per node.
    optimal: Vec<u8>,
}

impl Oracle {
    pub fn new(graph: &LatentGraph, goal: usize) -> Self {
        let n = graph.node_count;
        let stay = graph.suite.stay();
        let distance_to_goal: Vec<u32> = (0..n).map(|s| graph.distance(s, goal)).collect();
        let optimal = (0..n)
            .map(|s| {
                if s == goal {
                    return 1u8 << stay;
                }
                let best = (0..graph.action_count)
                    .map(|a| distance_to_goal[graph.step(s, a)])
                    .min()
                    .unwrap_or(u32::MAX);
                (0..graph.action_count)
                    .filter(|&a| distance_to_goal[graph.step(s, a)] == best)
                    .fold(0u8, |m, a| m | (1 << a))
            })
            .collect();
        Oracle {
            goal,
            distance_to_goal,
            optimal,
        }
    }

    pub fn is_optimal(&self, node: usize, action: usize) -> bool {
        self.optimal[node] & (1 << action) != 0
    }

    pub fn optimal_actions(&self, node: usize) -> Vec<usize> {
        (0..8).filter(|&a| self.is_optimal(node, a)).collect()
    }

    pub fn optimal_mask(&self, node: usize) -> u8 {
        self.optimal[node]
    }

    /// Lowest-index optimal action.
    pub fn first_action(&self, node: usize) -> usize {
        self.optimal[node].trailing_zeros() as usize
    }

    /// Uniform draw among the optimal actions.
    pub fn sample_action(&self, node: usize, rng: &mut Rng) -> usize {
        let acts = self.optimal_actions(node);
        acts[rng.random_range(0..acts.len())]
    }

    /// Return collected by following the oracle for `horizon` steps:
    /// reward on each step that ends at the goal.
    pub fn oracle_return(&self, node: usize, horizon: usize) -> usize {
        match self.distance_to_goal[node] as usize {
            0 => horizon,
            d if d <= horizon => horizon + 1 - d,
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::graph::{build_gridworld_graph, full_tree, grid, grid_node, tree};
    use std::collections::VecDeque;

    /// Independent BFS from the goal over the reversed transition relation.
    fn bfs_to_goal(g: &LatentGraph, goal: usize) -> Vec<u32> {
        let n = g.node_count;
        let mut d = vec![u32::MAX; n];
        d[goal] = 0;
        let mut q = VecDeque::from([goal]);
        while let Some(v) = q.pop_front() {
            for u in 0..n {
                for a in 0..g.action_count {
                    if g.step(u, a) == v && d[u] == u32::MAX {
                        d[u] = d[v] + 1;
                        q.push_back(u);
                    }
                }
            }
        }
        d
    }

    #[test]
    fn goal_is_fixed_point() {
        let g = build_gridworld_graph();
        let o = Oracle::new(&g, 12);
        assert_eq!(o.optimal_actions(12), vec![grid::STAY]);
    }

    #[test]
    fn grid_example() {
        let g = build_gridworld_graph();
        let o = Oracle::new(&g, grid_node(3, 3));
        let d = bfs_to_goal(&g, grid_node(3, 3));
        let q = grid_node(1, 1);
        let brute: Vec<usize> = (0..g.action_count)
            .filter(|&a| d[g.step(q, a)] + 1 == d[q])
            .collect();
        assert_eq!(o.optimal_actions(q), brute);
        assert_eq!(o.optimal_actions(q), vec![grid::UP, grid::RIGHT]);
    }

    #[test]
    fn optimal_actions_decrease_distance() {
        let g = full_tree();
        for goal in [g.leaves()[0], g.leaves()[40]] {
            let o = Oracle::new(&g, goal);
            let d = bfs_to_goal(&g, goal);
            for n in 0..g.node_count {
                assert_eq!(o.distance_to_goal[n], d[n]);
                if n == goal {
                    continue;
                }
                for a in o.optimal_actions(n) {
                    assert_eq!(d[g.step(n, a)] + 1, d[n]);
                }
            }
        }
    }

    #[test]
    fn tree_has_six_child_move_states() {
        let g = full_tree();
        let goal = g.leaves()[17];
        let o = Oracle::new(&g, goal);
        let count = (0..g.node_count)
            .filter(|&n| n != goal)
            .filter(|&n| o.is_optimal(n, tree::LEFT_CHILD) || o.is_optimal(n, tree::RIGHT_CHILD))
            .count();
        assert_eq!(count, 6);
    }

    #[test]
    fn oracle_return_counts_stay_collection() {
        let g = build_gridworld_graph();
        let o = Oracle::new(&g, 0);
        assert_eq!(o.oracle_return(0, 15), 15);
        assert_eq!(o.oracle_return(grid_node(4, 4), 15), 8);
        assert_eq!(o.oracle_return(grid_node(4, 4), 8), 1);
        assert_eq!(o.oracle_return(grid_node(4, 4), 7), 0);
    }
}
