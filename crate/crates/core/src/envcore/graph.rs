//! Latent graphs: the hidden transition structure of a task.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const GRID_SIDE: usize = 5;
pub const GRID_ACTIONS: usize = 5;
pub const TREE_ACTIONS: usize = 4;
/// Number of layers in a full tree maze (root is layer 1).
pub const TREE_LAYERS: usize = 7;
pub const FULL_TREE_NODES: usize = (1 << TREE_LAYERS) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gridworld,
    Tree,
}

impl Suite {
    pub fn action_count(self) -> usize {
        match self {
            Suite::Gridworld => GRID_ACTIONS,
            Suite::Tree => TREE_ACTIONS,
        }
    }

    /// Index of the stay action; the last action in both suites.
    pub fn stay(self) -> usize {
        self.action_count() - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gridworld => "gridworld",
            Suite::Tree => "tree",
        }
    }
}

/// Gridworld actions.
pub mod grid {
    pub const UP: usize = 0;
    pub const RIGHT: usize = 1;
    pub const DOWN: usize = 2;
    pub const LEFT: usize = 3;
    pub const STAY: usize = 4;
}

/// Tree-maze actions.
pub mod tree {
    pub const RIGHT_CHILD: usize = 0;
    pub const LEFT_CHILD: usize = 1;
    pub const PARENT: usize = 2;
    pub const STAY: usize = 3;
}

/// Latent coordinate of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeMeta {
    /// Column `x`, row `y`; `up` increases `y`.
    Grid { x: usize, y: usize },
    /// Heap index in the full binary tree (root = 1, left child = 2h,
    /// right child = 2h + 1). Depth and the root path are both encoded in it.
    Tree { heap: u32 },
}

impl NodeMeta {
    pub fn depth(&self) -> usize {
        match self {
            NodeMeta::Grid { .. } => 0,
            NodeMeta::Tree { heap } => (31 - heap.leading_zeros()) as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGraph {
    pub suite: Suite,
    pub node_count: usize,
    pub action_count: usize,
    /// `transition[n * action_count + a]`
    transition: Vec<usize>,
    pub meta: Vec<NodeMeta>,
    /// All-pairs minimum action counts, row-major.
    distance: Vec<u32>,
}

impl LatentGraph {
    fn from_transitions(suite: Suite, meta: Vec<NodeMeta>, transition: Vec<usize>) -> Self {
        let node_count = meta.len();
        let action_count = suite.action_count();
        debug_assert_eq!(transition.len(), node_count * action_count);
        let mut g = LatentGraph {
            suite,
            node_count,
            action_count,
            transition,
            meta,
            distance: Vec::new(),
        };
        g.distance = g.all_pairs_bfs();
        g
    }

    fn all_pairs_bfs(&self) -> Vec<u32> {
        let n = self.node_count;
        let mut out = vec![u32::MAX; n * n];
        let mut queue = VecDeque::new();
        for src in 0..n {
            let row = &mut out[src * n..(src + 1) * n];
            row[src] = 0;
            queue.clear();
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                for a in 0..self.action_count {
                    let v = self.step(u, a);
                    if row[v] == u32::MAX {
                        row[v] = row[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
        }
        out
    }

    #[inline]
    pub fn step(&self, node: usize, action: usize) -> usize {
        self.transition[node * self.action_count + action]
    }

    /// Minimum number of actions from `a` to `b`.
    #[inline]
    pub fn distance(&self, a: usize, b: usize) -> u32 {
        self.distance[a * self.node_count + b]
    }

    /// Straight-line distance between grid coordinates. Trees fall back to
    /// the geodesic distance.
    pub fn euclid_distance(&self, a: usize, b: usize) -> f64 {
        match (self.meta[a], self.meta[b]) {
            (NodeMeta::Grid { x: x1, y: y1 }, NodeMeta::Grid { x: x2, y: y2 }) => {
                let dx = x1 as f64 - x2 as f64;
                let dy = y1 as f64 - y2 as f64;
                (dx * dx + dy * dy).sqrt()
            }
            _ => self.distance(a, b) as f64,
        }
    }

    /// Distance used by the sensory kernel: Euclidean on grids, geodesic on trees.
    pub fn kernel_distance(&self, a: usize, b: usize) -> f64 {
        match self.suite {
            Suite::Gridworld => self.euclid_distance(a, b),
            Suite::Tree => self.distance(a, b) as f64,
        }
    }

    pub fn is_full_tree(&self) -> bool {
        self.suite == Suite::Tree && self.node_count == FULL_TREE_NODES
    }

    /// Nodes without any existing child. Only meaningful for trees.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.node_count)
            .filter(|&n| {
                self.step(n, tree::LEFT_CHILD) == n && self.step(n, tree::RIGHT_CHILD) == n
            })
            .collect()
    }

    pub fn heap_indices(&self) -> Option<Vec<u32>> {
        self.meta
            .iter()
            .map(|m| match m {
                NodeMeta::Tree { heap } => Some(*heap),
                NodeMeta::Grid { .. } => None,
            })
            .collect()
    }

    pub fn grid_xy(&self, node: usize) -> Option<(usize, usize)> {
        match self.meta[node] {
            NodeMeta::Grid { x, y } => Some((x, y)),
            NodeMeta::Tree { .. } => None,
        }
    }

    /// Root-to-`node` path in a tree, root first.
    pub fn tree_path_from_root(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while self.step(cur, tree::PARENT) != cur {
            cur = self.step(cur, tree::PARENT);
            path.push(cur);
        }
        path.reverse();
        path
    }
}

/// Node id of grid cell `(x, y)`.
pub fn grid_node(x: usize, y: usize) -> usize {
    y * GRID_SIDE + x
}

/// The fixed 5 x 5 gridworld. Moves off the board are self-loops.
pub fn build_gridworld_graph() -> LatentGraph {
    let n = GRID_SIDE * GRID_SIDE;
    let mut meta = Vec::with_capacity(n);
    let mut transition = vec![0usize; n * GRID_ACTIONS];
    for id in 0..n {
        let (x, y) = (id % GRID_SIDE, id / GRID_SIDE);
        meta.push(NodeMeta::Grid { x, y });
        let row = &mut transition[id * GRID_ACTIONS..(id + 1) * GRID_ACTIONS];
        row[grid::UP] = if y + 1 < GRID_SIDE { grid_node(x, y + 1) } else { id };
        row[grid::RIGHT] = if x + 1 < GRID_SIDE { grid_node(x + 1, y) } else { id };
        row[grid::DOWN] = if y > 0 { grid_node(x, y - 1) } else { id };
        row[grid::LEFT] = if x > 0 { grid_node(x - 1, y) } else { id };
        row[grid::STAY] = id;
    }
    LatentGraph::from_transitions(Suite::Gridworld, meta, transition)
}

/// Builds a tree maze from the heap indices of its nodes. The set must be
/// closed under taking parents and contain the root.
pub fn tree_from_heap_indices(heaps: &[u32]) -> Result<LatentGraph> {
    let mut sorted: Vec<u32> = heaps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.first() != Some(&1) {
        return Err(Error::invalid("tree must contain the root (heap index 1)"));
    }
    let max_heap = 1u32 << TREE_LAYERS;
    if sorted.iter().any(|&h| h >= max_heap) {
        return Err(Error::invalid("tree deeper than the maximum depth"));
    }
    let mut id_of = vec![usize::MAX; max_heap as usize];
    for (i, &h) in sorted.iter().enumerate() {
        id_of[h as usize] = i;
    }
    for &h in &sorted[1..] {
        if id_of[(h / 2) as usize] == usize::MAX {
            return Err(Error::invalid(format!("node {h} is missing its parent")));
        }
    }
    let n = sorted.len();
    let mut transition = vec![0usize; n * TREE_ACTIONS];
    let lookup = |h: u32| -> Option<usize> {
        if h < max_heap && id_of[h as usize] != usize::MAX {
            Some(id_of[h as usize])
        } else {
            None
        }
    };
    for (id, &h) in sorted.iter().enumerate() {
        let row = &mut transition[id * TREE_ACTIONS..(id + 1) * TREE_ACTIONS];
        row[tree::RIGHT_CHILD] = lookup(2 * h + 1).unwrap_or(id);
        row[tree::LEFT_CHILD] = lookup(2 * h).unwrap_or(id);
        row[tree::PARENT] = if h > 1 { lookup(h / 2).unwrap_or(id) } else { id };
        row[tree::STAY] = id;
    }
    let meta = sorted.iter().map(|&heap| NodeMeta::Tree { heap }).collect();
    Ok(LatentGraph::from_transitions(Suite::Tree, meta, transition))
}

pub fn full_tree() -> LatentGraph {
    let heaps: Vec<u32> = (1..=FULL_TREE_NODES as u32).collect();
    tree_from_heap_indices(&heaps).expect("full tree is well formed")
}

/// Heap indices of one branching-process draw (no rejection).
pub fn sample_tree_heaps(rng: &mut Rng, branch_prob: f64, layers: usize) -> Vec<u32> {
    let mut heaps = vec![1u32];
    let mut frontier = vec![1u32];
    for _ in 1..layers {
        let mut next = Vec::new();
        for &h in &frontier {
            // left, then right: order matters for stream reproducibility
            for child in [2 * h, 2 * h + 1] {
                if rng.random_bool(branch_prob) {
                    next.push(child);
                }
            }
        }
        heaps.extend_from_slice(&next);
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    heaps
}

/// Samples a tree maze, resampling until some node reaches the last layer.
pub fn sample_tree_graph(
    rng: &mut Rng,
    branch_prob: f64,
    layers: usize,
    max_attempts: usize,
) -> Result<LatentGraph> {
    if !(0.0..=1.0).contains(&branch_prob) {
        return Err(Error::invalid("branch_prob must lie in [0, 1]"));
    }
    if layers != TREE_LAYERS {
        return Err(Error::invalid(format!("tree mazes have {TREE_LAYERS} layers")));
    }
    let deepest = 1u32 << (layers - 1);
    for _ in 0..max_attempts {
        let heaps = sample_tree_heaps(rng, branch_prob, layers);
        if heaps.iter().any(|&h| h >= deepest) {
            return tree_from_heap_indices(&heaps);
        }
    }
    Err(Error::GenerationFailed {
        attempts: max_attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn grid_distances() {
        let g = build_gridworld_graph();
        assert_eq!(g.node_count, 25);
        assert_eq!(g.action_count, 5);
        assert_eq!(g.distance(grid_node(0, 0), grid_node(0, 0)), 0);
        assert_eq!(g.distance(grid_node(0, 0), grid_node(4, 4)), 8);
    }

    #[test]
    fn grid_walls_are_self_loops() {
        let g = build_gridworld_graph();
        for y in 0..GRID_SIDE {
            let n = grid_node(0, y);
            assert_eq!(g.step(n, grid::LEFT), n);
            let n = grid_node(4, y);
            assert_eq!(g.step(n, grid::RIGHT), n);
        }
        assert_eq!(g.step(grid_node(2, 0), grid::DOWN), grid_node(2, 0));
        assert_eq!(g.step(grid_node(2, 4), grid::UP), grid_node(2, 4));
        assert_eq!(g.step(grid_node(2, 2), grid::UP), grid_node(2, 3));
    }

    #[test]
    fn full_tree_shape() {
        let mut rng = substream(0, "t", 0);
        let g = sample_tree_graph(&mut rng, 1.0, TREE_LAYERS, 10).unwrap();
        assert_eq!(g.node_count, 127);
        assert!(g.is_full_tree());
        assert_eq!(g.leaves().len(), 64);
        // root is node 0 (heap 1) and has no parent
        assert_eq!(g.step(0, tree::PARENT), 0);
        assert_eq!(g.distance(0, g.leaves()[0]), 6);
    }

    #[test]
    fn sampled_trees_reach_last_layer() {
        let mut rng = substream(1, "t", 0);
        for _ in 0..50 {
            let g = sample_tree_graph(&mut rng, 0.9, TREE_LAYERS, 1000).unwrap();
            assert!(g.node_count <= FULL_TREE_NODES);
            assert!(g.meta.iter().any(|m| m.depth() == TREE_LAYERS - 1));
            for n in 0..g.node_count {
                for a in 0..g.action_count {
                    assert!(g.step(n, a) < g.node_count);
                }
            }
        }
    }

    #[test]
    fn rejection_budget() {
        let mut rng = substream(2, "t", 0);
        let err = sample_tree_graph(&mut rng, 0.0, TREE_LAYERS, 5).unwrap_err();
        assert!(matches!(err, Error::GenerationFailed { attempts: 5 }));
        assert!(sample_tree_graph(&mut rng, 1.5, TREE_LAYERS, 5).is_err());
    }

    #[test]
    fn heap_roundtrip_rejects_orphans() {
        assert!(tree_from_heap_indices(&[1, 3, 4]).is_err());
        assert!(tree_from_heap_indices(&[2, 4]).is_err());
        let g = tree_from_heap_indices(&[1, 3, 7]).unwrap();
        assert_eq!(g.node_count, 3);
        assert_eq!(g.step(0, tree::LEFT_CHILD), 0);
        assert_eq!(g.step(0, tree::RIGHT_CHILD), 1);
    }

    #[test]
    fn distance_is_metric() {
        let mut rng = substream(3, "t", 0);
        let g = sample_tree_graph(&mut rng, 0.9, TREE_LAYERS, 1000).unwrap();
        let n = g.node_count;
        for i in 0..n {
            assert_eq!(g.distance(i, i), 0);
            for j in 0..n {
                assert_eq!(g.distance(i, j), g.distance(j, i));
                for k in (0..n).step_by(7) {
                    assert!(g.distance(i, k) <= g.distance(i, j) + g.distance(j, k));
                }
            }
        }
    }
}
