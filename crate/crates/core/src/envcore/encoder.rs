//! Spatially correlated random sensory encodings.

use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::LatentGraph;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const ENCODING_DIM: usize = 10;

pub type Encoding = [f32; ENCODING_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEncoder {
    pub sigma: f64,
    /// `ENCODING_DIM x node_count`, row-major.
    pub expansion: Vec<f64>,
    pub encodings: Vec<Encoding>,
}

impl StateEncoder {
    pub fn node_count(&self) -> usize {
        self.encodings.len()
    }

    pub fn encode(&self, node: usize) -> &Encoding {
        &self.encodings[node]
    }

    /// Lookup table inverting the encoder by exact bit match.
    pub fn decoder(&self) -> EncodingIndex {
        EncodingIndex::new(&self.encodings)
    }

    /// Rebuilds an encoder from stored encodings alone (the expansion matrix
    /// is not persisted).
    pub fn from_encodings(sigma: f64, encodings: Vec<Encoding>) -> Self {
        StateEncoder {
            sigma,
            expansion: Vec::new(),
            encodings,
        }
    }
}

/// Correlation kernel `sigma^d` with `0^0 = 1`.
pub fn kernel(sigma: f64, d: f64) -> f64 {
    if d == 0.0 {
        1.0
    } else {
        sigma.powf(d)
    }
}

pub fn make_state_encoder(rng: &mut Rng, graph: &LatentGraph, sigma: f64) -> Result<StateEncoder> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid("sigma must lie in [0, 1]"));
    }
    let n = graph.node_count;
    let mut dmat = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            dmat[i * n + j] = kernel(sigma, graph.kernel_distance(i, j));
        }
    }
    loop {
        let expansion: Vec<f64> = (0..ENCODING_DIM * n)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let mut encodings = Vec::with_capacity(n);
        let mut degenerate = false;
        for col in 0..n {
            let mut v = [0.0f64; ENCODING_DIM];
            for (r, vr) in v.iter_mut().enumerate() {
                *vr = (0..n).map(|k| expansion[r * n + k] * dmat[k * n + col]).sum();
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                degenerate = true;
                break;
            }
            let mut e = [0.0f32; ENCODING_DIM];
            for (dst, src) in e.iter_mut().zip(v.iter()) {
                *dst = (src / norm) as f32;
            }
            encodings.push(e);
        }
        if !degenerate {
            return Ok(StateEncoder {
                sigma,
                expansion,
                encodings,
            });
        }
    }
}

/// Exact-match map from encoding bits to node id.
#[derive(Debug, Clone, Default)]
pub struct EncodingIndex {
    map: HashMap<[u32; ENCODING_DIM], usize>,
}

pub fn encoding_key(e: &[f32]) -> [u32; ENCODING_DIM] {
    let mut k = [0u32; ENCODING_DIM];
    for (dst, src) in k.iter_mut().zip(e.iter()) {
        *dst = src.to_bits();
    }
    k
}

impl EncodingIndex {
    pub fn new(encodings: &[Encoding]) -> Self {
        let map = encodings
            .iter()
            .enumerate()
            .map(|(i, e)| (encoding_key(e), i))
            .collect();
        EncodingIndex { map }
    }

    pub fn lookup(&self, e: &[f32]) -> Option<usize> {
        self.map.get(&encoding_key(e)).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::graph::{build_gridworld_graph, full_tree};
    use crate::rng::substream;

    fn norm(e: &Encoding) -> f64 {
        e.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    #[test]
    fn unit_norm() {
        let g = build_gridworld_graph();
        for sigma in [0.0, 0.5, 0.8, 1.0] {
            let enc = make_state_encoder(&mut substream(0, "enc", 0), &g, sigma).unwrap();
            for e in &enc.encodings {
                assert!((norm(e) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sigma_zero_is_normalized_expansion() {
        let g = build_gridworld_graph();
        let enc = make_state_encoder(&mut substream(1, "enc", 0), &g, 0.0).unwrap();
        let n = g.node_count;
        for col in 0..n {
            let v: Vec<f64> = (0..ENCODING_DIM).map(|r| enc.expansion[r * n + col]).collect();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for r in 0..ENCODING_DIM {
                assert!(((v[r] / nv) as f32 - enc.encodings[col][r]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic() {
        let g = full_tree();
        let a = make_state_encoder(&mut substream(5, "enc", 3), &g, 0.6).unwrap();
        let b = make_state_encoder(&mut substream(5, "enc", 3), &g, 0.6).unwrap();
        assert_eq!(a, b);
        let idx = a.decoder();
        for (i, e) in a.encodings.iter().enumerate() {
            assert_eq!(idx.lookup(e), Some(i));
        }
    }

    #[test]
    fn rejects_bad_sigma() {
        let g = build_gridworld_graph();
        assert!(make_state_encoder(&mut substream(0, "enc", 0), &g, 1.5).is_err());
    }
}
