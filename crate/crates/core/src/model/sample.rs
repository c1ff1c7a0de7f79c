//! Action selection from logits.

use rand::Rng as _;

use crate::rng::Rng;

/// Index of the largest logit; ties go to the lowest index.
pub fn greedy(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-12);
    let mx = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| ((v as f64 - mx) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = mx + logits.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// Draws an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Softmax { temperature: f64 },
}

pub fn select_action(logits: &[f32], decoding: Decoding, rng: &mut Rng) -> usize {
    match decoding {
        Decoding::Greedy => greedy(logits),
        Decoding::Softmax { temperature } => sample_categorical(&softmax(logits, temperature), rng),
    }
}
