//! Batch loss and gradients.

use super::params::ModelParams;
use super::scalar::Scalar;
use super::tokens::TokenSequence;
use super::transformer::{backward, cross_entropy, forward_acts};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A supervised sequence: one label per query position, in order.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub seq: &'a TokenSequence,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct BatchResult<T> {
    pub grads: Vec<T>,
    /// Mean cross-entropy over all query positions of the batch.
    pub loss: f64,
    pub positions: usize,
    /// Argmax prediction at every query position, batch order.
    pub predictions: Vec<usize>,
}

/// Mean cross-entropy over the query positions of `batch` and its gradient
/// with respect to every parameter.
pub fn gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[Example<'_>],
    mut dropout_rng: Option<&mut Rng>,
) -> Result<BatchResult<T>> {
    let positions: usize = batch.iter().map(|e| e.seq.query_positions.len()).sum();
    if positions == 0 {
        return Err(Error::EmptySelection("batch has no query positions".into()));
    }
    let na = params.config.action_count;
    let weight = T::lit(1.0 / positions as f64);
    let mut grads = vec![T::zero(); params.data.len()];
    let mut total = 0.0;
    let mut predictions = Vec::with_capacity(positions);
    for ex in batch {
        if ex.labels.len() != ex.seq.query_positions.len() {
            return Err(Error::invalid("one label per query position required"));
        }
        if let Some(&bad) = ex.labels.iter().find(|&&l| l >= na) {
            return Err(Error::invalid(format!("label {bad} out of range")));
        }
        let tokens: Vec<T> = ex.seq.tokens.iter().map(|&v| T::lit(v as f64)).collect();
        let acts = forward_acts(params, &tokens, &ex.seq.mask(), &[], dropout_rng.as_deref_mut())?;
        let mut dl = vec![T::zero(); acts.logits.len()];
        total += cross_entropy(&acts.logits, na, &ex.seq.query_positions, ex.labels, weight, &mut dl);
        for &pos in &ex.seq.query_positions {
            let row = &acts.logits[pos * na..(pos + 1) * na];
            let mut best = 0;
            for a in 1..na {
                if row[a] > row[best] {
                    best = a;
                }
            }
            predictions.push(best);
        }
        backward(params, &acts, &dl, &mut grads, false);
    }
    let loss = total / positions as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged { epoch: 0, loss });
    }
    Ok(BatchResult {
        grads,
        loss,
        positions,
        predictions,
    })
}
