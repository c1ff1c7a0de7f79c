//! Single-task Q-learning comparators trained on the in-context transitions
//! as a replay buffer.

pub mod dqn;
pub mod tabular;

pub use dqn::{dqn_train, DqnConfig, QNetwork};
pub use tabular::{tabular_q_train, QTable, QTrainConfig};

/// Anything that maps a state encoding to per-action values.
pub trait QFunction {
    fn q_values(&self, s: &[f32]) -> Vec<f64>;
}

/// Softmax over `values / temperature`.
pub fn q_policy(values: &[f64], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-300);
    let mx = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|&v| ((v - mx) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Temperatures searched per environment.
pub const TEMPERATURE_GRID: [f64; 7] = [0.005, 0.01, 0.05, 0.1, 0.2, 0.5, 10.0];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_limits() {
        let p = q_policy(&[0.1, 0.5, 0.3], 0.005);
        assert!(p[1] > 0.999);
        let p = q_policy(&[0.0, 1.0, 0.5, 0.2], 10.0);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 0.02));
        for t in TEMPERATURE_GRID {
            let p = q_policy(&[0.7, 0.2, 0.7], t);
            assert!((p[0] - p[2]).abs() < 1e-12);
        }
        let p = q_policy(&[0.4; 5], 0.01);
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-12));
    }
}
