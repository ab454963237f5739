//! Nucleus (top-p) and greedy token selection.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling settings for response generation.
///
/// `greedy` switches to pure argmax decoding; it is exposed explicitly rather
/// than as a temperature limit so deterministic runs consume no RNG draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    #[serde(default)]
    pub greedy: bool,
}

impl SamplingConfig {
    /// Nucleus sampling defaults: top_p 0.95, temperature 0.7.
    pub fn nucleus(seed: u64) -> Self {
        Self {
            top_p: 0.95,
            temperature: 0.7,
            max_new_tokens: 125,
            seed,
            greedy: false,
        }
    }

    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            top_p: 1.0,
            temperature: 1.0,
            max_new_tokens,
            seed: 0,
            greedy: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_p.is_nan() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(Error::ConfigError(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::ConfigError(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::ConfigError("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Argmax over a logits row; ties resolve to the lowest token id.
pub fn greedy_pick(logits: ArrayView1<'_, f64>) -> u32 {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

/// Picks one token by nucleus sampling, driven by a single uniform draw
/// `u` in [0, 1).
///
/// The nucleus is the smallest set of highest-probability tokens whose
/// cumulative mass reaches `top_p` (probability ties sort by ascending id so
/// the selection is total-order deterministic). The draw is mapped through
/// the renormalized CDF of that set.
pub fn nucleus_pick(logits: ArrayView1<'_, f64>, top_p: f64, temperature: f64, u: f64) -> u32 {
    let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut order: Vec<usize> = (0..exps.len()).collect();
    order.sort_by(|&a, &b| exps[b].partial_cmp(&exps[a]).unwrap().then(a.cmp(&b)));

    let mut nucleus_mass = 0.0;
    let mut nucleus_len = 0;
    for &idx in &order {
        nucleus_mass += exps[idx] / z;
        nucleus_len += 1;
        if nucleus_mass >= top_p {
            break;
        }
    }

    let target = u * nucleus_mass;
    let mut cum = 0.0;
    for &idx in order.iter().take(nucleus_len) {
        cum += exps[idx] / z;
        if cum > target {
            return idx as u32;
        }
    }
    order[nucleus_len - 1] as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn greedy_ties_break_to_lowest_id() {
        let logits = array![1.0, 3.0, 3.0, 0.0];
        assert_eq!(greedy_pick(logits.view()), 1);
    }

    #[test]
    fn nucleus_with_top_p_one_covers_full_vocab() {
        let logits = array![0.0, 0.0, 0.0, 0.0];
        // Uniform probabilities: quartile draws land in successive ids.
        assert_eq!(nucleus_pick(logits.view(), 1.0, 1.0, 0.10), 0);
        assert_eq!(nucleus_pick(logits.view(), 1.0, 1.0, 0.30), 1);
        assert_eq!(nucleus_pick(logits.view(), 1.0, 1.0, 0.60), 2);
        assert_eq!(nucleus_pick(logits.view(), 1.0, 1.0, 0.90), 3);
    }

    #[test]
    fn tiny_top_p_degenerates_to_argmax() {
        let logits = array![0.0, 5.0, 1.0];
        for u in [0.0, 0.5, 0.999] {
            assert_eq!(nucleus_pick(logits.view(), 1e-9, 1.0, u), 1);
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        assert!(SamplingConfig {
            top_p: 0.0,
            ..SamplingConfig::nucleus(0)
        }
        .validate()
        .is_err());
        assert!(SamplingConfig {
            top_p: 1.1,
            ..SamplingConfig::nucleus(0)
        }
        .validate()
        .is_err());
        assert!(SamplingConfig {
            temperature: 0.0,
            ..SamplingConfig::nucleus(0)
        }
        .validate()
        .is_err());
        assert!(SamplingConfig::nucleus(7).validate().is_ok());
    }
}
