//! Per-candidate Bayesian loop-closure filter.
//!
//! Every candidate image `i` carries its own binary hypothesis "the current
//! frame closes a loop with image `i`". Each frame, the previous posteriors
//! are propagated through a neighborhood transition model, weighted by a
//! likelihood derived from the current similarity scores, and normalized
//! against a fixed null likelihood. Several candidates may exceed the
//! detection threshold at once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::ScoreVector;

/// How the likelihood branches on the score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodMode {
    /// Scores at or above `mean + std` get `(score - std) / mean`, others 1.
    #[default]
    Corrected,
    /// Scores at or below `mean + std` get `(score - std) / mean` (clamped at
    /// zero), others 1. Kept for comparison; it can never favour a loop.
    Literal,
}

/// How the five neighboring marginals combine into one probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborhoodMode {
    #[default]
    Max,
    /// `1 - Π(1 - p_j)`, treating neighbors as independent.
    NoisyOr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BayesParams {
    /// P(loop at i | loop in neighborhood).
    pub p_stay: f64,
    /// P(loop at i | no loop in neighborhood).
    pub p_leak: f64,
    /// Neighborhood half-width.
    pub window: usize,
    /// Fixed likelihood of the no-loop hypothesis.
    pub l0: f64,
    /// Detection threshold.
    pub p0: f64,
    /// Previous-frame posterior assumed for a candidate that just became eligible.
    pub prior_new: f64,
    pub likelihood: LikelihoodMode,
    pub neighborhood: NeighborhoodMode,
}

impl Default for BayesParams {
    fn default() -> Self {
        Self {
            p_stay: 0.9,
            p_leak: 0.1,
            window: 2,
            l0: 1.0,
            p0: 0.7,
            prior_new: 0.1,
            likelihood: LikelihoodMode::Corrected,
            neighborhood: NeighborhoodMode::Max,
        }
    }
}

impl BayesParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "{name} = {v} is not in [0, 1]"
                )))
            }
        };
        unit("p_stay", self.p_stay)?;
        unit("p_leak", self.p_leak)?;
        unit("p0", self.p0)?;
        unit("prior_new", self.prior_new)?;
        if (self.p_stay + self.p_leak - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "p_stay + p_leak must be 1, got {}",
                self.p_stay + self.p_leak
            )));
        }
        if !(self.l0 > 0.0 && self.l0.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "l0 = {} must be positive",
                self.l0
            )));
        }
        Ok(())
    }
}

/// Loop-closure posteriors for the eligible candidates at frame `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub posterior: Vec<f64>,
    pub t: usize,
}

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.posterior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posterior.is_empty()
    }
}

/// Probability that some candidate within the window around `i` closed a
/// loop at the previous frame.
pub fn neighborhood_prob(prev: &BeliefState, i: usize, params: &BayesParams) -> f64 {
    window_prob(&prev.posterior, i, params)
}

fn window_prob(prev: &[f64], i: usize, params: &BayesParams) -> f64 {
    if prev.is_empty() {
        return params.prior_new;
    }
    let lo = i.saturating_sub(params.window);
    let hi = (i + params.window).min(prev.len() - 1);
    if lo > hi {
        return params.prior_new;
    }
    let window = &prev[lo..=hi];
    match params.neighborhood {
        NeighborhoodMode::Max => window.iter().copied().fold(0.0, f64::max),
        NeighborhoodMode::NoisyOr => 1.0 - window.iter().map(|p| 1.0 - p).product::<f64>(),
    }
}

/// Predicted `(B(0), B(1))` given the neighborhood probability.
pub fn belief(p_nbr: f64, params: &BayesParams) -> (f64, f64) {
    let b1 = params.p_stay * p_nbr + params.p_leak * (1.0 - p_nbr);
    let b0 = params.p_leak * p_nbr + params.p_stay * (1.0 - p_nbr);
    (b0, b1)
}

/// Loop likelihood of every candidate from the mean and population standard
/// deviation of the score sequence. Degenerate sequences (fewer than two
/// entries, zero mean, or zero spread) yield all ones.
pub fn likelihood(scores: &ScoreVector, mode: LikelihoodMode) -> Vec<f64> {
    let s = scores.as_slice();
    let n = s.len();
    if n < 2 {
        return vec![1.0; n];
    }
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if mean <= 0.0 || std <= 0.0 {
        return vec![1.0; n];
    }
    let boundary = mean + std;
    s.iter()
        .map(|&x| match mode {
            LikelihoodMode::Corrected if x >= boundary => (x - std) / mean,
            LikelihoodMode::Literal if x <= boundary => ((x - std) / mean).max(0.0),
            _ => 1.0,
        })
        .collect()
}

/// Normalized posterior of one candidate. `belief` must sum to one, as the
/// output of [`belief`] does; equal likelihoods then return `B(1)` unchanged.
pub fn posterior_probability(l1: f64, belief: (f64, f64), l0: f64) -> f64 {
    let (b0, b1) = belief;
    if l1 == l0 && l1 > 0.0 {
        return b1;
    }
    let num = l1 * b1;
    let den = num + l0 * b0;
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Advances the filter by one frame. `scores` covers every candidate eligible
/// now; candidates beyond `prev.len()` are new and start from `prior_new`.
pub fn posterior_update(
    prev: &BeliefState,
    scores: &ScoreVector,
    params: &BayesParams,
) -> BeliefState {
    let l1 = likelihood(scores, params.likelihood);
    update_with_likelihood(prev, &l1, params)
}

/// Same as [`posterior_update`] with precomputed likelihoods.
pub fn update_with_likelihood(prev: &BeliefState, l1: &[f64], params: &BayesParams) -> BeliefState {
    let n = l1.len();
    let mut extended = prev.posterior.clone();
    extended.truncate(n);
    extended.resize(n, params.prior_new);

    let posterior = l1
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let b = belief(window_prob(&extended, i, params), params);
            posterior_probability(l, b, params.l0)
        })
        .collect();
    BeliefState {
        posterior,
        t: prev.t + 1,
    }
}

/// Candidates whose posterior exceeds `p0`.
pub fn detect(state: &BeliefState, params: &BayesParams) -> Vec<usize> {
    state
        .posterior
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > params.p0)
        .map(|(i, _)| i)
        .collect()
}
