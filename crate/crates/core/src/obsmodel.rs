//! Observation models: 1-D Gaussian mixtures over log classifier outputs.
//!
//! For every (state, action, predicate) triple a mixture is fitted by EM to
//! the log outputs the predicate sensor produced on validation frames of that
//! (state, action) pair. Component count is picked by BIC over K in {1,2,3}.
//! Sparse triples fall back tier by tier: pool over actions, then over the
//! whole validation set, then a flat density over the clamped log-output
//! range, so model lookup is total.

use crate::domain::DomainSpec;
use crate::par;
use crate::sensors::{LabeledFrame, PredicateSensorSet, PROB_EPS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Lower edge of the clamped log-output domain, `ln(PROB_EPS)`.
pub fn log_output_min() -> f64 {
    PROB_EPS.ln()
}

/// Upper edge of the clamped log-output domain, `ln(1 - PROB_EPS)`.
pub fn log_output_max() -> f64 {
    (1.0 - PROB_EPS).ln()
}

/// Log of a classifier output, clamped away from 0 and 1 first.
pub fn log_output(h: f64) -> f64 {
    h.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// Flat log-density spread over the clamped log-output range; the last
/// fallback tier when no data exists for a triple.
pub fn uniform_log_density() -> f64 {
    -(log_output_max() - log_output_min()).ln()
}

/// Variances never drop below this floor.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Minimum samples required before fitting a mixture to a triple.
pub const MIN_SAMPLES_PER_TRIPLE: usize = 8;

const EM_MAX_ITERS: usize = 200;
const EM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObsModelError {
    #[error("{n} samples cannot support a {k}-component mixture (need at least {})", 2 * k)]
    TooFewSamples { n: usize, k: usize },
    #[error("no feasible component count for {n} samples")]
    NoFeasibleComponents { n: usize },
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("unknown state `{0}` in validation data")]
    UnknownState(String),
    #[error("unknown action `{0}` in validation data")]
    UnknownAction(String),
}

/// A one-dimensional Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm1D {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Gmm1D {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Log density at `x` via log-sum-exp over components.
    pub fn logpdf(&self, x: f64) -> f64 {
        let mut terms = Vec::with_capacity(self.components());
        for k in 0..self.components() {
            if self.weights[k] <= 0.0 {
                continue;
            }
            let var = self.variances[k];
            let d = x - self.means[k];
            terms.push(
                self.weights[k].ln()
                    - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
                    - d * d / (2.0 * var),
            );
        }
        log_sum_exp(&terms)
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

/// EM fit with the per-iteration log-likelihood trace exposed.
pub fn em_fit_traced(
    samples: &[f64],
    k: usize,
    seed: u64,
) -> Result<(Gmm1D, Vec<f64>), ObsModelError> {
    let n = samples.len();
    if n < 2 * k || k == 0 {
        return Err(ObsModelError::TooFewSamples { n, k });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means_init = kmeanspp_centers(samples, k, &mut rng);
    let global_var = sample_variance(samples).max(VARIANCE_FLOOR);

    let mut weights = vec![1.0 / k as f64; k];
    let mut means = means_init;
    let mut variances = vec![global_var; k];

    let mut trace = Vec::new();
    let mut resp = vec![0.0; n * k];

    for _ in 0..=EM_MAX_ITERS {
        // E step and total log-likelihood under current parameters.
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|c| weights[c].ln() + log_normal(x, means[c], variances[c]))
                .collect();
            let norm = log_sum_exp(&logs);
            ll += norm;
            for c in 0..k {
                resp[i * k + c] = (logs[c] - norm).exp();
            }
        }
        let converged = trace
            .last()
            .map(|&prev: &f64| (ll - prev).abs() < EM_TOL)
            .unwrap_or(false);
        trace.push(ll);
        if converged || trace.len() > EM_MAX_ITERS {
            break;
        }

        // M step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            weights[c] = nk / n as f64;
            if nk < 1e-12 {
                variances[c] = VARIANCE_FLOOR;
                continue;
            }
            let mu: f64 = (0..n).map(|i| resp[i * k + c] * samples[i]).sum::<f64>() / nk;
            let var: f64 = (0..n)
                .map(|i| resp[i * k + c] * (samples[i] - mu) * (samples[i] - mu))
                .sum::<f64>()
                / nk;
            means[c] = mu;
            variances[c] = var.max(VARIANCE_FLOOR);
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
    }

    Ok((
        Gmm1D {
            weights,
            means,
            variances,
        },
        trace,
    ))
}

/// Fit a `k`-component mixture by EM with seeded k-means++ initialization.
pub fn em_fit(samples: &[f64], k: usize, seed: u64) -> Result<Gmm1D, ObsModelError> {
    em_fit_traced(samples, k, seed).map(|(m, _)| m)
}

fn sample_variance(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

fn kmeanspp_centers(samples: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k);
    centers.push(*samples.choose(rng).expect("non-empty checked by caller"));
    while centers.len() < k {
        let d2: Vec<f64> = samples
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| (x - c) * (x - c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // All mass already covered; replicate the first center.
            centers.push(centers[0]);
            continue;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut chosen = samples.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            target -= d;
            if target <= 0.0 {
                chosen = i;
                break;
            }
        }
        centers.push(samples[chosen]);
    }
    centers
}

/// Fit K in {1, 2, 3} (where feasible) and keep the minimum-BIC model.
/// BIC = -2 LL + p ln n with p = 3K - 1; ties resolve to the smaller K.
pub fn select_components(samples: &[f64], seed: u64) -> Result<Gmm1D, ObsModelError> {
    let n = samples.len();
    let mut best: Option<(f64, Gmm1D)> = None;
    for k in 1..=3usize {
        if n < 2 * k {
            break;
        }
        let (model, trace) = em_fit_traced(samples, k, par::derive_seed(seed, k as u64))?;
        let ll = *trace.last().expect("trace never empty");
        let p = (3 * k - 1) as f64;
        let bic = -2.0 * ll + p * (n as f64).ln();
        if best.as_ref().map(|(b, _)| bic < *b).unwrap_or(true) {
            best = Some((bic, model));
        }
    }
    best.map(|(_, m)| m)
        .ok_or(ObsModelError::NoFeasibleComponents { n })
}

// ---------------------------------------------------------------------------
// Observation model set with fallback tiers
// ---------------------------------------------------------------------------

/// How a triple's density was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FallbackTier {
    /// Fitted on that (state, action) pair's samples.
    Specific,
    /// Pooled over actions for the state.
    StatePredicate,
    /// Pooled over the whole validation set for the predicate.
    GlobalPredicate,
    /// Flat density over the clamped log-output range.
    Uniform,
}

/// Density for one (state, action, predicate) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsEntry {
    pub tier: FallbackTier,
    /// Absent exactly when `tier` is `Uniform`.
    pub gmm: Option<Gmm1D>,
}

impl ObsEntry {
    pub fn log_density(&self, x: f64) -> f64 {
        match &self.gmm {
            Some(g) => g.logpdf(x),
            None => uniform_log_density(),
        }
    }
}

/// Dense map (state, action, predicate) -> density, with total lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModelSet {
    pub state_ids: Vec<String>,
    pub action_ids: Vec<String>,
    pub predicate_ids: Vec<String>,
    /// Row-major over (state, action, predicate).
    pub entries: Vec<ObsEntry>,
    pub seed: u64,
    pub min_samples: usize,
}

impl ObservationModelSet {
    fn index(&self, s: usize, a: usize, p: usize) -> usize {
        (s * self.action_ids.len() + a) * self.predicate_ids.len() + p
    }

    pub fn entry(&self, s: usize, a: usize, p: usize) -> &ObsEntry {
        &self.entries[self.index(s, a, p)]
    }

    /// Log density of observing log-output `x` from predicate `p` in state
    /// `s` under action `a`. Never fails: the fallback tiers are baked in.
    pub fn log_density(&self, s: usize, a: usize, p: usize, x: f64) -> f64 {
        self.entry(s, a, p).log_density(x)
    }

    /// Count of triples per fallback tier, ordered
    /// [specific, state-predicate, global, uniform].
    pub fn tier_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for e in &self.entries {
            let i = match e.tier {
                FallbackTier::Specific => 0,
                FallbackTier::StatePredicate => 1,
                FallbackTier::GlobalPredicate => 2,
                FallbackTier::Uniform => 3,
            };
            counts[i] += 1;
        }
        counts
    }
}

/// Fit observation models on validation data the sensors were not trained on.
///
/// Each triple with at least [`MIN_SAMPLES_PER_TRIPLE`] samples gets its own
/// BIC-selected mixture; sparser triples fall back to the (state, predicate)
/// pool, then the per-predicate global pool, then the flat density.
pub fn fit_observation_models(
    validation: &[LabeledFrame],
    sensors: &PredicateSensorSet,
    spec: &DomainSpec,
    seed: u64,
) -> Result<ObservationModelSet, ObsModelError> {
    if validation.is_empty() {
        return Err(ObsModelError::EmptyValidationSet);
    }
    let ns = spec.num_states();
    let na = spec.num_actions();
    let np = spec.num_predicates();

    // Per-frame log outputs for every predicate, plus group labels.
    let mut z = vec![0.0f64; validation.len() * np];
    let mut frame_state = vec![0usize; validation.len()];
    let mut frame_action = vec![0usize; validation.len()];
    for (i, lf) in validation.iter().enumerate() {
        frame_state[i] = spec
            .state_index(&lf.state_id)
            .ok_or_else(|| ObsModelError::UnknownState(lf.state_id.clone()))?;
        frame_action[i] = spec
            .action_index(&lf.frame.action_id)
            .ok_or_else(|| ObsModelError::UnknownAction(lf.frame.action_id.clone()))?;
        for (p, (pred, sensor)) in spec.predicates.iter().zip(&sensors.sensors).enumerate() {
            z[i * np + p] = log_output(sensor.predict_frame(&lf.frame, pred));
        }
    }

    let samples_for = |s: Option<usize>, a: Option<usize>, p: usize| -> Vec<f64> {
        (0..validation.len())
            .filter(|&i| s.map(|s| frame_state[i] == s).unwrap_or(true))
            .filter(|&i| a.map(|a| frame_action[i] == a).unwrap_or(true))
            .map(|i| z[i * np + p])
            .collect()
    };

    let entries = par::map_indexed(ns * na * np, |idx| {
        let p = idx % np;
        let a = (idx / np) % na;
        let s = idx / (np * na);

        let specific = samples_for(Some(s), Some(a), p);
        if specific.len() >= MIN_SAMPLES_PER_TRIPLE {
            let fit_seed = par::derive_seed_n(seed, &[0, s as u64, a as u64, p as u64]);
            return ObsEntry {
                tier: FallbackTier::Specific,
                gmm: Some(select_components(&specific, fit_seed).expect("feasible by count")),
            };
        }
        let pooled = samples_for(Some(s), None, p);
        if pooled.len() >= MIN_SAMPLES_PER_TRIPLE {
            let fit_seed = par::derive_seed_n(seed, &[1, s as u64, p as u64]);
            return ObsEntry {
                tier: FallbackTier::StatePredicate,
                gmm: Some(select_components(&pooled, fit_seed).expect("feasible by count")),
            };
        }
        let global = samples_for(None, None, p);
        if global.len() >= MIN_SAMPLES_PER_TRIPLE {
            let fit_seed = par::derive_seed_n(seed, &[2, p as u64]);
            return ObsEntry {
                tier: FallbackTier::GlobalPredicate,
                gmm: Some(select_components(&global, fit_seed).expect("feasible by count")),
            };
        }
        ObsEntry {
            tier: FallbackTier::Uniform,
            gmm: None,
        }
    });

    Ok(ObservationModelSet {
        state_ids: spec.states.iter().map(|s| s.id.clone()).collect(),
        action_ids: spec.actions.iter().map(|a| a.id.clone()).collect(),
        predicate_ids: spec.predicates.iter().map(|p| p.id.clone()).collect(),
        entries,
        seed,
        min_samples: MIN_SAMPLES_PER_TRIPLE,
    })
}
