//! Discrete Bayes filter over symbolic states.
//!
//! The belief is a probability vector over the domain states. Each frame it
//! is pushed through the action-conditioned transition model (predict) and
//! reweighted by the fused observation likelihood (correct): the product
//! over all predicates of the mixture density of each sensor's log output.
//! Correction runs in log space with max subtraction, and beliefs are floored
//! at [`BELIEF_FLOOR`] and renormalized after every step so a single outlier
//! observation can never extinguish a state permanently.

use crate::domain::DomainSpec;
use crate::obsmodel::{log_output, ObservationModelSet};
use crate::sensors::{LabeledFrame, ModalityMask, ObservationFrame, PredicateSensorSet};
use serde::{Deserialize, Serialize};

/// Belief entries never drop below this after floor-and-renormalize.
pub const BELIEF_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FilterError {
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("no trajectories provided")]
    NoTrajectories,
    #[error("belief has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Action-conditioned state transition probabilities plus the initial-state
/// prior, both estimated from visit counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub state_ids: Vec<String>,
    pub action_ids: Vec<String>,
    /// Row-major over (previous state, action, next state); each
    /// (previous state, action) row sums to 1.
    pub transitions: Vec<f64>,
    pub prior: Vec<f64>,
    pub alpha: f64,
}

impl TransitionModel {
    pub fn num_states(&self) -> usize {
        self.state_ids.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_ids.len()
    }

    pub fn row(&self, s_prev: usize, a: usize) -> &[f64] {
        let n = self.num_states();
        let start = (s_prev * self.num_actions() + a) * n;
        &self.transitions[start..start + n]
    }

    fn row_mut(&mut self, s_prev: usize, a: usize) -> &mut [f64] {
        let n = self.num_states();
        let start = (s_prev * self.num_actions() + a) * n;
        &mut self.transitions[start..start + n]
    }

    pub fn action_index(&self, id: &str) -> Option<usize> {
        self.action_ids.iter().position(|a| a == id)
    }
}

/// Normalized probability distribution over symbolic states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub p: Vec<f64>,
}

impl Belief {
    pub fn uniform(n: usize) -> Self {
        Belief {
            p: vec![1.0 / n as f64; n],
        }
    }

    /// Build from unnormalized non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Self {
        let mut b = Belief { p: weights };
        b.floor_renormalize();
        b
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Clamp entries up to [`BELIEF_FLOOR`] and rescale to sum 1.
    pub fn floor_renormalize(&mut self) {
        for v in &mut self.p {
            if !v.is_finite() || *v < BELIEF_FLOOR {
                *v = BELIEF_FLOOR;
            }
        }
        let total: f64 = self.p.iter().sum();
        for v in &mut self.p {
            *v /= total;
        }
    }
}

/// Estimate the transition model and prior from labeled trajectories with
/// add-alpha smoothing.
///
/// A transition (s_prev -> s) between consecutive frames is attributed to
/// the action recorded on the later frame, the one executed during that
/// step. Rows with no observations come out uniform for any alpha.
pub fn estimate_transitions<T: AsRef<[LabeledFrame]>>(
    trajectories: &[T],
    spec: &DomainSpec,
    alpha: f64,
) -> Result<TransitionModel, FilterError> {
    if trajectories.is_empty() {
        return Err(FilterError::NoTrajectories);
    }
    let ns = spec.num_states();
    let na = spec.num_actions();
    let mut counts = vec![0.0f64; ns * na * ns];
    let mut prior_counts = vec![0.0f64; ns];

    let state_idx = |id: &str| {
        spec.state_index(id)
            .ok_or_else(|| FilterError::UnknownState(id.to_string()))
    };
    let action_idx = |id: &str| {
        spec.action_index(id)
            .ok_or_else(|| FilterError::UnknownAction(id.to_string()))
    };

    for traj in trajectories {
        let frames = traj.as_ref();
        if frames.is_empty() {
            continue;
        }
        prior_counts[state_idx(&frames[0].state_id)?] += 1.0;
        for pair in frames.windows(2) {
            let s_prev = state_idx(&pair[0].state_id)?;
            let s_next = state_idx(&pair[1].state_id)?;
            let a = action_idx(&pair[1].frame.action_id)?;
            counts[(s_prev * na + a) * ns + s_next] += 1.0;
        }
    }

    let mut model = TransitionModel {
        state_ids: spec.states.iter().map(|s| s.id.clone()).collect(),
        action_ids: spec.actions.iter().map(|a| a.id.clone()).collect(),
        transitions: vec![0.0; ns * na * ns],
        prior: vec![0.0; ns],
        alpha,
    };

    for s_prev in 0..ns {
        for a in 0..na {
            let base = (s_prev * na + a) * ns;
            let total: f64 = (0..ns).map(|s| counts[base + s] + alpha).sum();
            let row = model.row_mut(s_prev, a);
            if total > 0.0 {
                for s in 0..ns {
                    row[s] = (counts[base + s] + alpha) / total;
                }
            } else {
                for v in row.iter_mut() {
                    *v = 1.0 / ns as f64;
                }
            }
        }
    }

    let prior_total: f64 = prior_counts.iter().map(|c| c + alpha).sum();
    if prior_total > 0.0 {
        for s in 0..ns {
            model.prior[s] = (prior_counts[s] + alpha) / prior_total;
        }
    } else {
        model.prior = vec![1.0 / ns as f64; ns];
    }

    Ok(model)
}

/// Push the belief through the transition model for one step of `action_id`.
pub fn predict_step(
    belief: &Belief,
    action_id: &str,
    tm: &TransitionModel,
) -> Result<Belief, FilterError> {
    let a = tm
        .action_index(action_id)
        .ok_or_else(|| FilterError::UnknownAction(action_id.to_string()))?;
    let ns = tm.num_states();
    if belief.len() != ns {
        return Err(FilterError::DimensionMismatch {
            expected: ns,
            got: belief.len(),
        });
    }
    let mut next = vec![0.0; ns];
    for s_prev in 0..ns {
        let mass = belief.p[s_prev];
        if mass == 0.0 {
            continue;
        }
        for (s, t) in tm.row(s_prev, a).iter().enumerate() {
            next[s] += t * mass;
        }
    }
    Ok(Belief::from_weights(next))
}

/// Per-state fused observation log-likelihoods for one frame: the sum over
/// admitted predicates of the mixture log-density of each sensor's log
/// output.
pub fn observation_log_weights(
    frame: &ObservationFrame,
    action_index: usize,
    sensors: &PredicateSensorSet,
    models: &ObservationModelSet,
    spec: &DomainSpec,
    mask: ModalityMask,
) -> Vec<f64> {
    let ns = spec.num_states();
    let z: Vec<Option<f64>> = spec
        .predicates
        .iter()
        .zip(&sensors.sensors)
        .map(|(pred, sensor)| {
            mask.admits(pred.modality)
                .then(|| log_output(sensor.predict_frame(frame, pred)))
        })
        .collect();

    (0..ns)
        .map(|s| {
            z.iter()
                .enumerate()
                .filter_map(|(p, z_p)| z_p.map(|z_p| models.log_density(s, action_index, p, z_p)))
                .sum()
        })
        .collect()
}

/// Reweight the belief by the fused observation likelihood of `frame`,
/// restricted to predicates of the admitted modalities.
pub fn correct_step_masked(
    belief: &Belief,
    frame: &ObservationFrame,
    action_id: &str,
    sensors: &PredicateSensorSet,
    models: &ObservationModelSet,
    spec: &DomainSpec,
    mask: ModalityMask,
) -> Result<Belief, FilterError> {
    let a = spec
        .action_index(action_id)
        .ok_or_else(|| FilterError::UnknownAction(action_id.to_string()))?;
    let lw = observation_log_weights(frame, a, sensors, models, spec, mask);
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = belief
        .p
        .iter()
        .zip(&lw)
        .map(|(b, l)| b * (l - max).exp())
        .collect();
    Ok(Belief::from_weights(weights))
}

/// [`correct_step_masked`] over all predicates.
pub fn correct_step(
    belief: &Belief,
    frame: &ObservationFrame,
    action_id: &str,
    sensors: &PredicateSensorSet,
    models: &ObservationModelSet,
    spec: &DomainSpec,
) -> Result<Belief, FilterError> {
    correct_step_masked(belief, frame, action_id, sensors, models, spec, ModalityMask::Both)
}

/// One full belief update: predict under the frame's action, then correct
/// with its observation.
pub fn update_masked(
    belief: &Belief,
    frame: &ObservationFrame,
    tm: &TransitionModel,
    sensors: &PredicateSensorSet,
    models: &ObservationModelSet,
    spec: &DomainSpec,
    mask: ModalityMask,
) -> Result<Belief, FilterError> {
    let predicted = predict_step(belief, &frame.action_id, tm)?;
    correct_step_masked(&predicted, frame, &frame.action_id, sensors, models, spec, mask)
}

/// [`update_masked`] over all predicates.
pub fn update(
    belief: &Belief,
    frame: &ObservationFrame,
    tm: &TransitionModel,
    sensors: &PredicateSensorSet,
    models: &ObservationModelSet,
    spec: &DomainSpec,
) -> Result<Belief, FilterError> {
    update_masked(belief, frame, tm, sensors, models, spec, ModalityMask::Both)
}

/// Stream a frame sequence through the filter, starting from the estimated
/// prior. Returns the belief after every frame.
pub fn filter_trajectory(
    frames: &[LabeledFrame],
    tm: &TransitionModel,
    sensors: &PredicateSensorSet,
    models: &ObservationModelSet,
    spec: &DomainSpec,
    mask: ModalityMask,
) -> Result<Vec<Belief>, FilterError> {
    let mut belief = Belief {
        p: tm.prior.clone(),
    };
    belief.floor_renormalize();
    let mut out = Vec::with_capacity(frames.len());
    for lf in frames {
        belief = update_masked(&belief, &lf.frame, tm, sensors, models, spec, mask)?;
        out.push(belief.clone());
    }
    Ok(out)
}

/// Index of the most probable state; exact ties break toward the state
/// declared earlier in the domain.
pub fn map_state_index(belief: &Belief) -> usize {
    let mut best = 0;
    for (i, v) in belief.p.iter().enumerate() {
        if *v > belief.p[best] {
            best = i;
        }
    }
    best
}

/// Id of the most probable state.
pub fn map_state<'a>(belief: &Belief, spec: &'a DomainSpec) -> &'a str {
    &spec.states[map_state_index(belief)].id
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{insertion_domain, parse_domain};
    use crate::obsmodel::{FallbackTier, Gmm1D, ObsEntry};
    use crate::sensors::{extract_features, recipe_tag, PredicateSensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lf(spec: &DomainSpec, state: usize, action: usize) -> LabeledFrame {
        let mut frame = ObservationFrame::zero();
        frame.action_id = spec.actions[action].id.clone();
        LabeledFrame {
            frame,
            state_id: spec.states[state].id.clone(),
        }
    }

    #[test]
    fn single_transition_without_smoothing() {
        let spec = insertion_domain();
        let traj = vec![lf(&spec, 0, 0), lf(&spec, 1, 0)];
        let tm = estimate_transitions(&[traj], &spec, 0.0).unwrap();
        assert_eq!(tm.row(0, 0)[1], 1.0);
        assert_eq!(tm.row(0, 0)[0], 0.0);
    }

    #[test]
    fn unvisited_pair_with_smoothing_is_uniform() {
        let spec = insertion_domain();
        let traj = vec![lf(&spec, 0, 0), lf(&spec, 1, 0)];
        let tm = estimate_transitions(&[traj], &spec, 0.1).unwrap();
        let row = tm.row(3, 2);
        for v in row {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_counted_add_alpha_row() {
        // 2-state domain; counts {s0->s0: 3, s0->s1: 1}, alpha=1 -> (4/6, 2/6).
        let text = "predicate p modality=visual args=a\n\
                    state s0 { p=false }\nstate s1 { p=true }\n\
                    action A kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1\n";
        let spec = parse_domain(text).unwrap();
        let traj = vec![
            lf(&spec, 0, 0),
            lf(&spec, 0, 0),
            lf(&spec, 0, 0),
            lf(&spec, 0, 0),
            lf(&spec, 1, 0),
        ];
        let tm = estimate_transitions(&[traj], &spec, 1.0).unwrap();
        assert!((tm.row(0, 0)[0] - 4.0 / 6.0).abs() < 1e-12);
        assert!((tm.row(0, 0)[1] - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn rows_are_distributions_for_any_alpha() {
        let spec = insertion_domain();
        let traj = vec![lf(&spec, 0, 0), lf(&spec, 1, 1), lf(&spec, 2, 2)];
        for alpha in [0.0, 0.1, 1.0, 5.0] {
            let tm = estimate_transitions(&[traj.clone()], &spec, alpha).unwrap();
            for s in 0..tm.num_states() {
                for a in 0..tm.num_actions() {
                    let total: f64 = tm.row(s, a).iter().sum();
                    assert!((total - 1.0).abs() < 1e-9, "alpha={alpha}");
                }
            }
            let prior_total: f64 = tm.prior.iter().sum();
            assert!((prior_total - 1.0).abs() < 1e-9);
        }
    }

    fn identity_tm(spec: &DomainSpec) -> TransitionModel {
        let ns = spec.num_states();
        let na = spec.num_actions();
        let mut transitions = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                transitions[(s * na + a) * ns + s] = 1.0;
            }
        }
        TransitionModel {
            state_ids: spec.states.iter().map(|s| s.id.clone()).collect(),
            action_ids: spec.actions.iter().map(|a| a.id.clone()).collect(),
            transitions,
            prior: vec![1.0 / ns as f64; ns],
            alpha: 0.0,
        }
    }

    #[test]
    fn identity_transition_preserves_belief() {
        let spec = insertion_domain();
        let tm = identity_tm(&spec);
        let b = Belief::from_weights(vec![0.4, 0.3, 0.1, 0.1, 0.05, 0.05]);
        let next = predict_step(&b, "Search", &tm).unwrap();
        for (x, y) in b.p.iter().zip(&next.p) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_transition_moves_mass() {
        let text = "predicate p modality=visual args=a\n\
                    state s0 { p=false }\nstate s1 { p=true }\n\
                    action A kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1\n";
        let spec = parse_domain(text).unwrap();
        let tm = TransitionModel {
            state_ids: vec!["s0".into(), "s1".into()],
            action_ids: vec!["A".into()],
            transitions: vec![0.0, 1.0, 0.0, 1.0],
            prior: vec![0.5, 0.5],
            alpha: 0.0,
        };
        let b = Belief { p: vec![1.0, 0.0] };
        let next = predict_step(&b, "A", &tm).unwrap();
        assert!(next.p[0] <= BELIEF_FLOOR * 2.0);
        assert!((next.p[1] - 1.0).abs() < 1e-9);
        drop(spec);
    }

    #[test]
    fn predict_matches_matrix_vector_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let ns = 3;
            // Random row-stochastic matrix and random belief.
            let mut transitions = vec![0.0; ns * ns];
            for s in 0..ns {
                let raw: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                for (j, r) in raw.iter().enumerate() {
                    transitions[s * ns + j] = r / total;
                }
            }
            let tm = TransitionModel {
                state_ids: vec!["a".into(), "b".into(), "c".into()],
                action_ids: vec!["A".into()],
                transitions: transitions.clone(),
                prior: vec![1.0 / 3.0; 3],
                alpha: 0.0,
            };
            let raw: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let b = Belief {
                p: raw.iter().map(|r| r / total).collect(),
            };

            // Oracle: direct matrix-vector product b' = T^T b.
            let mut expect = vec![0.0; ns];
            for s_prev in 0..ns {
                for s in 0..ns {
                    expect[s] += transitions[s_prev * ns + s] * b.p[s_prev];
                }
            }
            let esum: f64 = expect.iter().sum();
            for e in &mut expect {
                *e /= esum;
            }

            let got = predict_step(&b, "A", &tm).unwrap();
            for (e, g) in expect.iter().zip(&got.p) {
                assert!((e - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_action_is_an_error() {
        let spec = insertion_domain();
        let tm = identity_tm(&spec);
        let b = Belief::uniform(6);
        assert!(matches!(
            predict_step(&b, "Nope", &tm),
            Err(FilterError::UnknownAction(_))
        ));
    }

    /// Tiny 2-state, 2-predicate setup with hand-specified K=1 densities.
    fn two_state_setup() -> (DomainSpec, PredicateSensorSet, ObservationModelSet) {
        let text = "predicate mf modality=motion-force args=a\n\
                    predicate vis modality=visual args=a\n\
                    state s0 { mf=false, vis=false }\nstate s1 { mf=true, vis=true }\n\
                    action A kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1\n";
        let spec = parse_domain(text).unwrap();
        let sensors = PredicateSensorSet {
            sensors: spec
                .predicates
                .iter()
                .map(|p| {
                    let len = extract_features(&ObservationFrame::zero(), p).values.len();
                    let mut weights = vec![0.0; len];
                    weights[0] = 0.5;
                    PredicateSensor {
                        predicate_id: p.id.clone(),
                        recipe: recipe_tag(p).to_string(),
                        weights,
                        bias: -0.2,
                        trained: true,
                    }
                })
                .collect(),
            seed: 0,
            l2: 0.0,
            iterations: 0,
        };
        let gmm = |mean: f64, var: f64| ObsEntry {
            tier: FallbackTier::Specific,
            gmm: Some(Gmm1D {
                weights: vec![1.0],
                means: vec![mean],
                variances: vec![var],
            }),
        };
        // entries[(s * 1 + 0) * 2 + p]
        let entries = vec![
            gmm(-1.2, 0.5),
            gmm(-0.9, 0.8),
            gmm(-0.4, 0.6),
            gmm(-1.6, 0.7),
        ];
        let models = ObservationModelSet {
            state_ids: vec!["s0".into(), "s1".into()],
            action_ids: vec!["A".into()],
            predicate_ids: vec!["mf".into(), "vis".into()],
            entries,
            seed: 0,
            min_samples: 8,
        };
        (spec, sensors, models)
    }

    #[test]
    fn uninformative_observation_preserves_belief() {
        let (spec, sensors, _) = two_state_setup();
        // Same density for both states -> equal log weights.
        let gmm = ObsEntry {
            tier: FallbackTier::Specific,
            gmm: Some(Gmm1D {
                weights: vec![1.0],
                means: vec![-1.0],
                variances: vec![0.5],
            }),
        };
        let models = ObservationModelSet {
            state_ids: vec!["s0".into(), "s1".into()],
            action_ids: vec!["A".into()],
            predicate_ids: vec!["mf".into(), "vis".into()],
            entries: vec![gmm.clone(), gmm.clone(), gmm.clone(), gmm],
            seed: 0,
            min_samples: 8,
        };
        let mut frame = ObservationFrame::zero();
        frame.action_id = "A".into();
        frame.force = [2.0, 0.0, -1.0];
        let b = Belief {
            p: vec![0.7, 0.3],
        };
        let next = correct_step(&b, &frame, "A", &sensors, &models, &spec).unwrap();
        assert!((next.p[0] - 0.7).abs() < 1e-12);
        assert!((next.p[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn correct_step_matches_hand_bayes() {
        let (spec, sensors, models) = two_state_setup();
        let mut frame = ObservationFrame::zero();
        frame.action_id = "A".into();
        frame.force = [1.5, -0.5, -3.0];
        frame.velocity = [0.02, 0.0, -0.01];
        frame.visual = vec![0.01, 0.002, 0.0, 0.004, 0.1, 0.0];

        // Oracle: explicit Gaussian Bayes rule.
        let normal_pdf = |x: f64, mean: f64, var: f64| {
            (-((x - mean) * (x - mean)) / (2.0 * var)).exp()
                / (2.0 * std::f64::consts::PI * var).sqrt()
        };
        let mut z = Vec::new();
        for (pred, sensor) in spec.predicates.iter().zip(&sensors.sensors) {
            z.push(log_output(sensor.predict_frame(&frame, pred)));
        }
        let prior = [0.6, 0.4];
        let mut post = [0.0; 2];
        for s in 0..2 {
            let mut like = 1.0;
            for p in 0..2 {
                let g = models.entry(s, 0, p).gmm.as_ref().unwrap();
                like *= normal_pdf(z[p], g.means[0], g.variances[0]);
            }
            post[s] = prior[s] * like;
        }
        let total = post[0] + post[1];
        post[0] /= total;
        post[1] /= total;

        let b = Belief {
            p: prior.to_vec(),
        };
        let got = correct_step(&b, &frame, "A", &sensors, &models, &spec).unwrap();
        assert!((got.p[0] - post[0]).abs() < 1e-9, "{:?} vs {post:?}", got.p);
        assert!((got.p[1] - post[1]).abs() < 1e-9);
    }

    #[test]
    fn vanishing_likelihood_hits_floor_not_zero() {
        let (spec, sensors, _) = two_state_setup();
        let sharp = |mean: f64| ObsEntry {
            tier: FallbackTier::Specific,
            gmm: Some(Gmm1D {
                weights: vec![1.0],
                means: vec![mean],
                variances: vec![1e-4],
            }),
        };
        // State 0 explains the observation; state 1 is hundreds of sigma out.
        let models = ObservationModelSet {
            state_ids: vec!["s0".into(), "s1".into()],
            action_ids: vec!["A".into()],
            predicate_ids: vec!["mf".into(), "vis".into()],
            entries: vec![sharp(-0.8), sharp(-0.8), sharp(-9.0), sharp(-9.0)],
            seed: 0,
            min_samples: 8,
        };
        let mut frame = ObservationFrame::zero();
        frame.action_id = "A".into();
        let b = Belief::uniform(2);
        let next = correct_step(&b, &frame, "A", &sensors, &models, &spec).unwrap();
        assert!(next.p[1] >= BELIEF_FLOOR);
        assert!(next.p[1] < 1e-9);
        assert!((next.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn correct_is_invariant_to_constant_log_weight_shift() {
        let (spec, sensors, models) = two_state_setup();
        let mut frame = ObservationFrame::zero();
        frame.action_id = "A".into();
        frame.force = [0.3, 0.1, -4.0];
        let b = Belief {
            p: vec![0.25, 0.75],
        };
        let a = spec.action_index("A").unwrap();
        let lw = observation_log_weights(&frame, a, &sensors, &models, &spec, ModalityMask::Both);
        let direct = correct_step(&b, &frame, "A", &sensors, &models, &spec).unwrap();
        // Shift all log weights by a constant and renormalize by hand.
        let shifted: Vec<f64> = lw.iter().map(|l| l + 123.0).collect();
        let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut hand = Belief::from_weights(
            b.p.iter()
                .zip(&shifted)
                .map(|(p, l)| p * (l - max).exp())
                .collect(),
        );
        hand.floor_renormalize();
        for (x, y) in direct.p.iter().zip(&hand.p) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn update_composes_predict_then_correct() {
        let (spec, sensors, models) = two_state_setup();
        let tm = TransitionModel {
            state_ids: vec!["s0".into(), "s1".into()],
            action_ids: vec!["A".into()],
            transitions: vec![0.8, 0.2, 0.3, 0.7],
            prior: vec![0.5, 0.5],
            alpha: 0.0,
        };
        let mut frame = ObservationFrame::zero();
        frame.action_id = "A".into();
        frame.force = [0.2, -0.1, -2.0];
        let b = Belief {
            p: vec![0.9, 0.1],
        };
        let via_update = update(&b, &frame, &tm, &sensors, &models, &spec).unwrap();
        let predicted = predict_step(&b, "A", &tm).unwrap();
        let via_steps = correct_step(&predicted, &frame, "A", &sensors, &models, &spec).unwrap();
        assert_eq!(via_update, via_steps);
        assert!((via_update.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn map_state_picks_argmax_and_breaks_ties_early() {
        let spec = insertion_domain();
        let b = Belief {
            p: vec![0.7, 0.2, 0.1, 0.0, 0.0, 0.0],
        };
        assert_eq!(map_state_index(&b), 0);
        assert_eq!(map_state(&b, &spec), "FREE");
        let tie = Belief {
            p: vec![0.1, 0.4, 0.4, 0.1, 0.0, 0.0],
        };
        assert_eq!(map_state_index(&tie), 1);
    }

    #[test]
    fn argmax_invariant_to_weight_scaling() {
        let weights = vec![0.2, 3.0, 1.1, 0.7];
        let a = Belief::from_weights(weights.clone());
        let b = Belief::from_weights(weights.iter().map(|w| w * 42.5).collect());
        assert_eq!(map_state_index(&a), map_state_index(&b));
    }
}
