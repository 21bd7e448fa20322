//! Closed-loop high-level execution.
//!
//! A policy maps the estimated symbolic state to the next action: prepare
//! when free, search on the surface, insert once aligned, recover with a
//! perturbed reset after a fall, and stop when insertion is confirmed for
//! a debounce window. The estimate can come from the Bayes filter, from the
//! direct state classifier, or — for the manual baseline — from nothing at
//! all: manual episodes replay the threshold-chained open-loop schedule and
//! never touch the estimator, which an episode-level query counter audits.

use crate::domain::{actions, states, DomainSpec};
use crate::filter::{map_state_index, update_masked, Belief, TransitionModel};
use crate::obsmodel::ObservationModelSet;
use crate::sensors::{ModalityMask, PredicateSensorSet, StateClassifier};
use crate::sim::{
    ground_truth_state, rollout_openloop, sense, step, NoiseConfig, Schedule, SimState,
    TaskConfig, DEFAULT_DT, HOVER_HEIGHT,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("policy table has no entry for state `{0}`")]
    StateNotInTable(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error(transparent)]
    Filter(#[from] crate::filter::FilterError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

/// Execution mode of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyMode {
    ClosedLoop,
    ManualThresholds,
}

/// High-level policy: state-to-action table plus recovery and termination
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub mode: PolicyMode,
    /// (state id, action id) entries; INSERTED is terminal and absent.
    pub table: Vec<(String, String)>,
    /// Simulated-time budget, s.
    pub timeout: f64,
    /// Consecutive INSERTED estimates required before terminating.
    pub confirm_frames: usize,
    /// Half-range of the xy perturbation applied when recovering from a
    /// fall, m.
    pub recovery_perturbation: f64,
}

impl Policy {
    pub fn closed_loop() -> Policy {
        Policy {
            mode: PolicyMode::ClosedLoop,
            table: vec![
                (states::FREE.into(), actions::PREPARE.into()),
                (states::ONSURFACE.into(), actions::SEARCH.into()),
                (states::SEARCHING.into(), actions::SEARCH.into()),
                (states::ALIGNED.into(), actions::INSERT.into()),
                (states::FALLEN.into(), actions::PREPARE.into()),
            ],
            timeout: 60.0,
            confirm_frames: 10,
            recovery_perturbation: 0.002,
        }
    }

    pub fn manual() -> Policy {
        Policy {
            mode: PolicyMode::ManualThresholds,
            table: Vec::new(),
            timeout: 60.0,
            confirm_frames: 10,
            recovery_perturbation: 0.0,
        }
    }
}

/// What the policy wants to do in a given estimated state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directive<'a> {
    Act(&'a str),
    Terminate,
}

/// Table lookup: INSERTED is terminal, everything else must be covered.
pub fn next_action<'a>(state_id: &str, policy: &'a Policy) -> Result<Directive<'a>, ExecError> {
    if state_id == states::INSERTED {
        return Ok(Directive::Terminate);
    }
    policy
        .table
        .iter()
        .find(|(s, _)| s == state_id)
        .map(|(_, a)| Directive::Act(a.as_str()))
        .ok_or_else(|| ExecError::StateNotInTable(state_id.to_string()))
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Inserted,
    Timeout,
    Unrecoverable,
}

/// One row of the per-frame execution trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub action_id: String,
    /// Estimated distribution over states (one-hot-ish for non-filter
    /// estimators).
    pub probs: Vec<f64>,
    pub map_state: String,
    pub true_state: String,
}

/// Outcome of one closed-loop episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub seed: u64,
    pub success: bool,
    /// Simulated time at termination, s.
    pub wall_time: f64,
    pub termination: Termination,
    pub trace: Vec<TraceRecord>,
    /// How many times the state estimator was consulted; manual mode must
    /// leave this at zero.
    pub estimator_queries: usize,
}

/// State estimator driving the closed loop.
pub enum Estimator<'a> {
    BeliefFilter {
        sensors: &'a PredicateSensorSet,
        models: &'a ObservationModelSet,
        transitions: &'a TransitionModel,
        mask: ModalityMask,
    },
    DirectClassifier(&'a StateClassifier),
    Manual,
}

/// Hand-tuned thresholds for the manual baseline. `contact_z` memory lives
/// in [`ManualMonitor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualThresholds {
    /// |F_z| above this means contact.
    pub contact_force: f64,
    /// |F_z| below this releases the contact latch.
    pub release_force: f64,
    /// Drop below the contact height that signals alignment, m.
    pub aligned_drop: f64,
    /// Fraction of the insertion depth whose drop signals full insertion.
    pub inserted_fraction: f64,
    /// Drop that signals the peg fell off the board, m.
    pub fallen_drop: f64,
    /// Insertion depth of the task at hand, m.
    pub insertion_depth: f64,
}

impl ManualThresholds {
    pub fn for_depth(insertion_depth: f64) -> ManualThresholds {
        ManualThresholds {
            contact_force: 2.0,
            release_force: 1.2,
            aligned_drop: 0.0035,
            inserted_fraction: 0.8,
            fallen_drop: 0.018,
            insertion_depth,
        }
    }
}

/// Per-frame threshold state estimation, the offline manual baseline.
///
/// Remembers the sensed height at first contact and classifies each frame
/// from the force magnitude and the drop below that height.
#[derive(Debug, Clone)]
pub struct ManualMonitor {
    thresholds: ManualThresholds,
    contact_z: Option<f64>,
    in_contact: bool,
}

impl ManualMonitor {
    pub fn new(thresholds: ManualThresholds) -> ManualMonitor {
        ManualMonitor {
            thresholds,
            contact_z: None,
            in_contact: false,
        }
    }

    /// Classify one sensed frame.
    pub fn classify(&mut self, frame: &crate::sensors::ObservationFrame) -> &'static str {
        let th = &self.thresholds;
        let f_z = frame.force[2].abs();
        if self.in_contact {
            if f_z < th.release_force {
                self.in_contact = false;
            }
        } else if f_z >= th.contact_force {
            self.in_contact = true;
            if self.contact_z.is_none() {
                self.contact_z = Some(frame.position[2]);
            }
        }
        if !self.in_contact {
            return states::FREE;
        }
        let Some(z_c) = self.contact_z else {
            return states::FREE;
        };
        let drop = z_c - frame.position[2];
        if drop > th.fallen_drop {
            states::FALLEN
        } else if drop > th.inserted_fraction * th.insertion_depth {
            states::INSERTED
        } else if drop > th.aligned_drop {
            states::ALIGNED
        } else if frame.action_id == actions::SEARCH {
            states::SEARCHING
        } else {
            states::ONSURFACE
        }
    }
}

fn one_hot(n: usize, idx: usize) -> Vec<f64> {
    let mut p = vec![0.0; n];
    p[idx] = 1.0;
    p
}

/// Run one episode of `policy` on `task`.
///
/// Closed-loop modes sense, estimate, consult the policy table and step the
/// simulator until INSERTED is confirmed for `confirm_frames` consecutive
/// estimates or the timeout hits. Success is decided from ground truth at
/// termination, never from the belief alone. Manual mode replays the
/// threshold-switched open-loop schedule and never queries the estimator.
pub fn run_episode(
    task: &TaskConfig,
    policy: &Policy,
    estimator: &Estimator<'_>,
    spec: &DomainSpec,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<EpisodeResult, ExecError> {
    match policy.mode {
        PolicyMode::ManualThresholds => run_manual_episode(task, policy, spec, noise, seed),
        PolicyMode::ClosedLoop => run_closed_loop(task, policy, estimator, spec, noise, seed),
    }
}

fn run_manual_episode(
    task: &TaskConfig,
    policy: &Policy,
    spec: &DomainSpec,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<EpisodeResult, ExecError> {
    let traj = rollout_openloop(task, &Schedule::default_open_loop(), spec, noise, seed, DEFAULT_DT)?;
    let ns = spec.num_states();
    let trace: Vec<TraceRecord> = traj
        .frames
        .iter()
        .map(|lf| {
            let idx = spec.state_index(&lf.state_id).unwrap_or(0);
            TraceRecord {
                t: lf.frame.t,
                action_id: lf.frame.action_id.clone(),
                probs: one_hot(ns, idx),
                map_state: lf.state_id.clone(),
                true_state: lf.state_id.clone(),
            }
        })
        .collect();
    let final_state = traj.frames.last().map(|f| f.state_id.as_str()).unwrap_or("");
    let success = final_state == states::INSERTED;
    let wall_time = traj.frames.last().map(|f| f.frame.t).unwrap_or(0.0);
    Ok(EpisodeResult {
        task_id: task.task_id.clone(),
        seed,
        success,
        wall_time: wall_time.min(policy.timeout),
        termination: if success {
            Termination::Inserted
        } else {
            Termination::Timeout
        },
        trace,
        estimator_queries: 0,
    })
}

fn run_closed_loop(
    task: &TaskConfig,
    policy: &Policy,
    estimator: &Estimator<'_>,
    spec: &DomainSpec,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<EpisodeResult, ExecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SimState::initial(task);
    state.position[0] += rng.gen_range(-0.001..0.001);
    state.position[1] += rng.gen_range(-0.001..0.001);
    state.anchor = state.position;

    let ns = spec.num_states();
    let mut belief = match estimator {
        Estimator::BeliefFilter { transitions, .. } => Belief {
            p: transitions.prior.clone(),
        },
        _ => Belief::uniform(ns),
    };
    let mut queries = 0usize;

    let mut action_id = match next_action(states::FREE, policy)? {
        Directive::Act(a) => a.to_string(),
        Directive::Terminate => unreachable!("FREE is not terminal"),
    };
    let mut action = spec
        .action(&action_id)
        .ok_or_else(|| ExecError::UnknownAction(action_id.clone()))?;
    state.on_action_change(action);

    let mut trace = Vec::new();
    let mut consecutive_inserted = 0usize;
    let mut prev_map = states::FREE.to_string();
    let mut termination = Termination::Timeout;

    while state.clock < policy.timeout {
        state = step(&state, action, task, &mut rng, DEFAULT_DT);
        let mut frame = sense(&state, task, noise, &mut rng);
        frame.action_id = action_id.clone();

        let probs: Vec<f64> = match estimator {
            Estimator::BeliefFilter {
                sensors,
                models,
                transitions,
                mask,
            } => {
                queries += 1;
                belief = update_masked(&belief, &frame, transitions, sensors, models, spec, *mask)?;
                belief.p.clone()
            }
            Estimator::DirectClassifier(clf) => {
                queries += 1;
                clf.predict_state(&frame)
            }
            Estimator::Manual => {
                // Closed-loop execution needs an estimator; run in manual
                // policy mode instead.
                one_hot(ns, 0)
            }
        };
        let map_idx = map_state_index(&Belief { p: probs.clone() });
        let map_id = spec.states[map_idx].id.clone();
        let true_state = ground_truth_state(&state, task);
        trace.push(TraceRecord {
            t: state.clock,
            action_id: action_id.clone(),
            probs,
            map_state: map_id.clone(),
            true_state: true_state.to_string(),
        });

        // Termination: debounced INSERTED estimate; success checked against
        // ground truth separately.
        if map_id == states::INSERTED {
            consecutive_inserted += 1;
            if consecutive_inserted >= policy.confirm_frames {
                termination = Termination::Inserted;
                break;
            }
        } else {
            consecutive_inserted = 0;
        }

        // Action selection from the estimated state.
        let entered_fallen = map_id == states::FALLEN && prev_map != states::FALLEN;
        let desired = match next_action(&map_id, policy) {
            Ok(Directive::Act(a)) => a.to_string(),
            Ok(Directive::Terminate) => action_id.clone(),
            Err(e) => {
                drop(e);
                termination = Termination::Unrecoverable;
                break;
            }
        };

        if entered_fallen {
            // Recovery: reset toward a freshly perturbed hole estimate.
            let nominal = task.nominal_xy();
            let r = policy.recovery_perturbation;
            state.search_center = [
                nominal[0] + rng.gen_range(-r..=r),
                nominal[1] + rng.gen_range(-r..=r),
            ];
        }

        let mut switch_to: Option<String> = None;
        if desired != action_id || entered_fallen {
            switch_to = Some(desired.clone());
        } else if action_id == actions::PREPARE && map_id == states::FREE {
            // Prepare finished hovering: bridge to MakeContact.
            let target_z = task.surface_height + HOVER_HEIGHT;
            let near = (state.position[0] - state.search_center[0]).abs() < 0.002
                && (state.position[1] - state.search_center[1]).abs() < 0.002
                && (state.position[2] - target_z).abs() < 0.002;
            if near {
                switch_to = Some(actions::MAKE_CONTACT.to_string());
            }
        } else if state.clock - state.action_start >= action.max_duration {
            // Re-anchor a stale action (restarts the search sweep).
            switch_to = Some(action_id.clone());
        }

        if let Some(next_id) = switch_to {
            action = spec
                .action(&next_id)
                .ok_or_else(|| ExecError::UnknownAction(next_id.clone()))?;
            action_id = next_id;
            state.on_action_change(action);
        }
        prev_map = map_id;
    }

    let success =
        termination == Termination::Inserted && ground_truth_state(&state, task) == states::INSERTED;
    Ok(EpisodeResult {
        task_id: task.task_id.clone(),
        seed,
        success,
        wall_time: state.clock,
        termination,
        trace,
        estimator_queries: queries,
    })
}
