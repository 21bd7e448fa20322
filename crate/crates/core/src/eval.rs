//! Evaluation harness: k-fold offline scoring, leave-one-task-out
//! generalization, and closed-loop online success rates.
//!
//! Splits happen at trajectory granularity by default so no episode leaks
//! frames across train/validation/test (a frame-level mode exists behind the
//! granularity flag for comparison). Methods:
//!
//! * `Pred` — predicate sensors, mixture observation models and the Bayes
//!   filter; `Pred-MF` / `Pred-Image` fuse only one modality's predicates.
//! * `State` — the direct softmax state classifier, argmax per frame;
//!   `State-MF` / `State-Image` see only one modality's feature block.
//! * `Manual` — hand-tuned force/drop thresholds, no training.

use crate::domain::DomainSpec;
use crate::executor::{
    run_episode, Estimator, ManualMonitor, ManualThresholds, Policy, TraceRecord,
};
use crate::filter::{estimate_transitions, filter_trajectory, map_state_index};
use crate::obsmodel::{fit_observation_models, ObservationModelSet};
use crate::par;
use crate::sensors::{
    train_predicate_sensors, train_state_classifier, LabeledFrame, ModalityMask,
    PredicateSensorSet, StateClassifier, TrainConfig,
};
use crate::sim::{NoiseConfig, TaskConfig, Trajectory};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("sequence length mismatch: {predicted} predictions vs {truth} labels")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("need at least {need} trajectories, have {have}")]
    NotEnoughTrajectories { have: usize, need: usize },
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error(transparent)]
    Sensor(#[from] crate::sensors::SensorError),
    #[error(transparent)]
    ObsModel(#[from] crate::obsmodel::ObsModelError),
    #[error(transparent)]
    Filter(#[from] crate::filter::FilterError),
    #[error(transparent)]
    Exec(#[from] crate::executor::ExecError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

// ---------------------------------------------------------------------------
// Fold plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitGranularity {
    /// Whole episodes stay in one set (default; prevents temporal leakage).
    Trajectory,
    /// Frames split individually.
    Frame,
}

/// Train/validation/test membership for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSets {
    pub train_trajectories: Vec<usize>,
    pub val_trajectories: Vec<usize>,
    pub test_trajectories: Vec<usize>,
    /// Global frame indices (dataset flattened in trajectory order).
    pub train_frames: Vec<usize>,
    pub val_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
}

/// A complete k-fold plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub ratios: (f64, f64, f64),
    pub granularity: SplitGranularity,
    pub seed: u64,
    pub folds: Vec<FoldSets>,
}

/// Build a deterministic k-fold plan over the dataset.
///
/// The test share of each fold is the fold itself (1/k of the units); the
/// remainder is split into train and validation proportional to the first
/// two ratio entries.
pub fn kfold_split(
    dataset: &[Trajectory],
    k: usize,
    ratios: (f64, f64, f64),
    granularity: SplitGranularity,
    seed: u64,
) -> Result<FoldPlan, EvalError> {
    let frame_offsets: Vec<usize> = dataset
        .iter()
        .scan(0usize, |acc, t| {
            let start = *acc;
            *acc += t.frames.len();
            Some(start)
        })
        .collect();
    let total_frames: usize = dataset.iter().map(|t| t.frames.len()).sum();

    let n_units = match granularity {
        SplitGranularity::Trajectory => dataset.len(),
        SplitGranularity::Frame => total_frames,
    };
    if n_units < k || k == 0 {
        return Err(EvalError::NotEnoughTrajectories {
            have: n_units,
            need: k.max(1),
        });
    }

    let mut order: Vec<usize> = (0..n_units).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, 0x666f_6c64));
    order.shuffle(&mut rng);

    // Round-robin assignment of shuffled units to test folds.
    let mut fold_of = vec![0usize; n_units];
    for (pos, &unit) in order.iter().enumerate() {
        fold_of[unit] = pos % k;
    }

    let train_share = ratios.0 / (ratios.0 + ratios.1);
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let test_units: Vec<usize> = (0..n_units).filter(|&u| fold_of[u] == fold).collect();
        let rest: Vec<usize> = order.iter().copied().filter(|&u| fold_of[u] != fold).collect();
        let n_train = ((rest.len() as f64) * train_share).round() as usize;
        let mut train_units: Vec<usize> = rest[..n_train].to_vec();
        let mut val_units: Vec<usize> = rest[n_train..].to_vec();
        train_units.sort_unstable();
        val_units.sort_unstable();

        let to_frames = |units: &[usize]| -> Vec<usize> {
            match granularity {
                SplitGranularity::Trajectory => units
                    .iter()
                    .flat_map(|&t| {
                        let start = frame_offsets[t];
                        start..start + dataset[t].frames.len()
                    })
                    .collect(),
                SplitGranularity::Frame => units.to_vec(),
            }
        };
        let (train_trajectories, val_trajectories, test_trajectories) = match granularity {
            SplitGranularity::Trajectory => {
                (train_units.clone(), val_units.clone(), test_units.clone())
            }
            SplitGranularity::Frame => (Vec::new(), Vec::new(), Vec::new()),
        };
        folds.push(FoldSets {
            train_frames: to_frames(&train_units),
            val_frames: to_frames(&val_units),
            test_frames: to_frames(&test_units),
            train_trajectories,
            val_trajectories,
            test_trajectories,
        });
    }
    Ok(FoldPlan {
        k,
        ratios,
        granularity,
        seed,
        folds,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Precision/recall/F1 for one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMetrics {
    pub state_id: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Frame-level classification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_state: Vec<StateMetrics>,
    /// Row-major confusion counts, rows = truth, columns = prediction.
    pub confusion: Vec<usize>,
    pub total: usize,
}

impl MetricsReport {
    pub fn state(&self, id: &str) -> Option<&StateMetrics> {
        self.per_state.iter().find(|m| m.state_id == id)
    }
}

/// Score a predicted state-index sequence against ground truth.
///
/// States with zero support get F1 = 0 and are excluded from the macro-F1
/// denominator.
pub fn score_indices(
    predicted: &[usize],
    truth: &[usize],
    spec: &DomainSpec,
) -> Result<MetricsReport, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let ns = spec.num_states();
    let mut confusion = vec![0usize; ns * ns];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t * ns + p] += 1;
    }
    let total = predicted.len();
    let correct: usize = (0..ns).map(|s| confusion[s * ns + s]).sum();
    let accuracy = if total > 0 {
        correct as f64 / total as f64
    } else {
        0.0
    };

    let mut per_state = Vec::with_capacity(ns);
    let mut f1_sum = 0.0;
    let mut f1_count = 0usize;
    for s in 0..ns {
        let support: usize = (0..ns).map(|c| confusion[s * ns + c]).sum();
        let predicted_count: usize = (0..ns).map(|r| confusion[r * ns + s]).sum();
        let tp = confusion[s * ns + s];
        let precision = if predicted_count > 0 {
            tp as f64 / predicted_count as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 {
            f1_sum += f1;
            f1_count += 1;
        }
        per_state.push(StateMetrics {
            state_id: spec.states[s].id.clone(),
            support,
            precision,
            recall,
            f1,
        });
    }
    Ok(MetricsReport {
        accuracy,
        macro_f1: if f1_count > 0 {
            f1_sum / f1_count as f64
        } else {
            0.0
        },
        per_state,
        confusion,
        total,
    })
}

/// Score state-id sequences.
pub fn score(
    predicted: &[String],
    truth: &[String],
    spec: &DomainSpec,
) -> Result<MetricsReport, EvalError> {
    let to_idx = |ids: &[String]| -> Result<Vec<usize>, EvalError> {
        ids.iter()
            .map(|id| {
                spec.state_index(id)
                    .ok_or_else(|| EvalError::UnknownState(id.clone()))
            })
            .collect()
    };
    score_indices(&to_idx(predicted)?, &to_idx(truth)?, spec)
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

/// Estimation method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    Pred,
    PredMF,
    PredImage,
    State,
    StateMF,
    StateImage,
    Manual,
}

impl MethodId {
    pub fn all() -> [MethodId; 7] {
        [
            MethodId::Pred,
            MethodId::PredMF,
            MethodId::PredImage,
            MethodId::State,
            MethodId::StateMF,
            MethodId::StateImage,
            MethodId::Manual,
        ]
    }

    pub fn online_set() -> [MethodId; 3] {
        [MethodId::Pred, MethodId::State, MethodId::Manual]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodId::Pred => "Pred",
            MethodId::PredMF => "Pred-MF",
            MethodId::PredImage => "Pred-Image",
            MethodId::State => "State",
            MethodId::StateMF => "State-MF",
            MethodId::StateImage => "State-Image",
            MethodId::Manual => "Manual",
        }
    }

    fn mask(&self) -> ModalityMask {
        match self {
            MethodId::PredMF | MethodId::StateMF => ModalityMask::MotionForceOnly,
            MethodId::PredImage | MethodId::StateImage => ModalityMask::VisualOnly,
            _ => ModalityMask::Both,
        }
    }
}

/// Everything trained on one fold.
pub struct TrainedBundle {
    pub sensors: PredicateSensorSet,
    pub models: ObservationModelSet,
    pub transitions: crate::filter::TransitionModel,
    pub classifiers: BTreeMap<&'static str, StateClassifier>,
}

/// Train sensors, observation models, the transition model and the three
/// classifier variants on the given train/validation frames.
pub fn train_bundle(
    train_trajs: &[&Trajectory],
    val_frames: &[LabeledFrame],
    spec: &DomainSpec,
    seed: u64,
    train_cfg: &TrainConfig,
    alpha: f64,
) -> Result<TrainedBundle, EvalError> {
    let train_frames: Vec<LabeledFrame> = train_trajs
        .iter()
        .flat_map(|t| t.frames.iter().cloned())
        .collect();
    let sensor_cfg = TrainConfig {
        seed: par::derive_seed(seed, 1),
        ..train_cfg.clone()
    };
    let sensors = train_predicate_sensors(&train_frames, spec, &sensor_cfg)?;
    let models = fit_observation_models(val_frames, &sensors, spec, par::derive_seed(seed, 2))?;
    let transitions = estimate_transitions(train_trajs, spec, alpha)?;

    let mut classifiers = BTreeMap::new();
    for (tag, mask) in [
        ("both", ModalityMask::Both),
        ("mf", ModalityMask::MotionForceOnly),
        ("visual", ModalityMask::VisualOnly),
    ] {
        let cfg = TrainConfig {
            seed: par::derive_seed_n(seed, &[3, mask as u64]),
            ..train_cfg.clone()
        };
        classifiers.insert(tag, train_state_classifier(&train_frames, spec, &cfg, mask)?);
    }
    Ok(TrainedBundle {
        sensors,
        models,
        transitions,
        classifiers,
    })
}

impl TrainedBundle {
    pub fn classifier(&self, mask: ModalityMask) -> &StateClassifier {
        let tag = match mask {
            ModalityMask::Both => "both",
            ModalityMask::MotionForceOnly => "mf",
            ModalityMask::VisualOnly => "visual",
        };
        &self.classifiers[tag]
    }
}

fn manual_thresholds_for(traj: &Trajectory) -> ManualThresholds {
    let depth = TaskConfig::builtin(&traj.header.task_id)
        .map(|t| t.insertion_depth)
        .unwrap_or(0.012);
    ManualThresholds::for_depth(depth)
}

/// Per-frame state predictions of one method over one trajectory.
pub fn predict_trajectory(
    method: MethodId,
    traj: &Trajectory,
    bundle: &TrainedBundle,
    spec: &DomainSpec,
) -> Result<Vec<usize>, EvalError> {
    match method {
        MethodId::Pred | MethodId::PredMF | MethodId::PredImage => {
            let beliefs = filter_trajectory(
                &traj.frames,
                &bundle.transitions,
                &bundle.sensors,
                &bundle.models,
                spec,
                method.mask(),
            )?;
            Ok(beliefs.iter().map(map_state_index).collect())
        }
        MethodId::State | MethodId::StateMF | MethodId::StateImage => {
            let clf = bundle.classifier(method.mask());
            Ok(traj
                .frames
                .iter()
                .map(|lf| clf.predict_argmax(&lf.frame))
                .collect())
        }
        MethodId::Manual => {
            let mut monitor = ManualMonitor::new(manual_thresholds_for(traj));
            Ok(traj
                .frames
                .iter()
                .map(|lf| {
                    spec.state_index(monitor.classify(&lf.frame))
                        .expect("manual states are domain states")
                })
                .collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Offline protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub k: usize,
    pub ratios: (f64, f64, f64),
    pub granularity: SplitGranularity,
    pub seed: u64,
    pub alpha: f64,
    pub train: TrainConfig,
    pub methods: Vec<MethodId>,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            k: 5,
            ratios: (0.6, 0.2, 0.2),
            granularity: SplitGranularity::Trajectory,
            seed: 0,
            alpha: 0.1,
            train: TrainConfig::default(),
            methods: MethodId::all().to_vec(),
        }
    }
}

/// Scores of every method on one fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub methods: Vec<(MethodId, MetricsReport)>,
}

impl FoldReport {
    pub fn metrics(&self, m: MethodId) -> Option<&MetricsReport> {
        self.methods.iter().find(|(id, _)| *id == m).map(|(_, r)| r)
    }
}

/// Full offline cross-validation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineReport {
    pub folds: Vec<FoldReport>,
}

impl OfflineReport {
    pub fn mean_accuracy(&self, m: MethodId) -> f64 {
        let scores: Vec<f64> = self
            .folds
            .iter()
            .filter_map(|f| f.metrics(m).map(|r| r.accuracy))
            .collect();
        mean(&scores)
    }

    pub fn mean_macro_f1(&self, m: MethodId) -> f64 {
        let scores: Vec<f64> = self
            .folds
            .iter()
            .filter_map(|f| f.metrics(m).map(|r| r.macro_f1))
            .collect();
        mean(&scores)
    }

    /// Mean per-state F1 across folds for one method.
    pub fn mean_state_f1(&self, m: MethodId, state_id: &str) -> f64 {
        let scores: Vec<f64> = self
            .folds
            .iter()
            .filter_map(|f| f.metrics(m))
            .filter_map(|r| r.state(state_id).map(|s| s.f1))
            .collect();
        mean(&scores)
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Run the k-fold offline comparison: per fold, train on the train split,
/// fit observation models on the validation split, estimate transitions on
/// the train split, then filter and score the held-out test trajectories
/// with every method.
pub fn run_offline(
    dataset: &[Trajectory],
    spec: &DomainSpec,
    cfg: &OfflineConfig,
) -> Result<OfflineReport, EvalError> {
    let plan = kfold_split(dataset, cfg.k, cfg.ratios, cfg.granularity, cfg.seed)?;

    let fold_results = par::map_indexed(plan.folds.len(), |fold| -> Result<FoldReport, EvalError> {
        let sets = &plan.folds[fold];
        let train_trajs: Vec<&Trajectory> =
            sets.train_trajectories.iter().map(|&i| &dataset[i]).collect();
        let val_frames: Vec<LabeledFrame> = sets
            .val_trajectories
            .iter()
            .flat_map(|&i| dataset[i].frames.iter().cloned())
            .collect();
        let bundle = train_bundle(
            &train_trajs,
            &val_frames,
            spec,
            par::derive_seed_n(cfg.seed, &[0x106d, fold as u64]),
            &cfg.train,
            cfg.alpha,
        )?;

        let mut methods = Vec::new();
        for &method in &cfg.methods {
            let mut predicted = Vec::new();
            let mut truth = Vec::new();
            for &ti in &sets.test_trajectories {
                let traj = &dataset[ti];
                predicted.extend(predict_trajectory(method, traj, &bundle, spec)?);
                for lf in &traj.frames {
                    truth.push(
                        spec.state_index(&lf.state_id)
                            .ok_or_else(|| EvalError::UnknownState(lf.state_id.clone()))?,
                    );
                }
            }
            methods.push((method, score_indices(&predicted, &truth, spec)?));
        }
        Ok(FoldReport { fold, methods })
    });

    let folds = fold_results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(OfflineReport { folds })
}

// ---------------------------------------------------------------------------
// Generalization protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizationConfig {
    pub seed: u64,
    pub repetitions: usize,
    /// Train/validation split of the 7 source tasks' trajectories.
    pub split: (f64, f64),
    pub alpha: f64,
    pub train: TrainConfig,
}

impl Default for GeneralizationConfig {
    fn default() -> Self {
        GeneralizationConfig {
            seed: 0,
            repetitions: 3,
            split: (0.75, 0.25),
            alpha: 0.1,
            train: TrainConfig::default(),
        }
    }
}

/// One held-out task evaluated with one repetition seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeldOutReport {
    pub task_id: String,
    pub repetition: usize,
    pub pred: MetricsReport,
    pub state: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub held_out: Vec<HeldOutReport>,
}

impl GeneralizationReport {
    pub fn mean_pred_accuracy(&self) -> f64 {
        mean(&self.held_out.iter().map(|h| h.pred.accuracy).collect::<Vec<_>>())
    }

    pub fn mean_state_accuracy(&self) -> f64 {
        mean(&self.held_out.iter().map(|h| h.state.accuracy).collect::<Vec<_>>())
    }
}

/// Split trajectory indices into train/validation at the given ratio.
fn split_indices(
    n: usize,
    ratio_train: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * ratio_train).round() as usize;
    let n_train = n_train.clamp(1, n.saturating_sub(1).max(1));
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Leave-one-task-out: train Pred and State on 7 of the 8 tasks, test on
/// the held-out one, repeated with independent split seeds.
pub fn run_generalization(
    dataset: &[Trajectory],
    spec: &DomainSpec,
    cfg: &GeneralizationConfig,
) -> Result<GeneralizationReport, EvalError> {
    let mut task_ids: Vec<String> = Vec::new();
    for t in dataset {
        if !task_ids.contains(&t.header.task_id) {
            task_ids.push(t.header.task_id.clone());
        }
    }

    let jobs: Vec<(usize, usize)> = (0..task_ids.len())
        .flat_map(|h| (0..cfg.repetitions).map(move |r| (h, r)))
        .collect();

    let results = par::map(&jobs, |&(h, r)| -> Result<HeldOutReport, EvalError> {
        let held = &task_ids[h];
        let source: Vec<&Trajectory> = dataset
            .iter()
            .filter(|t| &t.header.task_id != held)
            .collect();
        let test: Vec<&Trajectory> = dataset
            .iter()
            .filter(|t| &t.header.task_id == held)
            .collect();
        let job_seed = par::derive_seed_n(cfg.seed, &[0x3137, h as u64, r as u64]);
        let (train_idx, val_idx) =
            split_indices(source.len(), cfg.split.0 / (cfg.split.0 + cfg.split.1), job_seed);
        let train_trajs: Vec<&Trajectory> = train_idx.iter().map(|&i| source[i]).collect();
        let val_frames: Vec<LabeledFrame> = val_idx
            .iter()
            .flat_map(|&i| source[i].frames.iter().cloned())
            .collect();
        let bundle = train_bundle(&train_trajs, &val_frames, spec, job_seed, &cfg.train, cfg.alpha)?;

        let score_method = |method: MethodId| -> Result<MetricsReport, EvalError> {
            let mut predicted = Vec::new();
            let mut truth = Vec::new();
            for traj in &test {
                predicted.extend(predict_trajectory(method, traj, &bundle, spec)?);
                for lf in &traj.frames {
                    truth.push(
                        spec.state_index(&lf.state_id)
                            .ok_or_else(|| EvalError::UnknownState(lf.state_id.clone()))?,
                    );
                }
            }
            score_indices(&predicted, &truth, spec)
        };

        Ok(HeldOutReport {
            task_id: held.clone(),
            repetition: r,
            pred: score_method(MethodId::Pred)?,
            state: score_method(MethodId::State)?,
        })
    });

    let held_out = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(GeneralizationReport { held_out })
}

// ---------------------------------------------------------------------------
// Online protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub episodes_per_task: usize,
    /// Half-range of the per-episode true-hole shift, m.
    pub perturbation: f64,
    pub seed: u64,
    /// Task-only fine-tuning split.
    pub split: (f64, f64),
    pub alpha: f64,
    pub train: TrainConfig,
    pub noise: NoiseConfig,
    pub methods: Vec<MethodId>,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            episodes_per_task: 20,
            perturbation: 0.002,
            seed: 0,
            split: (0.75, 0.25),
            alpha: 0.1,
            train: TrainConfig::default(),
            noise: NoiseConfig::default(),
            methods: MethodId::online_set().to_vec(),
        }
    }
}

/// Success counts of one method on one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineCell {
    pub task_id: String,
    pub method: MethodId,
    pub successes: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineReport {
    pub cells: Vec<OnlineCell>,
}

impl OnlineReport {
    pub fn success_rate(&self, task_id: &str, method: MethodId) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.task_id == task_id && c.method == method)
            .map(|c| c.successes as f64 / c.episodes.max(1) as f64)
    }

    pub fn average_rate(&self, method: MethodId) -> f64 {
        let rates: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method)
            .map(|c| c.successes as f64 / c.episodes.max(1) as f64)
            .collect();
        mean(&rates)
    }
}

/// Closed-loop evaluation on the given tasks: fine-tune on each task's own
/// subset of the dataset, then run seeded episodes with the true hole
/// perturbed per episode. The same episode seed and perturbation are shared
/// across methods so comparisons are paired.
pub fn run_online(
    dataset: &[Trajectory],
    tasks: &[TaskConfig],
    spec: &DomainSpec,
    cfg: &OnlineConfig,
) -> Result<OnlineReport, EvalError> {
    // Fine-tune one bundle per task, in parallel.
    let bundles = par::map(tasks, |task| -> Result<TrainedBundle, EvalError> {
        let own: Vec<&Trajectory> = dataset
            .iter()
            .filter(|t| t.header.task_id == task.task_id)
            .collect();
        if own.len() < 2 {
            return Err(EvalError::NotEnoughTrajectories {
                have: own.len(),
                need: 2,
            });
        }
        let seed = par::derive_seed_n(cfg.seed, &[0xf17e, task_stream(&task.task_id)]);
        let (train_idx, val_idx) =
            split_indices(own.len(), cfg.split.0 / (cfg.split.0 + cfg.split.1), seed);
        let train_trajs: Vec<&Trajectory> = train_idx.iter().map(|&i| own[i]).collect();
        let val_frames: Vec<LabeledFrame> = val_idx
            .iter()
            .flat_map(|&i| own[i].frames.iter().cloned())
            .collect();
        train_bundle(&train_trajs, &val_frames, spec, seed, &cfg.train, cfg.alpha)
    });
    let bundles: Vec<TrainedBundle> = bundles.into_iter().collect::<Result<Vec<_>, _>>()?;

    // Episodes: (task, method, episode) jobs, paired seeds across methods.
    let mut jobs = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        for &method in &cfg.methods {
            for e in 0..cfg.episodes_per_task {
                jobs.push((ti, method, e));
            }
        }
        let _ = task;
    }

    let outcomes = par::map(&jobs, |&(ti, method, e)| -> Result<bool, EvalError> {
        let task = &tasks[ti];
        let bundle = &bundles[ti];
        let pair_seed =
            par::derive_seed_n(cfg.seed, &[0x6f6e_6c69, task_stream(&task.task_id), e as u64]);
        let mut pert_rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let d = [
            pert_rng.gen_range(-cfg.perturbation..=cfg.perturbation),
            pert_rng.gen_range(-cfg.perturbation..=cfg.perturbation),
        ];
        let episode_task = task.with_hole_perturbation(d);

        let (policy, estimator) = match method {
            MethodId::Manual => (Policy::manual(), Estimator::Manual),
            MethodId::State => (
                Policy::closed_loop(),
                Estimator::DirectClassifier(bundle.classifier(ModalityMask::Both)),
            ),
            _ => (
                Policy::closed_loop(),
                Estimator::BeliefFilter {
                    sensors: &bundle.sensors,
                    models: &bundle.models,
                    transitions: &bundle.transitions,
                    mask: ModalityMask::Both,
                },
            ),
        };
        let result = run_episode(
            &episode_task,
            &policy,
            &estimator,
            spec,
            &cfg.noise,
            par::derive_seed(pair_seed, 1),
        )?;
        Ok(result.success)
    });

    let mut cells: Vec<OnlineCell> = Vec::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let (ti, method, _) = *job;
        let success = outcome?;
        let task_id = &tasks[ti].task_id;
        if let Some(cell) = cells
            .iter_mut()
            .find(|c| &c.task_id == task_id && c.method == method)
        {
            cell.episodes += 1;
            cell.successes += success as usize;
        } else {
            cells.push(OnlineCell {
                task_id: task_id.clone(),
                method,
                successes: success as usize,
                episodes: 1,
            });
        }
    }
    Ok(OnlineReport { cells })
}

fn task_stream(task_id: &str) -> u64 {
    task_id.bytes().fold(0u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64))
}

/// A belief trace row ready for export.
pub fn trace_rows(trace: &[TraceRecord]) -> Vec<(f64, String, Vec<f64>, String)> {
    trace
        .iter()
        .map(|r| (r.t, r.action_id.clone(), r.probs.clone(), r.map_state.clone()))
        .collect()
}
