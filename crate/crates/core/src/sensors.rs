//! Virtual predicate sensors: feature extraction and binary classifiers.
//!
//! Each predicate gets a logistic-regression classifier over a small
//! handcrafted feature vector drawn from its modality's channels. Training
//! minimizes a masked cross-entropy: a frame labeled with state `s`
//! contributes loss terms only for the predicates whose truth value `s`
//! determines. The module also hosts the direct multi-class state classifier
//! used as a baseline.
//!
//! Feature recipes, per predicate:
//!
//! | recipe            | features                                         |
//! |-------------------|--------------------------------------------------|
//! | `mf-contact`      | \|F\|, F_z, \|F_xy\|, \|v\|, v_z                 |
//! | `mf-lateral`      | \|F_xy\|, F_z, v_z, \|v_xy\|, \|F\|              |
//! | `mf-drop`         | v_z, \|v\|, \|v_xy\|, F_z                        |
//! | `mf-generic`      | \|F\|, F_z, \|F_xy\|, \|v\|, v_z, \|v_xy\|       |
//! | `visual-generic`  | u0..u5, u0-u3, u1-u5                             |
//!
//! where `u0..u5` are the visual-proxy channels (height above surface, xy
//! distance to hole, fallen-geometry flag, depth in hole, depth fraction,
//! distance outside board). Velocity channels already encode short-horizon
//! position deltas, so no cross-frame history enters any recipe and
//! extraction stays a pure per-frame function.

use crate::domain::{DomainSpec, Modality, Predicate, SymbolicState};
use crate::par;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Classifier outputs are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;

/// Number of visual-proxy channels a frame carries.
pub const VISUAL_DIM: usize = 6;

/// One timestamped multimodal observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    /// Seconds since episode start.
    pub t: f64,
    /// Action being executed during the step that produced this frame.
    pub action_id: String,
    /// Peg tip position, m.
    pub position: [f64; 3],
    /// Peg tip velocity, m/s.
    pub velocity: [f64; 3],
    /// Sensed contact wrench, N. Pressing on the surface reads negative z.
    pub force: [f64; 3],
    /// Visual-proxy channels, dimensionless/metric mix. Length [`VISUAL_DIM`].
    pub visual: Vec<f64>,
}

impl ObservationFrame {
    pub fn zero() -> Self {
        ObservationFrame {
            t: 0.0,
            action_id: String::new(),
            position: [0.0; 3],
            velocity: [0.0; 3],
            force: [0.0; 3],
            visual: vec![0.0; VISUAL_DIM],
        }
    }
}

/// A frame with its ground-truth symbolic state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub frame: ObservationFrame,
    pub state_id: String,
}

/// Fixed-length feature vector for one (frame, predicate) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

/// Which sensor modalities participate in training or fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalityMask {
    Both,
    MotionForceOnly,
    VisualOnly,
}

impl ModalityMask {
    pub fn admits(&self, modality: Modality) -> bool {
        match self {
            ModalityMask::Both => true,
            ModalityMask::MotionForceOnly => modality == Modality::MotionForce,
            ModalityMask::VisualOnly => modality == Modality::Visual,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ModalityMask::Both => "both",
            ModalityMask::MotionForceOnly => "mf",
            ModalityMask::VisualOnly => "visual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SensorError {
    #[error("feature dimension mismatch: sensor expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
}

// ---------------------------------------------------------------------------
// Feature recipes
// ---------------------------------------------------------------------------

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn norm_xy(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Name of the feature recipe serving `predicate`.
pub fn recipe_tag(predicate: &Predicate) -> &'static str {
    match predicate.modality {
        Modality::MotionForce => match predicate.id.as_str() {
            "motion-force-in-contact" | "motion-force-fully-inserted" => "mf-contact",
            "motion-force-axis-aligned" => "mf-lateral",
            "motion-force-dropping" => "mf-drop",
            _ => "mf-generic",
        },
        Modality::Visual => "visual-generic",
    }
}

fn visual_channel(frame: &ObservationFrame, i: usize) -> f64 {
    frame.visual.get(i).copied().unwrap_or(0.0)
}

/// Deterministic per-frame feature extraction for one predicate.
pub fn extract_features(frame: &ObservationFrame, predicate: &Predicate) -> FeatureVector {
    let f = &frame.force;
    let v = &frame.velocity;
    let values = match recipe_tag(predicate) {
        "mf-contact" => vec![norm3(f), f[2], norm_xy(f), norm3(v), v[2]],
        "mf-lateral" => vec![norm_xy(f), f[2], v[2], norm_xy(v), norm3(f)],
        "mf-drop" => vec![v[2], norm3(v), norm_xy(v), f[2]],
        "mf-generic" => vec![norm3(f), f[2], norm_xy(f), norm3(v), v[2], norm_xy(v)],
        _ => {
            let u: Vec<f64> = (0..VISUAL_DIM).map(|i| visual_channel(frame, i)).collect();
            vec![u[0], u[1], u[2], u[3], u[4], u[5], u[0] - u[3], u[1] - u[5]]
        }
    };
    FeatureVector { values }
}

/// Concatenated features for the direct state classifier, filtered by
/// modality mask. Motion/force block first, then the visual block.
pub fn state_features(frame: &ObservationFrame, mask: ModalityMask) -> Vec<f64> {
    let f = &frame.force;
    let v = &frame.velocity;
    let mut out = Vec::with_capacity(14);
    if mask != ModalityMask::VisualOnly {
        out.extend_from_slice(&[norm3(f), f[2], norm_xy(f), norm3(v), v[2], norm_xy(v)]);
    }
    if mask != ModalityMask::MotionForceOnly {
        let u: Vec<f64> = (0..VISUAL_DIM).map(|i| visual_channel(frame, i)).collect();
        out.extend_from_slice(&[u[0], u[1], u[2], u[3], u[4], u[5], u[0] - u[3], u[1] - u[5]]);
    }
    out
}

// ---------------------------------------------------------------------------
// Predicate sensors
// ---------------------------------------------------------------------------

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// A trained binary classifier for one predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateSensor {
    pub predicate_id: String,
    pub recipe: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// False when no training frame determined this predicate; the sensor
    /// then reports a constant 0.5.
    pub trained: bool,
}

impl PredicateSensor {
    pub fn untrained(predicate: &Predicate, feature_len: usize) -> Self {
        PredicateSensor {
            predicate_id: predicate.id.clone(),
            recipe: recipe_tag(predicate).to_string(),
            weights: vec![0.0; feature_len],
            bias: 0.0,
            trained: false,
        }
    }

    /// Classifier output `sigma(w.x + b)`, clamped away from 0 and 1.
    pub fn predict(&self, x: &FeatureVector) -> Result<f64, SensorError> {
        if x.values.len() != self.weights.len() {
            return Err(SensorError::DimensionMismatch {
                expected: self.weights.len(),
                got: x.values.len(),
            });
        }
        Ok(clamp_prob(sigmoid(self.score(&x.values))))
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(x)
            .map(|(w, xi)| w * xi)
            .sum::<f64>()
            + self.bias
    }

    /// Extract this predicate's features from `frame` and classify.
    pub fn predict_frame(&self, frame: &ObservationFrame, predicate: &Predicate) -> f64 {
        let x = extract_features(frame, predicate);
        clamp_prob(sigmoid(self.score(&x.values)))
    }
}

/// Training hyperparameters for both sensor kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
    pub seed: u64,
    /// Per-state cap applied during balanced resampling; keeps the balanced
    /// set bounded when one state dominates a large dataset.
    pub max_per_state: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            iterations: 500,
            l2: 1e-3,
            seed: 0,
            max_per_state: 4000,
        }
    }
}

/// The full sensor bank, ordered like `spec.predicates`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateSensorSet {
    pub sensors: Vec<PredicateSensor>,
    pub seed: u64,
    pub l2: f64,
    pub iterations: usize,
}

impl PredicateSensorSet {
    pub fn sensor(&self, predicate_id: &str) -> Option<&PredicateSensor> {
        self.sensors.iter().find(|s| s.predicate_id == predicate_id)
    }

    /// Classifier outputs for every predicate of `spec`, in order.
    pub fn predict_all(&self, frame: &ObservationFrame, spec: &DomainSpec) -> Vec<f64> {
        spec.predicates
            .iter()
            .zip(&self.sensors)
            .map(|(p, s)| s.predict_frame(frame, p))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Masked loss
// ---------------------------------------------------------------------------

fn state_of<'a>(spec: &'a DomainSpec, id: &str) -> Result<&'a SymbolicState, SensorError> {
    spec.state(id)
        .ok_or_else(|| SensorError::UnknownState(id.to_string()))
}

/// Masked cross-entropy for one labeled frame: predicates the frame's state
/// leaves open contribute exactly zero. Non-negative.
pub fn masked_loss(
    sensors: &PredicateSensorSet,
    frame: &LabeledFrame,
    spec: &DomainSpec,
) -> Result<f64, SensorError> {
    let state = state_of(spec, &frame.state_id)?;
    let mut loss = 0.0;
    for (pred, sensor) in spec.predicates.iter().zip(&sensors.sensors) {
        if let Some(truth) = state.truth(&pred.id) {
            let h = sensor.predict_frame(&frame.frame, pred);
            let y = if truth { 1.0 } else { 0.0 };
            loss -= y * h.ln() + (1.0 - y) * (1.0 - h).ln();
        }
    }
    Ok(loss)
}

/// Analytic gradient of [`masked_loss`] with respect to every sensor's
/// `(weights, bias)`. Masked-out predicates get exactly zero gradients.
///
/// The output clamp is treated as the identity; it only binds for scores
/// beyond |w.x + b| > 13.8, far outside the training regime.
pub fn masked_loss_gradient(
    sensors: &PredicateSensorSet,
    frame: &LabeledFrame,
    spec: &DomainSpec,
) -> Result<Vec<(Vec<f64>, f64)>, SensorError> {
    let state = state_of(spec, &frame.state_id)?;
    let mut grads = Vec::with_capacity(spec.predicates.len());
    for (pred, sensor) in spec.predicates.iter().zip(&sensors.sensors) {
        match state.truth(&pred.id) {
            Some(truth) => {
                let x = extract_features(&frame.frame, pred);
                let h = sigmoid(sensor.score(&x.values));
                let y = if truth { 1.0 } else { 0.0 };
                let d = h - y;
                let gw = x.values.iter().map(|xi| d * xi).collect();
                grads.push((gw, d));
            }
            None => grads.push((vec![0.0; sensor.weights.len()], 0.0)),
        }
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Balanced resampling
// ---------------------------------------------------------------------------

/// Indices into `data` such that every visited state contributes the same
/// number of frames. States above the target are subsampled without
/// replacement; states below it are duplicated (whole copies plus a seeded
/// remainder draw).
pub fn balanced_indices(
    data: &[LabeledFrame],
    spec: &DomainSpec,
    seed: u64,
    max_per_state: usize,
) -> Vec<usize> {
    let mut per_state: Vec<Vec<usize>> = vec![Vec::new(); spec.num_states()];
    for (i, lf) in data.iter().enumerate() {
        if let Some(s) = spec.state_index(&lf.state_id) {
            per_state[s].push(i);
        }
    }
    let max_count = per_state.iter().map(Vec::len).max().unwrap_or(0);
    let target = max_count.min(max_per_state.max(1));

    let mut out = Vec::new();
    for (s, idxs) in per_state.iter().enumerate() {
        if idxs.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed_n(seed, &[0x6261_6c61, s as u64]));
        if idxs.len() >= target {
            let mut pool = idxs.clone();
            pool.shuffle(&mut rng);
            pool.truncate(target);
            pool.sort_unstable();
            out.extend(pool);
        } else {
            for _ in 0..target / idxs.len() {
                out.extend(idxs.iter().copied());
            }
            let mut pool = idxs.clone();
            pool.shuffle(&mut rng);
            pool.truncate(target % idxs.len());
            pool.sort_unstable();
            out.extend(pool);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Logistic training
// ---------------------------------------------------------------------------

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    /// Rewrite standardized-space weights so the model applies to raw
    /// features directly.
    fn fold(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let raw_w: Vec<f64> = w.iter().zip(&self.std).map(|(wi, s)| wi / s).collect();
        let shift: f64 = raw_w.iter().zip(&self.mean).map(|(wi, m)| wi * m).sum();
        (raw_w, b - shift)
    }
}

fn train_logistic(xs: &[Vec<f64>], ys: &[f64], cfg: &TrainConfig) -> (Vec<f64>, f64) {
    let d = xs.first().map(|r| r.len()).unwrap_or(0);
    let m = xs.len() as f64;
    let std = Standardizer::fit(xs);
    let zs: Vec<Vec<f64>> = xs.iter().map(|r| std.apply(r)).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in zs.iter().zip(ys) {
            let z = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let d_i = sigmoid(z) - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += d_i * xi;
            }
            gb += d_i;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * (g / m + 2.0 * cfg.l2 * *wi);
        }
        b -= cfg.learning_rate * gb / m;
    }
    std.fold(&w, b)
}

/// Train one logistic sensor per predicate on the masked, state-balanced
/// dataset. A predicate determined by no frame's state comes back flagged
/// `trained: false` and predicts a constant 0.5.
pub fn train_predicate_sensors(
    data: &[LabeledFrame],
    spec: &DomainSpec,
    cfg: &TrainConfig,
) -> Result<PredicateSensorSet, SensorError> {
    if data.is_empty() {
        return Err(SensorError::EmptyTrainingSet);
    }
    for lf in data {
        if spec.state_index(&lf.state_id).is_none() {
            return Err(SensorError::UnknownState(lf.state_id.clone()));
        }
    }
    let picked = balanced_indices(data, spec, cfg.seed, cfg.max_per_state);

    let sensors = par::map(&spec.predicates, |pred| {
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for &i in &picked {
            let lf = &data[i];
            let state = spec.state(&lf.state_id).expect("validated above");
            if let Some(truth) = state.truth(&pred.id) {
                xs.push(extract_features(&lf.frame, pred).values);
                ys.push(if truth { 1.0 } else { 0.0 });
            }
        }
        let feature_len = extract_features(&ObservationFrame::zero(), pred).values.len();
        if xs.is_empty() {
            return PredicateSensor::untrained(pred, feature_len);
        }
        let (weights, bias) = train_logistic(&xs, &ys, cfg);
        PredicateSensor {
            predicate_id: pred.id.clone(),
            recipe: recipe_tag(pred).to_string(),
            weights,
            bias,
            trained: true,
        }
    });

    Ok(PredicateSensorSet {
        sensors,
        seed: cfg.seed,
        l2: cfg.l2,
        iterations: cfg.iterations,
    })
}

// ---------------------------------------------------------------------------
// Direct state classifier baseline
// ---------------------------------------------------------------------------

/// Softmax regression over concatenated modality features; the baseline that
/// classifies the symbolic state directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateClassifier {
    /// One weight vector per state, ordered like `spec.states`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub modality_mask: ModalityMask,
    pub seed: u64,
}

impl StateClassifier {
    /// Probability vector over states; sums to 1.
    pub fn predict_state(&self, frame: &ObservationFrame) -> Vec<f64> {
        let x = state_features(frame, self.modality_mask);
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() + b)
            .collect();
        softmax(&logits)
    }

    /// Index of the most probable state, earlier index winning ties.
    pub fn predict_argmax(&self, frame: &ObservationFrame) -> usize {
        let p = self.predict_state(frame);
        argmax(&p)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Train the multi-class state classifier on the balanced dataset.
pub fn train_state_classifier(
    data: &[LabeledFrame],
    spec: &DomainSpec,
    cfg: &TrainConfig,
    mask: ModalityMask,
) -> Result<StateClassifier, SensorError> {
    if data.is_empty() {
        return Err(SensorError::EmptyTrainingSet);
    }
    let picked = balanced_indices(data, spec, cfg.seed, cfg.max_per_state);
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(picked.len());
    let mut ys: Vec<usize> = Vec::with_capacity(picked.len());
    for &i in &picked {
        let lf = &data[i];
        let s = spec
            .state_index(&lf.state_id)
            .ok_or_else(|| SensorError::UnknownState(lf.state_id.clone()))?;
        xs.push(state_features(&lf.frame, mask));
        ys.push(s);
    }

    let d = xs[0].len();
    let k = spec.num_states();
    let m = xs.len() as f64;
    let std = Standardizer::fit(&xs);
    let zs: Vec<Vec<f64>> = xs.iter().map(|r| std.apply(r)).collect();

    let mut w = vec![vec![0.0; d]; k];
    let mut b = vec![0.0; k];
    for _ in 0..cfg.iterations {
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for (x, &y) in zs.iter().zip(&ys) {
            let logits: Vec<f64> = w
                .iter()
                .zip(&b)
                .map(|(wk, bk)| wk.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + bk)
                .collect();
            let p = softmax(&logits);
            for c in 0..k {
                let d_i = p[c] - if c == y { 1.0 } else { 0.0 };
                for (g, xi) in gw[c].iter_mut().zip(x) {
                    *g += d_i * xi;
                }
                gb[c] += d_i;
            }
        }
        for c in 0..k {
            for (wi, g) in w[c].iter_mut().zip(&gw[c]) {
                *wi -= cfg.learning_rate * (g / m + 2.0 * cfg.l2 * *wi);
            }
            b[c] -= cfg.learning_rate * gb[c] / m;
        }
    }

    let mut weights = Vec::with_capacity(k);
    let mut biases = Vec::with_capacity(k);
    for c in 0..k {
        let (wr, br) = std.fold(&w[c], b[c]);
        weights.push(wr);
        biases.push(br);
    }
    Ok(StateClassifier {
        weights,
        biases,
        modality_mask: mask,
        seed: cfg.seed,
    })
}
