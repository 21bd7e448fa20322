//! File formats. Everything is text-based and deterministic: fixed key
//! order, shortest-round-trip float formatting, no hash-map iteration.
//!
//! Dataset files are JSON lines. A header record opens each episode and one
//! frame record follows per line:
//!
//! ```text
//! {"header":{"task_id":"dsub","seed":42,"dt":0.02,"noise":{...}}}
//! {"t":0.02,"action":"Prepare","state":"FREE","pos":[...],"vel":[...],"force":[...],"vis":[...]}
//! ```
//!
//! Model files are pretty-printed JSON documents; observation and transition
//! models are stored as explicit per-record lists so they stay diffable.
//! Belief traces and evaluation reports are CSV.

use crate::domain::DomainSpec;
use crate::eval::{GeneralizationReport, MethodId, OfflineReport, OnlineReport};
use crate::executor::EpisodeResult;
use crate::filter::TransitionModel;
use crate::obsmodel::{FallbackTier, Gmm1D, ObsEntry, ObservationModelSet};
use crate::sensors::{LabeledFrame, ObservationFrame, PredicateSensorSet};
use crate::sim::{NoiseConfig, Trajectory, TrajectoryHeader};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("cannot access `{path}`: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("`{path}` is not valid JSON: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("dataset `{path}` contains a frame before any header record")]
    FrameBeforeHeader { path: String },
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Dataset (JSON lines)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    header: TrajectoryHeader,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    t: f64,
    action: String,
    state: String,
    pos: [f64; 3],
    vel: [f64; 3],
    force: [f64; 3],
    vis: Vec<f64>,
}

impl FrameRecord {
    fn from_labeled(lf: &LabeledFrame) -> FrameRecord {
        FrameRecord {
            t: lf.frame.t,
            action: lf.frame.action_id.clone(),
            state: lf.state_id.clone(),
            pos: lf.frame.position,
            vel: lf.frame.velocity,
            force: lf.frame.force,
            vis: lf.frame.visual.clone(),
        }
    }

    fn into_labeled(self) -> LabeledFrame {
        LabeledFrame {
            frame: ObservationFrame {
                t: self.t,
                action_id: self.action,
                position: self.pos,
                velocity: self.vel,
                force: self.force,
                visual: self.vis,
            },
            state_id: self.state,
        }
    }
}

/// Write trajectories as a JSON-lines dataset file.
pub fn write_dataset(path: &Path, dataset: &[Trajectory]) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    for traj in dataset {
        let header = serde_json::to_string(&HeaderRecord {
            header: traj.header.clone(),
        })
        .expect("header serializes");
        writeln!(w, "{header}").map_err(|e| file_err(path, e))?;
        for lf in &traj.frames {
            let line =
                serde_json::to_string(&FrameRecord::from_labeled(lf)).expect("frame serializes");
            writeln!(w, "{line}").map_err(|e| file_err(path, e))?;
        }
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Read a JSON-lines dataset file.
pub fn read_dataset(path: &Path) -> Result<Vec<Trajectory>, IoError> {
    let file = fs::File::open(path).map_err(|e| file_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out: Vec<Trajectory> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| file_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(h) = serde_json::from_str::<HeaderRecord>(&line) {
            out.push(Trajectory {
                header: h.header,
                frames: Vec::new(),
            });
            continue;
        }
        let frame: FrameRecord =
            serde_json::from_str(&line).map_err(|e| IoError::Malformed {
                path: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        match out.last_mut() {
            Some(traj) => traj.frames.push(frame.into_labeled()),
            None => {
                return Err(IoError::FrameBeforeHeader {
                    path: path.display().to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Dataset manifest written next to the dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub episodes: usize,
    pub total_frames: usize,
    /// (task id, episode count) in dataset order.
    pub tasks: Vec<(String, usize)>,
    pub noise: NoiseConfig,
}

impl DatasetManifest {
    pub fn describe(dataset: &[Trajectory], seed: u64, noise: &NoiseConfig) -> DatasetManifest {
        let mut tasks: Vec<(String, usize)> = Vec::new();
        for t in dataset {
            if let Some(entry) = tasks.iter_mut().find(|(id, _)| id == &t.header.task_id) {
                entry.1 += 1;
            } else {
                tasks.push((t.header.task_id.clone(), 1));
            }
        }
        DatasetManifest {
            seed,
            episodes: dataset.len(),
            total_frames: dataset.iter().map(|t| t.frames.len()).sum(),
            tasks,
            noise: noise.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Generic JSON documents
// ---------------------------------------------------------------------------

/// Write any serializable document as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("document serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| file_err(path, e))
}

/// Read a JSON document.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Json {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_sensors(path: &Path, sensors: &PredicateSensorSet) -> Result<(), IoError> {
    write_json(path, sensors)
}

pub fn read_sensors(path: &Path) -> Result<PredicateSensorSet, IoError> {
    read_json(path)
}

// ---------------------------------------------------------------------------
// Observation model file (per-triple records)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObsRecord {
    pub state: String,
    pub action: String,
    pub predicate: String,
    pub tier: FallbackTier,
    pub components: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObsModelFile {
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub predicates: Vec<String>,
    pub seed: u64,
    pub min_samples: usize,
    pub records: Vec<ObsRecord>,
}

impl ObsModelFile {
    pub fn from_set(set: &ObservationModelSet) -> ObsModelFile {
        let mut records = Vec::with_capacity(set.entries.len());
        for (s, state) in set.state_ids.iter().enumerate() {
            for (a, action) in set.action_ids.iter().enumerate() {
                for (p, predicate) in set.predicate_ids.iter().enumerate() {
                    let entry = set.entry(s, a, p);
                    let (components, weights, means, variances) = match &entry.gmm {
                        Some(g) => (
                            g.components(),
                            g.weights.clone(),
                            g.means.clone(),
                            g.variances.clone(),
                        ),
                        None => (0, Vec::new(), Vec::new(), Vec::new()),
                    };
                    records.push(ObsRecord {
                        state: state.clone(),
                        action: action.clone(),
                        predicate: predicate.clone(),
                        tier: entry.tier,
                        components,
                        weights,
                        means,
                        variances,
                    });
                }
            }
        }
        ObsModelFile {
            states: set.state_ids.clone(),
            actions: set.action_ids.clone(),
            predicates: set.predicate_ids.clone(),
            seed: set.seed,
            min_samples: set.min_samples,
            records,
        }
    }

    pub fn into_set(self) -> ObservationModelSet {
        let entries = self
            .records
            .into_iter()
            .map(|r| ObsEntry {
                tier: r.tier,
                gmm: (r.components > 0).then(|| Gmm1D {
                    weights: r.weights,
                    means: r.means,
                    variances: r.variances,
                }),
            })
            .collect();
        ObservationModelSet {
            state_ids: self.states,
            action_ids: self.actions,
            predicate_ids: self.predicates,
            entries,
            seed: self.seed,
            min_samples: self.min_samples,
        }
    }
}

pub fn write_obs_models(path: &Path, set: &ObservationModelSet) -> Result<(), IoError> {
    write_json(path, &ObsModelFile::from_set(set))
}

pub fn read_obs_models(path: &Path) -> Result<ObservationModelSet, IoError> {
    Ok(read_json::<ObsModelFile>(path)?.into_set())
}

// ---------------------------------------------------------------------------
// Transition model file (prior + per-(state, action) rows)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionRow {
    pub state: String,
    pub action: String,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionFile {
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub alpha: f64,
    pub prior: Vec<f64>,
    pub rows: Vec<TransitionRow>,
}

impl TransitionFile {
    pub fn from_model(tm: &TransitionModel) -> TransitionFile {
        let mut rows = Vec::new();
        for (s, state) in tm.state_ids.iter().enumerate() {
            for (a, action) in tm.action_ids.iter().enumerate() {
                rows.push(TransitionRow {
                    state: state.clone(),
                    action: action.clone(),
                    probs: tm.row(s, a).to_vec(),
                });
            }
        }
        TransitionFile {
            states: tm.state_ids.clone(),
            actions: tm.action_ids.clone(),
            alpha: tm.alpha,
            prior: tm.prior.clone(),
            rows,
        }
    }

    pub fn into_model(self) -> TransitionModel {
        let transitions = self.rows.into_iter().flat_map(|r| r.probs).collect();
        TransitionModel {
            state_ids: self.states,
            action_ids: self.actions,
            transitions,
            prior: self.prior,
            alpha: self.alpha,
        }
    }
}

pub fn write_transitions(path: &Path, tm: &TransitionModel) -> Result<(), IoError> {
    write_json(path, &TransitionFile::from_model(tm))
}

pub fn read_transitions(path: &Path) -> Result<TransitionModel, IoError> {
    Ok(read_json::<TransitionFile>(path)?.into_model())
}

// ---------------------------------------------------------------------------
// Belief traces and reports (CSV)
// ---------------------------------------------------------------------------

/// One exported belief-trace row.
pub struct TraceRow<'a> {
    pub t: f64,
    pub action: &'a str,
    pub probs: &'a [f64],
    pub map_state: &'a str,
}

/// Write a belief trace as CSV: `t,action,map_state,p_<STATE>...`.
pub fn write_belief_trace<'a>(
    path: &Path,
    spec: &DomainSpec,
    rows: impl Iterator<Item = TraceRow<'a>>,
) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("t,action,map_state");
    for s in &spec.states {
        header.push_str(&format!(",p_{}", s.id));
    }
    writeln!(w, "{header}").map_err(|e| file_err(path, e))?;
    for row in rows {
        let probs: Vec<String> = row.probs.iter().map(|p| format!("{p}")).collect();
        writeln!(
            w,
            "{},{},{},{}",
            row.t,
            row.action,
            row.map_state,
            probs.join(",")
        )
        .map_err(|e| file_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Write episode results as a JSON document (summaries only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub task_id: String,
    pub seed: u64,
    pub success: bool,
    pub wall_time: f64,
    pub termination: String,
    pub frames: usize,
}

impl EpisodeSummary {
    pub fn from_result(r: &EpisodeResult) -> EpisodeSummary {
        EpisodeSummary {
            task_id: r.task_id.clone(),
            seed: r.seed,
            success: r.success,
            wall_time: r.wall_time,
            termination: format!("{:?}", r.termination).to_lowercase(),
            frames: r.trace.len(),
        }
    }
}

/// Offline report CSV: one row per (fold, method).
pub fn write_offline_csv(
    path: &Path,
    spec: &DomainSpec,
    report: &OfflineReport,
) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("fold,method,accuracy,macro_f1");
    for s in &spec.states {
        header.push_str(&format!(",f1_{}", s.id));
    }
    writeln!(w, "{header}").map_err(|e| file_err(path, e))?;
    for fold in &report.folds {
        for (method, metrics) in &fold.methods {
            let mut line = format!(
                "{},{},{},{}",
                fold.fold,
                method.as_str(),
                metrics.accuracy,
                metrics.macro_f1
            );
            for s in &spec.states {
                let f1 = metrics.state(&s.id).map(|m| m.f1).unwrap_or(0.0);
                line.push_str(&format!(",{f1}"));
            }
            writeln!(w, "{line}").map_err(|e| file_err(path, e))?;
        }
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Generalization report CSV: one row per (held-out task, repetition).
pub fn write_generalization_csv(
    path: &Path,
    report: &GeneralizationReport,
) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "held_out_task,repetition,pred_accuracy,pred_macro_f1,state_accuracy,state_macro_f1"
    )
    .map_err(|e| file_err(path, e))?;
    for h in &report.held_out {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            h.task_id,
            h.repetition,
            h.pred.accuracy,
            h.pred.macro_f1,
            h.state.accuracy,
            h.state.macro_f1
        )
        .map_err(|e| file_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Online report CSV: one row per (task, method).
pub fn write_online_csv(path: &Path, report: &OnlineReport) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "task,method,successes,episodes,success_rate").map_err(|e| file_err(path, e))?;
    for cell in &report.cells {
        let rate = cell.successes as f64 / cell.episodes.max(1) as f64;
        writeln!(
            w,
            "{},{},{},{},{}",
            cell.task_id,
            cell.method.as_str(),
            cell.successes,
            cell.episodes,
            rate
        )
        .map_err(|e| file_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Machine-readable summary of an offline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineSummary {
    pub methods: Vec<MethodSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
}

impl OfflineSummary {
    pub fn from_report(report: &OfflineReport, methods: &[MethodId]) -> OfflineSummary {
        OfflineSummary {
            methods: methods
                .iter()
                .map(|&m| MethodSummary {
                    method: m.as_str().to_string(),
                    mean_accuracy: report.mean_accuracy(m),
                    mean_macro_f1: report.mean_macro_f1(m),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::insertion_domain;
    use crate::sim::{generate_dataset, TaskConfig};
    use tempfile::tempdir;

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let spec = insertion_domain();
        let tasks = TaskConfig::builtin_all();
        let data = generate_dataset(&tasks[..2], 2, &spec, &NoiseConfig::default(), 5).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&path, &data).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(data, back);
        // And the file itself is stable across rewrites.
        let first = fs::read(&path).unwrap();
        write_dataset(&path, &back).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn frame_before_header_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"t\":0.0,\"action\":\"A\",\"state\":\"FREE\",\"pos\":[0,0,0],\"vel\":[0,0,0],\"force\":[0,0,0],\"vis\":[0,0,0,0,0,0]}\n",
        )
        .unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(IoError::FrameBeforeHeader { .. })
        ));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"header\":{\"task_id\":\"x\",\"seed\":1,\"dt\":0.02,\"noise\":{\"sigma_position\":0,\"sigma_velocity\":0,\"sigma_force\":0,\"sigma_visual\":0}}}\nnot json\n").unwrap();
        match read_dataset(&path) {
            Err(IoError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn obs_model_file_round_trips() {
        use crate::obsmodel::{fit_observation_models, MIN_SAMPLES_PER_TRIPLE};
        use crate::sensors::{train_predicate_sensors, TrainConfig};
        let spec = insertion_domain();
        let tasks = TaskConfig::builtin_all();
        let data = generate_dataset(&tasks[..1], 4, &spec, &NoiseConfig::default(), 7).unwrap();
        let frames: Vec<LabeledFrame> = data.iter().flat_map(|t| t.frames.clone()).collect();
        let cfg = TrainConfig {
            iterations: 50,
            ..TrainConfig::default()
        };
        let sensors = train_predicate_sensors(&frames, &spec, &cfg).unwrap();
        let set = fit_observation_models(&frames, &sensors, &spec, 1).unwrap();
        assert!(set.min_samples == MIN_SAMPLES_PER_TRIPLE);

        let dir = tempdir().unwrap();
        let path = dir.path().join("obs.json");
        write_obs_models(&path, &set).unwrap();
        let back = read_obs_models(&path).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn transition_file_round_trips() {
        use crate::filter::estimate_transitions;
        let spec = insertion_domain();
        let tasks = TaskConfig::builtin_all();
        let data = generate_dataset(&tasks[..1], 3, &spec, &NoiseConfig::default(), 9).unwrap();
        let tm = estimate_transitions(&data, &spec, 0.1).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("tm.json");
        write_transitions(&path, &tm).unwrap();
        let back = read_transitions(&path).unwrap();
        assert_eq!(tm, back);
    }

    #[test]
    fn belief_trace_has_one_row_per_frame() {
        let spec = insertion_domain();
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let probs = vec![vec![0.5, 0.1, 0.1, 0.1, 0.1, 0.1], vec![0.2, 0.2, 0.2, 0.2, 0.1, 0.1]];
        let rows = probs.iter().enumerate().map(|(i, p)| TraceRow {
            t: i as f64 * 0.02,
            action: "Search",
            probs: p,
            map_state: "FREE",
        });
        write_belief_trace(&path, &spec, rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("t,action,map_state,p_FREE,"));
    }
}
