//! Deterministic desk-scale peg-in-hole simulator.
//!
//! Unit-mass point dynamics for the peg tip under the action's impedance
//! law `-kp (x - x_d) - kd (v - v_d) - ff`, integrated semi-implicitly at
//! 50 Hz. Contact clamps the tip at the board surface with a penetration
//! spring; while the tip crosses the hole window under contact it is
//! captured, admitted below the surface against wall drag, and bottoms out
//! at the insertion depth. Sliding outside the board bounds risks a
//! per-step Bernoulli fall onto the lower table, which only lifting clears.
//!
//! Every episode consumes one seeded RNG stream for both the fall draws and
//! the sensor noise, so a (task, schedule, seed) triple reproduces the same
//! trajectory bit for bit.

use crate::domain::{actions, states, Action, DomainSpec, RefTrajectory};
use crate::sensors::{LabeledFrame, ObservationFrame, VISUAL_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Control period, s (50 Hz).
pub const DEFAULT_DT: f64 = 0.02;

/// Penetration spring constant, N/m. Chosen as 1/dt^2 so the sensed normal
/// force equals the applied downward force in steady contact.
pub const PENETRATION_SPRING: f64 = 2500.0;

/// Vertical drag inside the hole, N·s/m. Sets the drop speed through the
/// hole and with it how long the ALIGNED state lasts (roughly 0.2-0.5 s).
pub const WALL_DRAG: f64 = 150.0;

/// How far below the board surface the lower table sits, m.
pub const FALL_DROP: f64 = 0.025;

/// Lift height above the surface that clears a fall, m.
pub const FALL_CLEAR_HEIGHT: f64 = 0.004;

/// Hover height of the approach pose above the surface, m.
pub const HOVER_HEIGHT: f64 = 0.02;

/// Lissajous sweep parameters: `(A sin(a t + delta), B sin(b t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LissajousParams {
    pub amp_x: f64,
    pub amp_y: f64,
    pub freq_x: f64,
    pub freq_y: f64,
    pub phase: f64,
}

impl Default for LissajousParams {
    fn default() -> Self {
        LissajousParams {
            amp_x: 0.009,
            amp_y: 0.009,
            freq_x: 2.4,
            freq_y: 3.7,
            phase: 0.0,
        }
    }
}

/// Planar Lissajous reference at time `t`.
pub fn lissajous_reference(t: f64, p: &LissajousParams) -> [f64; 2] {
    [
        p.amp_x * (p.freq_x * t + p.phase).sin(),
        p.amp_y * (p.freq_y * t).sin(),
    ]
}

fn lissajous_velocity(t: f64, p: &LissajousParams) -> [f64; 2] {
    [
        p.amp_x * p.freq_x * (p.freq_x * t + p.phase).cos(),
        p.amp_y * p.freq_y * (p.freq_y * t).cos(),
    ]
}

/// Geometry and stochastic difficulty of one task variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_id: String,
    /// True hole center; z is the board surface height.
    pub hole_center: [f64; 3],
    /// Capture window half extents (clearance), m.
    pub hole_half_extent: [f64; 2],
    pub surface_height: f64,
    pub board_center: [f64; 2],
    pub board_half_extent: [f64; 2],
    pub insertion_depth: f64,
    pub friction: f64,
    /// Per-step probability of slipping off while sliding outside the board.
    pub fall_probability: f64,
    /// Miscalibration of the policy's hole estimate: nominal = true + offset.
    pub approach_offset: [f64; 2],
    pub search: LissajousParams,
}

impl TaskConfig {
    /// The hole position the policy believes in.
    pub fn nominal_xy(&self) -> [f64; 2] {
        [
            self.hole_center[0] + self.approach_offset[0],
            self.hole_center[1] + self.approach_offset[1],
        ]
    }

    /// Move the true hole by `d` while keeping the policy's nominal estimate
    /// where it was.
    pub fn with_hole_perturbation(&self, d: [f64; 2]) -> TaskConfig {
        let mut t = self.clone();
        t.hole_center[0] += d[0];
        t.hole_center[1] += d[1];
        t.approach_offset[0] -= d[0];
        t.approach_offset[1] -= d[1];
        t
    }

    pub fn in_hole_window(&self, xy: [f64; 2]) -> bool {
        (xy[0] - self.hole_center[0]).abs() <= self.hole_half_extent[0]
            && (xy[1] - self.hole_center[1]).abs() <= self.hole_half_extent[1]
    }

    pub fn on_board(&self, xy: [f64; 2]) -> bool {
        (xy[0] - self.board_center[0]).abs() <= self.board_half_extent[0]
            && (xy[1] - self.board_center[1]).abs() <= self.board_half_extent[1]
    }

    fn outside_board_distance(&self, xy: [f64; 2]) -> f64 {
        let dx = ((xy[0] - self.board_center[0]).abs() - self.board_half_extent[0]).max(0.0);
        let dy = ((xy[1] - self.board_center[1]).abs() - self.board_half_extent[1]).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }

    /// The 8 shipped task variants. The first four are pegs with generous
    /// clearance; the last four are connectors with tight clearance, larger
    /// hole-estimate offsets and a higher fall risk near the board edge.
    pub fn builtin_all() -> Vec<TaskConfig> {
        let mk = |task_id: &str,
                  surface: f64,
                  hole_xy: [f64; 2],
                  ext: [f64; 2],
                  depth: f64,
                  offset: [f64; 2],
                  friction: f64,
                  p_fall: f64| TaskConfig {
            task_id: task_id.to_string(),
            hole_center: [hole_xy[0], hole_xy[1], surface],
            hole_half_extent: ext,
            surface_height: surface,
            board_center: [0.0, 0.0],
            board_half_extent: [0.022, 0.022],
            insertion_depth: depth,
            friction,
            fall_probability: p_fall,
            approach_offset: offset,
            search: LissajousParams::default(),
        };
        vec![
            mk("rect-peg-8x7", 0.100, [0.004, 0.003], [0.0018, 0.0016], 0.012, [0.0025, -0.002], 0.15, 0.010),
            mk("rect-peg-12x8", 0.102, [-0.003, 0.005], [0.0016, 0.0014], 0.012, [-0.003, 0.002], 0.20, 0.012),
            mk("round-peg-12", 0.098, [0.002, -0.004], [0.0015, 0.0015], 0.014, [0.003, 0.003], 0.15, 0.010),
            mk("round-peg-16", 0.095, [-0.005, -0.002], [0.0020, 0.0020], 0.014, [-0.002, -0.0035], 0.25, 0.012),
            mk("dsub", 0.104, [0.012, 0.008], [0.0009, 0.0013], 0.010, [0.004, -0.003], 0.35, 0.035),
            mk("usb", 0.101, [-0.011, 0.010], [0.0010, 0.0010], 0.010, [-0.0045, 0.0025], 0.30, 0.030),
            mk("rj45", 0.099, [0.010, -0.011], [0.0011, 0.0011], 0.011, [0.0035, 0.004], 0.30, 0.032),
            mk("waterproof", 0.103, [-0.004, 0.001], [0.0012, 0.0012], 0.013, [0.002, 0.0045], 0.25, 0.015),
        ]
    }

    pub fn builtin(task_id: &str) -> Option<TaskConfig> {
        TaskConfig::builtin_all().into_iter().find(|t| t.task_id == task_id)
    }

    /// The three most error-prone variants, used for online evaluation.
    pub fn hard_three() -> Vec<TaskConfig> {
        ["dsub", "usb", "rj45"]
            .iter()
            .map(|id| TaskConfig::builtin(id).expect("builtin"))
            .collect()
    }
}

/// Per-channel Gaussian sensor noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_position: f64,
    pub sigma_velocity: f64,
    pub sigma_force: f64,
    pub sigma_visual: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_position: 0.0015,
            sigma_velocity: 0.012,
            sigma_force: 0.45,
            sigma_visual: 0.004,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            sigma_position: 0.0,
            sigma_velocity: 0.0,
            sigma_force: 0.0,
            sigma_visual: 0.0,
        }
    }
}

/// Full simulator state, including the controller anchors the reference
/// generators need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub contact: bool,
    pub aligned: bool,
    pub inserted_depth: f64,
    pub fallen: bool,
    pub clock: f64,
    /// True while a Lissajous sweep is executing; SEARCHING requires it.
    pub search_active: bool,
    /// Noise-free wrench the F/T sensor would read; pressing down is -z.
    pub sensed_force: [f64; 3],
    /// When the current action began.
    pub action_start: f64,
    /// Tip position captured at the last action change.
    pub anchor: [f64; 3],
    /// Where the policy currently believes the hole is.
    pub search_center: [f64; 2],
}

impl SimState {
    /// Peg hovering above the nominal hole estimate.
    pub fn initial(task: &TaskConfig) -> SimState {
        let nominal = task.nominal_xy();
        let position = [nominal[0], nominal[1], task.surface_height + HOVER_HEIGHT + 0.01];
        SimState {
            position,
            velocity: [0.0; 3],
            contact: false,
            aligned: false,
            inserted_depth: 0.0,
            fallen: false,
            clock: 0.0,
            search_active: false,
            sensed_force: [0.0; 3],
            action_start: 0.0,
            anchor: position,
            search_center: nominal,
        }
    }

    /// Record an action switch: anchors the reference generators.
    pub fn on_action_change(&mut self, action: &Action) {
        self.action_start = self.clock;
        self.anchor = self.position;
        self.search_active = action.reference == RefTrajectory::Lissajous;
    }
}

/// Reference pose and velocity for the action at simulator state `s`.
fn reference(action: &Action, s: &SimState, task: &TaskConfig) -> ([f64; 3], [f64; 3]) {
    let t = s.clock - s.action_start;
    match action.reference {
        RefTrajectory::Hold => {
            let xy = s.search_center;
            (
                [xy[0], xy[1], task.surface_height + HOVER_HEIGHT],
                [0.0; 3],
            )
        }
        RefTrajectory::Descend => {
            let xy = s.search_center;
            ([xy[0], xy[1], task.surface_height - 0.006], [0.0; 3])
        }
        RefTrajectory::Lissajous => {
            let offset = lissajous_reference(t, &task.search);
            let vel = lissajous_velocity(t, &task.search);
            (
                [
                    s.search_center[0] + offset[0],
                    s.search_center[1] + offset[1],
                    task.surface_height - 0.004,
                ],
                [vel[0], vel[1], 0.0],
            )
        }
        RefTrajectory::Push => (
            [
                s.anchor[0],
                s.anchor[1],
                task.surface_height - task.insertion_depth - 0.004,
            ],
            [0.0; 3],
        ),
    }
}

/// Advance the simulator by one control period under `action`.
pub fn step(
    s: &SimState,
    action: &Action,
    task: &TaskConfig,
    rng: &mut ChaCha8Rng,
    dt: f64,
) -> SimState {
    let (x_d, v_d) = reference(action, s, task);

    // Impedance law on a unit mass, plus drag and friction from the current
    // contact situation.
    let mut acc = [0.0; 3];
    for i in 0..3 {
        acc[i] = -action.kp[i] * (s.position[i] - x_d[i])
            - action.kd[i] * (s.velocity[i] - v_d[i])
            - action.feedforward[i];
    }
    if s.aligned {
        acc[2] -= WALL_DRAG * s.velocity[2];
    }
    if s.contact && !s.aligned {
        let n = s.sensed_force[2].abs();
        let v_xy = (s.velocity[0] * s.velocity[0] + s.velocity[1] * s.velocity[1]).sqrt();
        if v_xy > 1e-6 {
            acc[0] -= task.friction * n * s.velocity[0] / v_xy;
            acc[1] -= task.friction * n * s.velocity[1] / v_xy;
        }
    }

    let mut next = s.clone();
    next.clock = s.clock + dt;
    next.search_active = action.reference == RefTrajectory::Lissajous;
    for i in 0..3 {
        next.velocity[i] = s.velocity[i] + acc[i] * dt;
        next.position[i] = s.position[i] + next.velocity[i] * dt;
    }
    next.sensed_force = [0.0; 3];
    next.contact = false;

    let surface = task.surface_height;
    let xy = [next.position[0], next.position[1]];

    if next.fallen {
        // Resting plane is the lower table; lifting clears a fall.
        let plane = surface - FALL_DROP;
        if next.position[2] < plane {
            let pen = plane - next.position[2];
            next.position[2] = plane;
            if next.velocity[2] < 0.0 {
                next.velocity[2] = 0.0;
            }
            next.contact = true;
            next.sensed_force[2] = -(PENETRATION_SPRING * pen);
            lateral_friction_readout(&mut next, task);
        }
        if next.position[2] > surface + FALL_CLEAR_HEIGHT {
            next.fallen = false;
        }
        next.aligned = false;
        next.inserted_depth = 0.0;
        return next;
    }

    if next.aligned && next.position[2] > surface + 1e-4 {
        // Lifted back out of the window: the capture releases.
        next.aligned = false;
        next.inserted_depth = 0.0;
    }

    if next.aligned {
        // Captured: xy pinned to the hole axis, walls react laterally.
        let applied_x = acc[0];
        let applied_y = acc[1];
        next.position[0] = task.hole_center[0];
        next.position[1] = task.hole_center[1];
        next.velocity[0] = 0.0;
        next.velocity[1] = 0.0;
        next.sensed_force[0] = applied_x;
        next.sensed_force[1] = applied_y;
        next.contact = true;

        let bottom = surface - task.insertion_depth;
        if next.position[2] <= bottom {
            let pen = bottom - next.position[2];
            next.position[2] = bottom;
            if next.velocity[2] < 0.0 {
                next.velocity[2] = 0.0;
            }
            next.sensed_force[2] = -(PENETRATION_SPRING * pen).max(1.0);
        } else {
            // Wall drag reads as partial vertical support.
            next.sensed_force[2] = -(WALL_DRAG * next.velocity[2].abs()).min(12.0);
        }
        next.inserted_depth = (surface - next.position[2]).clamp(0.0, task.insertion_depth);
        return next;
    }

    // Unaligned and not fallen: the surface plane supports the tip.
    if next.position[2] < surface {
        let pen = surface - next.position[2];
        next.position[2] = surface;
        if next.velocity[2] < 0.0 {
            next.velocity[2] = 0.0;
        }
        next.contact = true;
        next.sensed_force[2] = -(PENETRATION_SPRING * pen);
        lateral_friction_readout(&mut next, task);

        if task.in_hole_window(xy) {
            // Capture: the tip slips into the hole window.
            next.aligned = true;
            next.position[0] = task.hole_center[0];
            next.position[1] = task.hole_center[1];
            next.velocity[0] = 0.0;
            next.velocity[1] = 0.0;
        } else if !task.on_board(xy) && rng.gen::<f64>() < task.fall_probability {
            next.fallen = true;
            next.aligned = false;
            next.position[2] = surface - FALL_DROP;
            next.velocity = [0.0, 0.0, 0.0];
            next.contact = true;
            next.sensed_force = [0.0, 0.0, -1.0];
        }
    }
    next.inserted_depth = 0.0;
    next
}

/// Sensed sliding friction reaction while on a plane.
fn lateral_friction_readout(next: &mut SimState, task: &TaskConfig) {
    let n = next.sensed_force[2].abs();
    let v_xy = (next.velocity[0] * next.velocity[0] + next.velocity[1] * next.velocity[1]).sqrt();
    if v_xy > 1e-6 {
        next.sensed_force[0] = task.friction * n * next.velocity[0] / v_xy;
        next.sensed_force[1] = task.friction * n * next.velocity[1] / v_xy;
    }
}

/// Deterministic ground-truth labeling of a simulator state.
pub fn ground_truth_state(s: &SimState, task: &TaskConfig) -> &'static str {
    if s.fallen {
        states::FALLEN
    } else if s.inserted_depth >= task.insertion_depth {
        states::INSERTED
    } else if s.aligned && s.inserted_depth > 0.0 {
        states::ALIGNED
    } else if s.contact && s.search_active {
        states::SEARCHING
    } else if s.contact {
        states::ONSURFACE
    } else {
        states::FREE
    }
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("sigma >= 0").sample(rng)
}

/// Produce a noisy observation of the simulator state.
///
/// Visual channels are relative geometry only — height above the surface, xy
/// distance to the hole, below-surface amounts inside/outside the hole
/// window, depth fraction, distance off the board — so visual predicates are
/// learnable from them while exact contact timing is not.
pub fn sense(
    s: &SimState,
    task: &TaskConfig,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> ObservationFrame {
    let mut position = s.position;
    let mut velocity = s.velocity;
    let mut force = s.sensed_force;
    for i in 0..3 {
        position[i] += gauss(rng, noise.sigma_position);
        velocity[i] += gauss(rng, noise.sigma_velocity);
        force[i] += gauss(rng, noise.sigma_force);
    }

    let surface = task.surface_height;
    let xy = [s.position[0], s.position[1]];
    let below = (surface - s.position[2]).max(0.0);
    let in_window = task.in_hole_window(xy);
    let height = s.position[2] - surface;
    let dist_hole = ((xy[0] - task.hole_center[0]).powi(2)
        + (xy[1] - task.hole_center[1]).powi(2))
    .sqrt();
    let below_outside = if in_window { 0.0 } else { below };
    let depth_inside = if in_window { below } else { 0.0 };
    let off_board = task.outside_board_distance(xy);

    let u0 = height + gauss(rng, noise.sigma_visual);
    let u1 = dist_hole + gauss(rng, noise.sigma_visual);
    let u2 = below_outside + gauss(rng, noise.sigma_visual);
    let u3 = depth_inside + gauss(rng, noise.sigma_visual);
    let u4 = (u3 / task.insertion_depth).clamp(0.0, 1.5);
    let u5 = off_board + gauss(rng, noise.sigma_visual);
    let visual = vec![u0, u1, u2, u3, u4, u5];
    debug_assert_eq!(visual.len(), VISUAL_DIM);

    ObservationFrame {
        t: s.clock,
        action_id: String::new(),
        position,
        velocity,
        force,
        visual,
    }
}

// ---------------------------------------------------------------------------
// Open-loop rollouts
// ---------------------------------------------------------------------------

/// Condition that ends one open-loop schedule step (besides the action's
/// own max duration). Thresholds read the noisy sensed signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SwitchRule {
    /// Move on after the given duration.
    Duration(f64),
    /// Move on once the tip is within `tol` of the reference pose.
    NearTarget { tol: f64 },
    /// Move on once |F_z| has stayed above `threshold` for `hold` seconds.
    ContactForceHeld { threshold: f64, hold: f64 },
    /// Move on once the sensed tip has dropped `dz` below the height
    /// recorded when this step began.
    DepthDrop { dz: f64 },
}

/// One step of an open-loop schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub action_id: String,
    pub until: SwitchRule,
}

/// A chained open-loop policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: Vec<ScheduleStep>,
}

impl Schedule {
    /// The hand-tuned Prepare -> MakeContact -> Search -> Insert chain used
    /// for data collection.
    pub fn default_open_loop() -> Schedule {
        Schedule {
            steps: vec![
                ScheduleStep {
                    action_id: actions::PREPARE.into(),
                    until: SwitchRule::NearTarget { tol: 0.002 },
                },
                ScheduleStep {
                    action_id: actions::MAKE_CONTACT.into(),
                    until: SwitchRule::ContactForceHeld {
                        threshold: 2.0,
                        hold: 0.3,
                    },
                },
                ScheduleStep {
                    action_id: actions::SEARCH.into(),
                    until: SwitchRule::DepthDrop { dz: 0.005 },
                },
                ScheduleStep {
                    action_id: actions::INSERT.into(),
                    until: SwitchRule::Duration(1.2),
                },
            ],
        }
    }
}

/// Header record of a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub task_id: String,
    pub seed: u64,
    pub dt: f64,
    pub noise: NoiseConfig,
}

/// One labeled episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub frames: Vec<LabeledFrame>,
}

impl AsRef<[LabeledFrame]> for Trajectory {
    fn as_ref(&self) -> &[LabeledFrame] {
        &self.frames
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("schedule references unknown action `{0}`")]
    UnknownAction(String),
}

/// Execute the open-loop schedule on `task` and return the labeled episode.
pub fn rollout_openloop(
    task: &TaskConfig,
    schedule: &Schedule,
    spec: &DomainSpec,
    noise: &NoiseConfig,
    seed: u64,
    dt: f64,
) -> Result<Trajectory, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SimState::initial(task);
    // Small start jitter so episodes differ beyond sensor noise.
    state.position[0] += rng.gen_range(-0.001..0.001);
    state.position[1] += rng.gen_range(-0.001..0.001);
    state.anchor = state.position;

    let mut frames = Vec::new();
    for step_cfg in &schedule.steps {
        let action = spec
            .action(&step_cfg.action_id)
            .ok_or_else(|| SimError::UnknownAction(step_cfg.action_id.clone()))?;
        state.on_action_change(action);
        let step_start = state.clock;
        let mut start_height: Option<f64> = None;
        let mut contact_since: Option<f64> = None;

        loop {
            state = step(&state, action, task, &mut rng, dt);
            let mut frame = sense(&state, task, noise, &mut rng);
            frame.action_id = action.id.clone();
            if start_height.is_none() {
                start_height = Some(frame.position[2]);
            }
            let label = ground_truth_state(&state, task);
            let done = match &step_cfg.until {
                SwitchRule::Duration(d) => state.clock - step_start >= *d,
                SwitchRule::NearTarget { tol } => {
                    let (x_d, _) = reference(action, &state, task);
                    let err = (0..3)
                        .map(|i| (state.position[i] - x_d[i]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    err < *tol
                }
                SwitchRule::ContactForceHeld { threshold, hold } => {
                    if frame.force[2].abs() >= *threshold {
                        if contact_since.is_none() {
                            contact_since = Some(state.clock);
                        }
                    } else {
                        contact_since = None;
                    }
                    contact_since
                        .map(|since| state.clock - since >= *hold)
                        .unwrap_or(false)
                }
                SwitchRule::DepthDrop { dz } => {
                    frame.position[2] < start_height.unwrap_or(f64::INFINITY) - dz
                }
            };
            frames.push(LabeledFrame {
                frame,
                state_id: label.to_string(),
            });
            if done || state.clock - step_start >= action.max_duration {
                break;
            }
        }
    }

    Ok(Trajectory {
        header: TrajectoryHeader {
            task_id: task.task_id.clone(),
            seed,
            dt,
            noise: noise.clone(),
        },
        frames,
    })
}

/// Generate `episodes_per_task` open-loop episodes for every task, with
/// per-episode seeds derived from `seed`. Episodes are independent and run
/// in parallel; output order is fixed by (task, episode) index.
pub fn generate_dataset(
    tasks: &[TaskConfig],
    episodes_per_task: usize,
    spec: &DomainSpec,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Vec<Trajectory>, SimError> {
    let schedule = Schedule::default_open_loop();
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..episodes_per_task).map(move |e| (t, e)))
        .collect();
    let results = crate::par::map(&jobs, |&(t, e)| {
        let ep_seed = crate::par::derive_seed_n(seed, &[t as u64, e as u64]);
        rollout_openloop(&tasks[t], &schedule, spec, noise, ep_seed, DEFAULT_DT)
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::insertion_domain;

    fn quiet() -> NoiseConfig {
        NoiseConfig::none()
    }

    #[test]
    fn lissajous_origin_and_phase() {
        let p = LissajousParams {
            amp_x: 0.01,
            amp_y: 0.02,
            freq_x: 2.0,
            freq_y: 3.0,
            phase: 0.0,
        };
        assert_eq!(lissajous_reference(0.0, &p), [0.0, 0.0]);
        let quarter = LissajousParams {
            phase: std::f64::consts::FRAC_PI_2,
            ..p
        };
        let at0 = lissajous_reference(0.0, &quarter);
        assert!((at0[0] - 0.01).abs() < 1e-12);
        assert!(at0[1].abs() < 1e-12);
    }

    #[test]
    fn lissajous_stays_in_amplitude_box() {
        let p = LissajousParams::default();
        for i in 0..2000 {
            let t = i as f64 * 0.01;
            let xy = lissajous_reference(t, &p);
            assert!(xy[0].abs() <= p.amp_x + 1e-12);
            assert!(xy[1].abs() <= p.amp_y + 1e-12);
        }
    }

    #[test]
    fn equilibrium_state_only_advances_clock() {
        let spec = insertion_domain();
        let task = TaskConfig::builtin("rect-peg-8x7").unwrap();
        let mut s = SimState::initial(&task);
        // Hold at exactly the approach pose with zero velocity.
        let nominal = task.nominal_xy();
        s.position = [nominal[0], nominal[1], task.surface_height + HOVER_HEIGHT];
        s.anchor = s.position;
        let action = spec.action("Prepare").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = step(&s, action, &task, &mut rng, DEFAULT_DT);
        assert_eq!(next.position, s.position);
        assert_eq!(next.velocity, [0.0; 3]);
        assert!((next.clock - DEFAULT_DT).abs() < 1e-15);
    }

    #[test]
    fn descend_reaches_contact_monotonically() {
        let spec = insertion_domain();
        // Steer away from the hole so the tip lands on plain surface.
        let mut task = TaskConfig::builtin("rect-peg-8x7").unwrap();
        task.approach_offset = [0.008, 0.008];
        let mut s = SimState::initial(&task);
        let action = spec.action("MakeContact").unwrap();
        s.on_action_change(action);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut prev_z = s.position[2];
        let mut made_contact = false;
        for _ in 0..200 {
            s = step(&s, action, &task, &mut rng, DEFAULT_DT);
            assert!(s.position[2] <= prev_z + 1e-9, "z must not climb while descending");
            prev_z = s.position[2];
            if s.contact {
                made_contact = true;
                break;
            }
        }
        assert!(made_contact, "descend never reached the surface");
        assert!(s.sensed_force[2] < -1.0, "contact must press: {}", s.sensed_force[2]);
        assert_eq!(ground_truth_state(&s, &task), states::ONSURFACE);
    }

    #[test]
    fn insert_from_aligned_reaches_full_depth() {
        let spec = insertion_domain();
        let task = TaskConfig::builtin("rect-peg-8x7").unwrap();
        let mut s = SimState::initial(&task);
        // Place the captured tip just below the surface.
        s.position = [task.hole_center[0], task.hole_center[1], task.surface_height - 0.001];
        s.velocity = [0.0; 3];
        s.aligned = true;
        s.contact = true;
        s.inserted_depth = 0.001;
        let action = spec.action("Insert").unwrap();
        s.on_action_change(action);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut saw_aligned = false;
        for _ in 0..300 {
            s = step(&s, action, &task, &mut rng, DEFAULT_DT);
            match ground_truth_state(&s, &task) {
                states::ALIGNED => saw_aligned = true,
                states::INSERTED => break,
                other => panic!("unexpected label {other}"),
            }
        }
        assert!(saw_aligned);
        assert_eq!(ground_truth_state(&s, &task), states::INSERTED);
        assert!((s.inserted_depth - task.insertion_depth).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_rules() {
        let task = TaskConfig::builtin("rect-peg-8x7").unwrap();
        let mut s = SimState::initial(&task);
        s.position[2] = task.surface_height + 0.05;
        assert_eq!(ground_truth_state(&s, &task), states::FREE);

        s.inserted_depth = task.insertion_depth;
        assert_eq!(ground_truth_state(&s, &task), states::INSERTED);

        s.inserted_depth = 0.0;
        s.fallen = true;
        assert_eq!(ground_truth_state(&s, &task), states::FALLEN);

        s.fallen = false;
        s.contact = true;
        s.search_active = true;
        assert_eq!(ground_truth_state(&s, &task), states::SEARCHING);
        s.search_active = false;
        assert_eq!(ground_truth_state(&s, &task), states::ONSURFACE);
    }

    #[test]
    fn fall_fires_outside_board_under_contact() {
        let task = {
            let mut t = TaskConfig::builtin("dsub").unwrap();
            t.fall_probability = 1.0;
            t
        };
        let spec = insertion_domain();
        let action = spec.action("Search").unwrap();
        let mut s = SimState::initial(&task);
        // Pressed on the plane just outside the +x board edge.
        s.position = [
            task.board_center[0] + task.board_half_extent[0] + 0.002,
            0.0,
            task.surface_height - 0.001,
        ];
        s.velocity = [0.0, 0.0, -0.01];
        s.search_center = [s.position[0], s.position[1]];
        s.on_action_change(action);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let next = step(&s, action, &task, &mut rng, DEFAULT_DT);
        assert!(next.fallen);
        assert_eq!(ground_truth_state(&next, &task), states::FALLEN);
        assert!(!next.aligned, "fallen implies not aligned");
    }

    #[test]
    fn noiseless_sense_reads_ground_truth() {
        let task = TaskConfig::builtin("round-peg-12").unwrap();
        let mut s = SimState::initial(&task);
        s.sensed_force = [0.1, -0.2, -3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = sense(&s, &task, &quiet(), &mut rng);
        assert_eq!(frame.position, s.position);
        assert_eq!(frame.velocity, s.velocity);
        assert_eq!(frame.force, s.sensed_force);
        assert!((frame.visual[0] - (s.position[2] - task.surface_height)).abs() < 1e-12);
    }

    #[test]
    fn sense_is_deterministic_under_fixed_seed() {
        let task = TaskConfig::builtin("usb").unwrap();
        let s = SimState::initial(&task);
        let noise = NoiseConfig::default();
        let mut rng_a = ChaCha8Rng::seed_from_u64(99);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        assert_eq!(
            sense(&s, &task, &noise, &mut rng_a),
            sense(&s, &task, &noise, &mut rng_b)
        );
    }

    #[test]
    fn force_noise_std_matches_config() {
        let task = TaskConfig::builtin("usb").unwrap();
        let s = SimState::initial(&task);
        let noise = NoiseConfig {
            sigma_force: 0.5,
            ..NoiseConfig::none()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sense(&s, &task, &noise, &mut rng).force[2])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!((std - 0.5).abs() < 0.05, "sample std {std}");
    }

    #[test]
    fn speed_decays_under_pure_damping() {
        let task = TaskConfig::builtin("rect-peg-8x7").unwrap();
        // Nearly zero stiffness isolates the damping path.
        let action = Action {
            id: "damp".into(),
            kp: [1e-9, 1e-9, 1e-9],
            kd: [8.0, 8.0, 8.0],
            reference: RefTrajectory::Hold,
            feedforward: [0.0; 3],
            max_duration: 10.0,
        };
        let mut s = SimState::initial(&task);
        s.position[2] = task.surface_height + 0.2;
        s.search_center = [s.position[0], s.position[1]];
        s.velocity = [0.05, -0.03, 0.02];
        s.anchor = s.position;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut prev_speed = f64::INFINITY;
        for _ in 0..100 {
            s = step(&s, &action, &task, &mut rng, DEFAULT_DT);
            let speed = (s.velocity.iter().map(|v| v * v).sum::<f64>()).sqrt();
            assert!(speed <= prev_speed + 1e-12);
            prev_speed = speed;
        }
    }

    #[test]
    fn benign_rollout_ends_inserted() {
        let spec = insertion_domain();
        // Generous task, no falls, small offset: search must find the hole.
        let mut task = TaskConfig::builtin("rect-peg-8x7").unwrap();
        task.fall_probability = 0.0;
        let traj = rollout_openloop(
            &task,
            &Schedule::default_open_loop(),
            &spec,
            &quiet(),
            5,
            DEFAULT_DT,
        )
        .unwrap();
        let last = traj.frames.last().unwrap();
        assert_eq!(last.state_id, states::INSERTED, "episode should finish inserted");
    }

    #[test]
    fn unreachable_hole_never_aligns() {
        let spec = insertion_domain();
        let mut task = TaskConfig::builtin("rect-peg-8x7").unwrap();
        // Offset beyond the search amplitude: the sweep cannot reach the hole.
        task.approach_offset = [0.015, 0.0];
        task.fall_probability = 0.0;
        let traj = rollout_openloop(
            &task,
            &Schedule::default_open_loop(),
            &spec,
            &quiet(),
            11,
            DEFAULT_DT,
        )
        .unwrap();
        assert!(traj
            .frames
            .iter()
            .all(|f| f.state_id != states::ALIGNED && f.state_id != states::INSERTED));
    }

    #[test]
    fn timestamps_increase_by_dt() {
        let spec = insertion_domain();
        let task = TaskConfig::builtin("round-peg-16").unwrap();
        let traj = rollout_openloop(
            &task,
            &Schedule::default_open_loop(),
            &spec,
            &NoiseConfig::default(),
            21,
            DEFAULT_DT,
        )
        .unwrap();
        for pair in traj.frames.windows(2) {
            let dt = pair[1].frame.t - pair[0].frame.t;
            assert!((dt - DEFAULT_DT).abs() < 1e-9);
        }
    }

    #[test]
    fn rollouts_are_bit_identical_under_fixed_seed() {
        let spec = insertion_domain();
        let task = TaskConfig::builtin("dsub").unwrap();
        let noise = NoiseConfig::default();
        let a = rollout_openloop(&task, &Schedule::default_open_loop(), &spec, &noise, 1234, DEFAULT_DT)
            .unwrap();
        let b = rollout_openloop(&task, &Schedule::default_open_loop(), &spec, &noise, 1234, DEFAULT_DT)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_obey_reachability() {
        let spec = insertion_domain();
        let tasks = TaskConfig::builtin_all();
        let data = generate_dataset(&tasks, 3, &spec, &NoiseConfig::default(), 77).unwrap();
        for traj in &data {
            for pair in traj.frames.windows(2) {
                let a = pair[0].state_id.as_str();
                let b = pair[1].state_id.as_str();
                assert!(
                    !(a == states::FREE && b == states::INSERTED),
                    "FREE cannot jump to INSERTED"
                );
                assert!(
                    !(a == states::INSERTED && b == states::FALLEN),
                    "FALLEN unreachable from INSERTED"
                );
            }
        }
    }

    #[test]
    fn every_state_appears_in_default_dataset() {
        let spec = insertion_domain();
        let tasks = TaskConfig::builtin_all();
        let data = generate_dataset(&tasks, 15, &spec, &NoiseConfig::default(), 42).unwrap();
        let total: usize = data.iter().map(|t| t.frames.len()).sum();
        for state in &spec.states {
            let count: usize = data
                .iter()
                .flat_map(|t| &t.frames)
                .filter(|f| f.state_id == state.id)
                .count();
            let freq = count as f64 / total as f64;
            assert!(
                freq >= 0.01,
                "state {} frequency {:.4} below 1% ({} of {})",
                state.id,
                freq,
                count,
                total
            );
        }
    }

    #[test]
    fn hole_perturbation_keeps_nominal_fixed() {
        let task = TaskConfig::builtin("usb").unwrap();
        let nominal = task.nominal_xy();
        let shifted = task.with_hole_perturbation([0.002, -0.001]);
        let shifted_nominal = shifted.nominal_xy();
        assert!((nominal[0] - shifted_nominal[0]).abs() < 1e-15);
        assert!((nominal[1] - shifted_nominal[1]).abs() < 1e-15);
        assert!((shifted.hole_center[0] - task.hole_center[0] - 0.002).abs() < 1e-15);
    }
}
