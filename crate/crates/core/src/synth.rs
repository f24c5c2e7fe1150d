//! Seeded synthetic demonstrations with fault injection.
//!
//! The baseline is a 7-joint arm doing one minimum-jerk move per phase
//! between random waypoints, a gripper that closes once and opens once, and
//! a scripted semantic provider whose progress rises linearly to 100.
//! Faults are superimposed on top and the ground-truth label is decided
//! here, from the fault design alone.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::context::{ReferenceFrame, TaskContext};
use crate::episode::{ActionBound, Dims, Episode, EpisodeError, EpisodeHeader, FramePointer, TelemetrySample};
use crate::evidence::{persistent_reason, Label, REASON_ANOMALIES, REASON_INCOMPLETE};
use crate::metrics::MetricId;
use crate::semantic::{build_update_schedule, SemanticOutput, SemanticScript};

/// Phase ordering by move duration: phase `p` lasts
/// `base + step * PHASE_RANK[p]`. The two fastest phases are far apart so
/// that their (jerkiest) segments are never adjacent.
const PHASE_RANK: [usize; 20] = [10, 4, 15, 8, 12, 2, 17, 0, 9, 13, 5, 18, 6, 11, 1, 16, 3, 19, 7, 14];

/// Backtracking needs at least this many regressions to be a designed failure.
const BACKTRACK_FAILURE_COUNT: f64 = 2.0;
/// Scripted progress never exceeds this after a premature stop.
const PREMATURE_STOP_CAP: f64 = 90.0;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("faults of kind {kind} overlap: {a:?} and {b:?}")]
    OverlappingFaults { kind: FaultKind, a: (f64, f64), b: (f64, f64) },
    #[error("fault window {window:?} is outside [0, {duration}]")]
    WindowOutOfRange { window: (f64, f64), duration: f64 },
    #[error("bad fault spec {0:?}: expected kind@start-end[:magnitude]")]
    BadFaultSpec(String),
    #[error("bad generation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    JerkBurst,
    Stall,
    Saturate,
    Chatter,
    Backtrack,
    PrematureStop,
}

impl FaultKind {
    pub const ALL: [FaultKind; 6] = [
        FaultKind::JerkBurst,
        FaultKind::Stall,
        FaultKind::Saturate,
        FaultKind::Chatter,
        FaultKind::Backtrack,
        FaultKind::PrematureStop,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FaultKind::JerkBurst => "jerk_burst",
            FaultKind::Stall => "stall",
            FaultKind::Saturate => "saturate",
            FaultKind::Chatter => "chatter",
            FaultKind::Backtrack => "backtrack",
            FaultKind::PrematureStop => "premature_stop",
        }
    }

    /// The metric a telemetry fault shows up in, `None` for semantic faults.
    pub fn metric(&self) -> Option<MetricId> {
        match self {
            FaultKind::JerkBurst => Some(MetricId::Ldlj),
            FaultKind::Stall => Some(MetricId::StaticFraction),
            FaultKind::Saturate => Some(MetricId::Saturation),
            FaultKind::Chatter => Some(MetricId::Chatter),
            FaultKind::Backtrack | FaultKind::PrematureStop => None,
        }
    }

    /// Classification reason code expected when this fault is detected.
    pub fn reason_code(&self) -> String {
        match (self, self.metric()) {
            (_, Some(m)) => persistent_reason(m),
            (FaultKind::Backtrack, None) => REASON_ANOMALIES.to_string(),
            _ => REASON_INCOMPLETE.to_string(),
        }
    }

    pub fn default_magnitude(&self) -> f64 {
        match self {
            // position noise standard deviation (rad)
            FaultKind::JerkBurst => 0.01,
            // catch-up duration after the stall (s)
            FaultKind::Stall => 1.0,
            // index of the pinned action dimension
            FaultKind::Saturate => 0.0,
            // gripper toggles per second
            FaultKind::Chatter => 4.0,
            // number of subtask regressions
            FaultKind::Backtrack => 2.0,
            FaultKind::PrematureStop => 0.0,
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        FaultKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm || k.as_str().replace('_', "") == norm)
            .ok_or_else(|| SynthError::BadFaultSpec(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub window: (f64, f64),
    pub magnitude: f64,
}

impl FaultSpec {
    pub fn new(kind: FaultKind, start: f64, end: f64) -> Self {
        FaultSpec {
            kind,
            window: (start, end),
            magnitude: kind.default_magnitude(),
        }
    }

    pub fn with_magnitude(mut self, magnitude: f64) -> Self {
        self.magnitude = magnitude;
        self
    }

    fn contains(&self, t: f64) -> bool {
        t >= self.window.0 && t <= self.window.1
    }
}

impl FromStr for FaultSpec {
    type Err = SynthError;

    /// `kind@start-end[:magnitude]`, e.g. `stall@10-20` or `chatter@5-12.5:6`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SynthError::BadFaultSpec(s.to_string());
        let (kind, rest) = s.split_once('@').ok_or_else(bad)?;
        let kind: FaultKind = kind.parse().map_err(|_| bad())?;
        let (range, magnitude) = match rest.split_once(':') {
            Some((r, m)) => (r, Some(m.trim().parse::<f64>().map_err(|_| bad())?)),
            None => (rest, None),
        };
        let (a, b) = range.split_once('-').ok_or_else(bad)?;
        let a: f64 = a.trim().parse().map_err(|_| bad())?;
        let b: f64 = b.trim().parse().map_err(|_| bad())?;
        let spec = FaultSpec::new(kind, a, b);
        Ok(match magnitude {
            Some(m) => spec.with_magnitude(m),
            None => spec,
        })
    }
}

/// Parses a comma-separated list of fault specs; an empty string is no faults.
pub fn parse_fault_list(s: &str) -> Result<Vec<FaultSpec>, SynthError> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub task_id: String,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub frame_interval_s: f64,
    pub joints: usize,
    /// Length of one motion phase; one move per phase.
    pub phase_s: f64,
    /// Delay from phase start to move start.
    pub move_delay_s: f64,
    pub move_base_s: f64,
    pub move_step_s: f64,
    /// Relative jitter applied to each move duration.
    pub move_jitter: f64,
    /// Waypoints are drawn uniformly from `[-waypoint_range, waypoint_range]`.
    pub waypoint_range: f64,
    pub velocity_bound: f64,
    /// Phases in which the gripper closes and opens (mid-phase).
    pub grasp_phase: usize,
    pub release_phase: usize,
    pub update_interval_s: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            task_id: "handover".to_string(),
            duration_s: 50.0,
            sample_rate_hz: 50.0,
            frame_interval_s: 0.5,
            joints: 7,
            phase_s: 2.5,
            move_delay_s: 0.1,
            move_base_s: 1.30,
            move_step_s: 0.05,
            move_jitter: 0.01,
            waypoint_range: 0.4,
            velocity_bound: 2.0,
            grasp_phase: 4,
            release_phase: 12,
            update_interval_s: 2.5,
        }
    }
}

impl GenerationConfig {
    pub fn phase_count(&self) -> usize {
        ((self.duration_s / self.phase_s) - 1e-9).ceil().max(1.0) as usize
    }

    /// Speed rank of a phase; rank 0 is the fastest (jerkiest, most idle) move.
    pub fn phase_rank(&self, phase: usize) -> usize {
        PHASE_RANK[phase % PHASE_RANK.len()] + PHASE_RANK.len() * (phase / PHASE_RANK.len())
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::BadConfig(m.to_string()));
        if !(self.duration_s > 0.0 && self.sample_rate_hz > 0.0 && self.frame_interval_s > 0.0 && self.phase_s > 0.0) {
            return bad("durations and rates must be positive");
        }
        if self.joints == 0 {
            return bad("at least one joint");
        }
        let longest = self.move_base_s + self.move_step_s * (self.phase_count().max(PHASE_RANK.len()) - 1) as f64;
        if self.move_delay_s + longest * (1.0 + self.move_jitter) > self.phase_s {
            return bad("moves do not fit inside their phase");
        }
        Ok(())
    }
}

/// The handover task used by every synthetic episode.
pub fn handover_context(task_id: &str) -> TaskContext {
    TaskContext {
        task_id: task_id.to_string(),
        description: "Bimanual handover: pick the item with the left arm, pass it to the right arm, carry it to the bin and release.".to_string(),
        plan: ["pick", "present", "receive", "carry", "drop"].map(String::from).to_vec(),
        reference_frames: vec![
            ReferenceFrame { uri: "synth://reference/grasp".into(), caption: "left gripper closed around the item".into() },
            ReferenceFrame { uri: "synth://reference/handover".into(), caption: "both grippers on the item at chest height".into() },
            ReferenceFrame { uri: "synth://reference/release".into(), caption: "item inside the bin, grippers open".into() },
        ],
        expert_instructions: "Keep both arms well inside their range, move smoothly, grasp once and firmly.".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: Label,
    pub faults: Vec<FaultSpec>,
    /// Per fault, whether its designed severity is above the transient level.
    pub persistent: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedEpisode {
    pub episode: Episode,
    pub script: SemanticScript,
    pub context: TaskContext,
    pub truth: GroundTruth,
}

fn min_jerk(tau: f64) -> f64 {
    let tau = tau.clamp(0.0, 1.0);
    tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau)
}

/// A fault is persistent when its designed severity exceeds what one
/// segment-sized glitch can produce.
fn is_persistent(f: &FaultSpec, phase_s: f64) -> bool {
    match f.kind {
        FaultKind::Backtrack => f.magnitude >= BACKTRACK_FAILURE_COUNT,
        FaultKind::PrematureStop => true,
        _ => {
            let eps = 1e-9;
            let first = ((f.window.0 / phase_s) + eps).floor();
            let last = ((f.window.1 / phase_s) - eps).floor();
            last > first
        }
    }
}

fn check_faults(faults: &[FaultSpec], duration: f64) -> Result<(), SynthError> {
    for f in faults {
        let (a, b) = f.window;
        if !(a >= 0.0 && a <= b && b <= duration + 1e-9) || !f.magnitude.is_finite() {
            return Err(SynthError::WindowOutOfRange { window: f.window, duration });
        }
    }
    for (i, f) in faults.iter().enumerate() {
        for g in &faults[i + 1..] {
            if f.kind == g.kind && f.window.0 < g.window.1 && g.window.0 < f.window.1 {
                return Err(SynthError::OverlappingFaults { kind: f.kind, a: f.window, b: g.window });
            }
        }
    }
    Ok(())
}

/// Generates one episode, its semantic script and its ground truth.
/// The clean baseline depends only on `seed`; faults are layered on top.
pub fn generate_episode(
    episode_id: &str,
    seed: u64,
    cfg: &GenerationConfig,
    faults: &[FaultSpec],
) -> Result<GeneratedEpisode, SynthError> {
    cfg.validate()?;
    check_faults(faults, cfg.duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases = cfg.phase_count();
    let joints = cfg.joints;

    let mut waypoints = vec![vec![0.0; joints]];
    let mut durations = Vec::with_capacity(phases);
    for p in 0..phases {
        waypoints.push((0..joints).map(|_| rng.random_range(-cfg.waypoint_range..=cfg.waypoint_range)).collect());
        let jitter = 1.0 + rng.random_range(-cfg.move_jitter..=cfg.move_jitter);
        durations.push((cfg.move_base_s + cfg.move_step_s * cfg.phase_rank(p) as f64) * jitter);
    }

    let n = (cfg.duration_s * cfg.sample_rate_hz).round() as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / cfg.sample_rate_hz).collect();
    let nominal = |t: f64| -> Vec<f64> {
        let p = ((t / cfg.phase_s) + 1e-9).floor().max(0.0) as usize;
        let p = p.min(phases - 1);
        let start = p as f64 * cfg.phase_s + cfg.move_delay_s;
        let s = min_jerk((t - start) / durations[p]);
        (0..joints)
            .map(|j| waypoints[p][j] + s * (waypoints[p + 1][j] - waypoints[p][j]))
            .collect()
    };
    let mut state: Vec<Vec<f64>> = times.iter().map(|&t| nominal(t)).collect();

    // Stall: freeze, then blend back onto the nominal path.
    for f in faults.iter().filter(|f| f.kind == FaultKind::Stall) {
        let (a, b) = f.window;
        let catch_up = f.magnitude.max(0.0);
        let frozen = nominal(a);
        for (i, &t) in times.iter().enumerate() {
            if t >= a && t <= b {
                state[i] = frozen.clone();
            } else if t > b && t < b + catch_up {
                let s = min_jerk((t - b) / catch_up);
                state[i] = frozen.iter().zip(&state[i]).map(|(fz, nom)| fz + s * (nom - fz)).collect();
            }
        }
    }

    let rate = cfg.sample_rate_hz;
    let velocity = |i: usize, j: usize| -> f64 {
        if n == 1 {
            0.0
        } else if i == 0 {
            (state[1][j] - state[0][j]) * rate
        } else if i == n - 1 {
            (state[n - 1][j] - state[n - 2][j]) * rate
        } else {
            (state[i + 1][j] - state[i - 1][j]) * rate / 2.0
        }
    };
    let grasp_t = (cfg.grasp_phase as f64 + 0.5) * cfg.phase_s;
    let release_t = (cfg.release_phase as f64 + 0.5) * cfg.phase_s;
    let mut actions: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut a: Vec<f64> = (0..joints).map(|j| velocity(i, j)).collect();
            let t = times[i];
            a.push(if t >= grasp_t && t < release_t { 1.0 } else { 0.0 });
            a
        })
        .collect();

    for f in faults {
        match f.kind {
            FaultKind::Saturate => {
                let dim = (f.magnitude.max(0.0) as usize).min(joints - 1);
                for (i, &t) in times.iter().enumerate() {
                    if f.contains(t) {
                        actions[i][dim] = cfg.velocity_bound;
                    }
                }
            }
            FaultKind::Chatter => {
                let hz = f.magnitude.max(0.0);
                for (i, &t) in times.iter().enumerate() {
                    if f.contains(t) && hz > 0.0 {
                        let flips = ((t - f.window.0) * hz + 1e-9).floor() as u64;
                        if flips.is_multiple_of(2) {
                            actions[i][joints] = 1.0 - actions[i][joints];
                        }
                    }
                }
            }
            _ => {}
        }
    }

    // Position noise is drawn from its own stream so the baseline does not
    // depend on which faults are present.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    for f in faults.iter().filter(|f| f.kind == FaultKind::JerkBurst) {
        let normal = Normal::new(0.0, f.magnitude.abs()).map_err(|e| SynthError::BadConfig(e.to_string()))?;
        for (i, &t) in times.iter().enumerate() {
            if f.contains(t) {
                for x in state[i].iter_mut() {
                    *x += normal.sample(&mut noise_rng);
                }
            }
        }
    }

    let samples: Vec<TelemetrySample> = times
        .iter()
        .zip(state)
        .zip(actions)
        .map(|((&t, state), action)| TelemetrySample { t, state, action })
        .collect();
    let frame_count = (cfg.duration_s / cfg.frame_interval_s + 1e-9).floor() as usize + 1;
    let frames: Vec<FramePointer> = (0..frame_count)
        .map(|k| FramePointer {
            t: k as f64 * cfg.frame_interval_s,
            uri: format!("synth://{episode_id}/frame/{k:04}"),
        })
        .collect();
    let mut bounds = vec![ActionBound { min: -cfg.velocity_bound, max: cfg.velocity_bound }; joints];
    bounds.push(ActionBound { min: 0.0, max: 1.0 });
    let header = EpisodeHeader {
        episode_id: episode_id.to_string(),
        task_id: cfg.task_id.clone(),
        sample_rate_hz: cfg.sample_rate_hz,
        action_bounds: Some(bounds),
        gripper_channel: Some(joints),
        dims: Dims { state: joints, action: joints + 1 },
    };
    let episode = Episode::new(header, samples, frames)?;

    let context = handover_context(&cfg.task_id);
    let script = semantic_script(episode_id, cfg, &context.plan, faults)?;
    let persistent: Vec<bool> = faults.iter().map(|f| is_persistent(f, cfg.phase_s)).collect();
    let label = if persistent.iter().any(|&p| p) { Label::Failure } else { Label::Success };
    Ok(GeneratedEpisode {
        episode,
        script,
        context,
        truth: GroundTruth {
            label,
            faults: faults.to_vec(),
            persistent,
        },
    })
}

fn split_progress(progress: f64, plan_len: usize) -> (usize, f64) {
    let share = 100.0 / plan_len as f64;
    let index = ((progress / share).floor() as usize + 1).min(plan_len);
    let completion = ((progress - share * (index - 1) as f64) / share * 100.0).clamp(0.0, 100.0);
    (index, completion)
}

fn semantic_script(
    episode_id: &str,
    cfg: &GenerationConfig,
    plan: &[String],
    faults: &[FaultSpec],
) -> Result<SemanticScript, SynthError> {
    let schedule = build_update_schedule(cfg.duration_s, cfg.update_interval_s)
        .map_err(|e| SynthError::BadConfig(e.to_string()))?;
    let stop = faults
        .iter()
        .filter(|f| f.kind == FaultKind::PrematureStop)
        .map(|f| f.window.0)
        .fold(f64::INFINITY, f64::min);
    let stop_progress = (100.0 * stop / cfg.duration_s).min(PREMATURE_STOP_CAP);

    let mut outputs: Vec<SemanticOutput> = schedule
        .iter()
        .map(|&t| {
            let mut progress = 100.0 * t / cfg.duration_s;
            let stopped = t >= stop;
            if stopped {
                progress = stop_progress;
            }
            let (index, completion) = split_progress(progress, plan.len());
            SemanticOutput {
                subtask_index: index,
                completion_pct: completion,
                rationale: if stopped {
                    format!("arms idle; {} not finished", plan[index - 1])
                } else {
                    format!("{} in progress, {completion:.0}% done", plan[index - 1])
                },
                anomaly: false,
            }
        })
        .collect();

    for f in faults.iter().filter(|f| f.kind == FaultKind::Backtrack) {
        let mut remaining = f.magnitude.max(0.0).round() as usize;
        let mut k = 0;
        while k < schedule.len() && remaining > 0 {
            let t = schedule[k];
            if f.contains(t) && outputs[k].subtask_index > 1 {
                let back = outputs[k].subtask_index - 1;
                outputs[k] = SemanticOutput {
                    subtask_index: back,
                    completion_pct: 80.0,
                    rationale: format!("returned to {} after losing the item", plan[back - 1]),
                    anomaly: true,
                };
                remaining -= 1;
                // the next update returns to the planned subtask
                k += 2;
            } else {
                k += 1;
            }
        }
    }

    let mut script = SemanticScript::new(episode_id);
    for (t, out) in schedule.iter().zip(&outputs) {
        script.insert(*t, out);
    }
    Ok(script)
}
