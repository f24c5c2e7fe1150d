//! Plan-conditioned semantic progress tracing.
//!
//! At each scheduled update time a [`SemanticProvider`] (a hosted
//! vision-language model or a scripted mock) receives the anchor frame, a
//! short clip of recent frames, the subtask plan and the captioned expert
//! references, and answers with the active subtask, its completion, a
//! rationale and an anomaly flag. Answers are validated, clamped into the
//! plan, converted to global progress and checked for semantic regressions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::context::{ReferenceFrame, TaskContext};
use crate::episode::{Episode, FramePointer};

/// Frames in the motion clip handed to the provider.
pub const CLIP_FRAMES: usize = 5;
pub const DEFAULT_UPDATE_INTERVAL_S: f64 = 2.5;
const TIME_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SemanticError {
    #[error("episode has zero duration")]
    EmptyEpisode,
    #[error("update interval must be positive")]
    BadInterval,
    #[error("no frames at or before t = {0} s")]
    NoFramesYet(f64),
    #[error("subtask index {index} / completion {completion} out of range for a plan of {plan_len}")]
    OutOfRange { index: i64, completion: f64, plan_len: usize },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider transport error: {0}")]
    Transport(String),
    #[error("provider timed out")]
    Timeout,
    #[error("provider response failed validation: {0}")]
    Schema(String),
    #[error("no scripted response for episode {episode_id} at t = {t} s")]
    Unscripted { episode_id: String, t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticContext {
    pub episode_id: String,
    pub task_description: String,
    pub anchor: FramePointer,
    pub clip: Vec<FramePointer>,
    pub plan: Vec<String>,
    pub references: Vec<ReferenceFrame>,
    pub update_time: f64,
}

/// Validated provider answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticOutput {
    pub subtask_index: usize,
    pub completion_pct: f64,
    pub rationale: String,
    pub anomaly: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticUpdate {
    pub t: f64,
    pub progress: f64,
    pub subtask_index: usize,
    pub completion_pct: f64,
    pub rationale: String,
    pub anomaly: bool,
    /// The provider itself raised the anomaly flag (or its answer had to be clamped).
    pub provider_flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TracePoint {
    Update(SemanticUpdate),
    Gap { t: f64, reason: String },
}

impl TracePoint {
    pub fn t(&self) -> f64 {
        match self {
            TracePoint::Update(u) => u.t,
            TracePoint::Gap { t, .. } => *t,
        }
    }

    pub fn as_update(&self) -> Option<&SemanticUpdate> {
        match self {
            TracePoint::Update(u) => Some(u),
            TracePoint::Gap { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTrace {
    pub episode_id: String,
    pub plan_len: usize,
    pub points: Vec<TracePoint>,
}

impl SemanticTrace {
    pub fn updates(&self) -> impl Iterator<Item = &SemanticUpdate> {
        self.points.iter().filter_map(TracePoint::as_update)
    }

    pub fn gap_count(&self) -> usize {
        self.points.len() - self.updates().count()
    }

    /// Progress at the last non-gap update (0 if there is none).
    pub fn final_progress(&self) -> f64 {
        self.updates().last().map(|u| u.progress).unwrap_or(0.0)
    }

    pub fn update_at(&self, t: f64) -> Option<&SemanticUpdate> {
        self.updates().find(|u| (u.t - t).abs() <= TIME_TOLERANCE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRuleConfig {
    /// Window length W in updates (including the current one).
    pub drop_window: usize,
    /// Progress drop Δ (points) that counts as a regression.
    pub drop_threshold: f64,
    pub backtrack_min_count: usize,
}

impl Default for AnomalyRuleConfig {
    fn default() -> Self {
        AnomalyRuleConfig {
            drop_window: 3,
            drop_threshold: 15.0,
            backtrack_min_count: 2,
        }
    }
}

/// Anything that can answer a semantic query. Implementations return the raw
/// JSON answer; validation happens in [`query_provider`].
pub trait SemanticProvider: Send + Sync {
    fn query(&self, context: &SemanticContext) -> Result<Value, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub interval_s: f64,
    pub rules: AnomalyRuleConfig,
    /// Concurrent provider queries.
    pub parallelism: usize,
    /// Extra attempts after a failed or invalid answer.
    pub retries: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            interval_s: DEFAULT_UPDATE_INTERVAL_S,
            rules: AnomalyRuleConfig::default(),
            parallelism: 4,
            retries: 1,
        }
    }
}

/// Update times `interval, 2*interval, ...` up to the duration, plus the
/// final time when it is not already covered.
pub fn build_update_schedule(duration_s: f64, interval_s: f64) -> Result<Vec<f64>, SemanticError> {
    if !(interval_s > 0.0 && interval_s.is_finite()) {
        return Err(SemanticError::BadInterval);
    }
    if duration_s.is_nan() || duration_s <= 0.0 {
        return Err(SemanticError::EmptyEpisode);
    }
    let mut times = Vec::new();
    let mut k = 1u64;
    loop {
        let t = k as f64 * interval_s;
        if t > duration_s + TIME_TOLERANCE {
            break;
        }
        times.push(t.min(duration_s));
        k += 1;
    }
    if times.last().is_none_or(|&last| last < duration_s - TIME_TOLERANCE) {
        times.push(duration_s);
    }
    Ok(times)
}

/// Context for update time `t` from the frames seen so far.
pub fn context_from_frames(
    episode_id: &str,
    frames: &[FramePointer],
    ctx: &TaskContext,
    t: f64,
) -> Result<SemanticContext, SemanticError> {
    let visible = frames.partition_point(|f| f.t <= t + TIME_TOLERANCE);
    if visible == 0 {
        return Err(SemanticError::NoFramesYet(t));
    }
    Ok(SemanticContext {
        episode_id: episode_id.to_string(),
        task_description: ctx.description.clone(),
        anchor: frames[0].clone(),
        clip: frames[visible.saturating_sub(CLIP_FRAMES)..visible].to_vec(),
        plan: ctx.plan.clone(),
        references: ctx.reference_frames.clone(),
        update_time: t,
    })
}

pub fn build_context(episode: &Episode, ctx: &TaskContext, t: f64) -> Result<SemanticContext, SemanticError> {
    context_from_frames(&episode.episode_id, &episode.frames, ctx, t)
}

#[derive(Deserialize)]
struct RawOutput {
    subtask_index: i64,
    completion_pct: f64,
    rationale: String,
    anomaly: bool,
}

/// Validates a raw answer against the plan. Out-of-range subtask indices are
/// clamped into `1..=plan_len` and force the anomaly flag; completion is
/// clamped into `[0, 100]`. Returns the output and whether clamping was needed.
pub fn validate_output(raw: &Value, plan_len: usize) -> Result<(SemanticOutput, bool), ProviderError> {
    let out: RawOutput =
        serde_json::from_value(raw.clone()).map_err(|e| ProviderError::Schema(e.to_string()))?;
    if !out.completion_pct.is_finite() {
        return Err(ProviderError::Schema("completion_pct is not finite".into()));
    }
    let max = plan_len as i64;
    let index = out.subtask_index.clamp(1, max.max(1));
    let clamped = index != out.subtask_index;
    Ok((
        SemanticOutput {
            subtask_index: index as usize,
            completion_pct: out.completion_pct.clamp(0.0, 100.0),
            rationale: out.rationale,
            anomaly: out.anomaly || clamped,
        },
        clamped,
    ))
}

/// Queries the provider, retrying up to `retries` times on transport or
/// validation failure.
pub fn query_provider(
    provider: &dyn SemanticProvider,
    context: &SemanticContext,
    retries: usize,
) -> Result<SemanticOutput, ProviderError> {
    let mut last = None;
    for _ in 0..=retries {
        match provider.query(context).and_then(|raw| validate_output(&raw, context.plan.len())) {
            Ok((out, _)) => return Ok(out),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Global progress in `[0, 100]` from a 1-based subtask index and its
/// local completion percentage.
pub fn global_progress(subtask_index: usize, completion_pct: f64, plan_len: usize) -> Result<f64, SemanticError> {
    if plan_len == 0 || subtask_index < 1 || subtask_index > plan_len || !(0.0..=100.0).contains(&completion_pct) {
        return Err(SemanticError::OutOfRange {
            index: subtask_index as i64,
            completion: completion_pct,
            plan_len,
        });
    }
    // Multiply before dividing so both endpoints come out exact for any plan length.
    Ok(100.0 * ((subtask_index - 1) as f64 + completion_pct / 100.0) / plan_len as f64)
}

pub fn make_update(t: f64, out: SemanticOutput, plan_len: usize) -> SemanticUpdate {
    let progress = global_progress(out.subtask_index, out.completion_pct, plan_len)
        .expect("validated outputs are within the plan");
    SemanticUpdate {
        t,
        progress,
        subtask_index: out.subtask_index,
        completion_pct: out.completion_pct,
        rationale: out.rationale,
        anomaly: out.anomaly,
        provider_flagged: out.anomaly,
    }
}

/// Marks semantic regressions. An update is anomalous when progress fell by
/// at least `drop_threshold` relative to the best of the previous
/// `drop_window - 1` updates, when the subtask index has decreased at least
/// `backtrack_min_count` times so far, or when the provider flagged it.
/// Provider flags are never cleared.
pub fn detect_anomalies(updates: &mut [SemanticUpdate], rules: &AnomalyRuleConfig) {
    let window = rules.drop_window.max(2);
    let mut regressions = 0usize;
    for k in 0..updates.len() {
        let lo = k.saturating_sub(window - 1);
        let recent_max = updates[lo..k].iter().map(|u| u.progress).fold(f64::NEG_INFINITY, f64::max);
        let dropped = recent_max - updates[k].progress >= rules.drop_threshold;
        if k > 0 && updates[k].subtask_index < updates[k - 1].subtask_index {
            regressions += 1;
        }
        let backtracking = rules.backtrack_min_count > 0 && regressions >= rules.backtrack_min_count;
        updates[k].anomaly = updates[k].provider_flagged || dropped || backtracking;
    }
}

/// Applies [`detect_anomalies`] to the non-gap updates of a trace in order.
pub fn apply_anomaly_rules(points: &mut [TracePoint], rules: &AnomalyRuleConfig) {
    let mut updates: Vec<SemanticUpdate> = points.iter().filter_map(|p| p.as_update().cloned()).collect();
    detect_anomalies(&mut updates, rules);
    let mut it = updates.into_iter();
    for p in points.iter_mut() {
        if let TracePoint::Update(u) = p {
            *u = it.next().expect("same number of updates");
        }
    }
}

/// Queries every scheduled update (up to `parallelism` at a time), records
/// failures as gaps, and applies the anomaly rules.
pub fn build_trace(
    episode: &Episode,
    ctx: &TaskContext,
    provider: &dyn SemanticProvider,
    opts: &TraceOptions,
) -> Result<SemanticTrace, SemanticError> {
    let schedule = build_update_schedule(episode.duration_s, opts.interval_s)?;
    let plan_len = ctx.plan_len();
    let query = |t: f64| -> TracePoint {
        let context = match build_context(episode, ctx, t) {
            Ok(c) => c,
            Err(e) => return TracePoint::Gap { t, reason: e.to_string() },
        };
        match query_provider(provider, &context, opts.retries) {
            Ok(out) => TracePoint::Update(make_update(t, out, plan_len)),
            Err(e) => TracePoint::Gap { t, reason: e.to_string() },
        }
    };

    let mut points = Vec::with_capacity(schedule.len());
    let parallelism = opts.parallelism.max(1);
    if parallelism == 1 {
        points.extend(schedule.iter().map(|&t| query(t)));
    } else {
        for chunk in schedule.chunks(parallelism) {
            let results: Vec<TracePoint> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|&t| s.spawn(move || query(t))).collect();
                handles.into_iter().map(|h| h.join().expect("provider query panicked")).collect()
            });
            points.extend(results);
        }
    }
    apply_anomaly_rules(&mut points, &opts.rules);
    Ok(SemanticTrace {
        episode_id: episode.episode_id.clone(),
        plan_len,
        points,
    })
}

/// Scripted responses for one episode, keyed by update time
/// (`.semmock.json`). Values are returned verbatim, so a script may also
/// contain malformed answers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SemanticScript {
    pub episode_id: String,
    pub updates: BTreeMap<String, Value>,
}

impl SemanticScript {
    pub fn new(episode_id: impl Into<String>) -> Self {
        SemanticScript {
            episode_id: episode_id.into(),
            updates: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, t: f64, output: &SemanticOutput) {
        self.insert_raw(t, serde_json::to_value(output).expect("plain struct"));
    }

    pub fn insert_raw(&mut self, t: f64, value: Value) {
        self.updates.insert(format_time_key(t), value);
    }

    pub fn lookup(&self, t: f64) -> Option<&Value> {
        self.updates
            .iter()
            .find(|(k, _)| k.parse::<f64>().is_ok_and(|kt| (kt - t).abs() <= TIME_TOLERANCE))
            .map(|(_, v)| v)
    }
}

fn format_time_key(t: f64) -> String {
    // Rounded to microseconds so keys are stable regardless of how t was computed.
    let rounded = (t * 1e6).round() / 1e6;
    format!("{rounded}")
}

/// Deterministic provider backed by per-episode scripts.
#[derive(Debug, Clone, Default)]
pub struct ScriptedSemanticProvider {
    scripts: BTreeMap<String, SemanticScript>,
}

impl ScriptedSemanticProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_script(mut self, script: SemanticScript) -> Self {
        self.add(script);
        self
    }

    pub fn add(&mut self, script: SemanticScript) {
        self.scripts.insert(script.episode_id.clone(), script);
    }
}

impl SemanticProvider for ScriptedSemanticProvider {
    fn query(&self, context: &SemanticContext) -> Result<Value, ProviderError> {
        self.scripts
            .get(&context.episode_id)
            .and_then(|s| s.lookup(context.update_time))
            .cloned()
            .ok_or_else(|| ProviderError::Unscripted {
                episode_id: context.episode_id.clone(),
                t: context.update_time,
            })
    }
}
