//! Fixed-duration segmentation, per-segment threshold violations and
//! percentile calibration of thresholds from expert reference episodes.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::evidence::ClassificationPolicy;
use crate::metrics::{self, Anchors, MetricConfig, MetricId};
use crate::stats::{median, percentile_nearest_rank};

/// Relative slack when dividing durations into segments, so that e.g.
/// 0.3 s / 0.1 s does not yield a spurious fourth segment.
const SEGMENT_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_SEGMENT_DURATION_S: f64 = 2.5;
pub const DEFAULT_CALIBRATION_PERCENTILE: f64 = 95.0;
pub const NEAR_RULE: &str = "near iff not exceeded and (threshold - value) / max(threshold, epsilon) <= near_margin_eta, evaluated only when threshold > epsilon";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SegmentError {
    #[error("episode has zero duration")]
    EmptyEpisode,
    #[error("segment duration must be positive")]
    BadSegmentDuration,
    #[error("profile has no threshold for {0}")]
    MissingThreshold(MetricId),
    #[error("no reference episodes")]
    NoReferences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// 1-based.
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub sample_range: Range<usize>,
}

impl Segment {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProfile {
    pub task_id: String,
    pub thresholds: BTreeMap<MetricId, f64>,
    pub near_margin_eta: f64,
    pub epsilon: f64,
    pub calibration_percentile: f64,
    #[serde(default)]
    pub percentile_overrides: BTreeMap<MetricId, f64>,
    pub segment_duration_s: f64,
    pub metric_config: MetricConfig,
    #[serde(default)]
    pub classification_policy: ClassificationPolicy,
    #[serde(default)]
    pub calibrated_from: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default = "near_rule")]
    pub near_rule: String,
}

fn near_rule() -> String {
    NEAR_RULE.to_string()
}

impl ThresholdProfile {
    pub fn from_json(text: &str) -> Result<ThresholdProfile, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub segment: Segment,
    pub values: BTreeMap<MetricId, f64>,
    pub thresholds: BTreeMap<MetricId, f64>,
    pub exceed: BTreeMap<MetricId, bool>,
    pub near: BTreeMap<MetricId, bool>,
}

/// Splits `[0, duration]` into `ceil(duration / segment_duration)` windows;
/// the last may be shorter. Each sample goes to the window containing its
/// timestamp (the final sample belongs to the last window).
pub fn partition_episode(episode: &Episode, segment_duration_s: f64) -> Result<Vec<Segment>, SegmentError> {
    let times: Vec<f64> = episode.samples.iter().map(|s| s.t).collect();
    partition_times(&times, episode.duration_s, segment_duration_s)
}

pub fn partition_times(times: &[f64], duration_s: f64, segment_duration_s: f64) -> Result<Vec<Segment>, SegmentError> {
    if !(segment_duration_s > 0.0 && segment_duration_s.is_finite()) {
        return Err(SegmentError::BadSegmentDuration);
    }
    if duration_s.is_nan() || duration_s <= 0.0 || times.is_empty() {
        return Err(SegmentError::EmptyEpisode);
    }
    let count = ((duration_s / segment_duration_s) - SEGMENT_TOLERANCE).ceil().max(1.0) as usize;
    let bucket = |t: f64| (((t / segment_duration_s) + SEGMENT_TOLERANCE).floor().max(0.0) as usize).min(count - 1);

    let mut segments = Vec::with_capacity(count);
    let mut cursor = 0;
    for j in 0..count {
        let start = cursor;
        while cursor < times.len() && bucket(times[cursor]) == j {
            cursor += 1;
        }
        segments.push(Segment {
            index: j + 1,
            t_start: j as f64 * segment_duration_s,
            t_end: ((j + 1) as f64 * segment_duration_s).min(duration_s),
            sample_range: start..cursor,
        });
    }
    debug_assert_eq!(cursor, times.len());
    Ok(segments)
}

/// Episode-wide quantities each segment's metrics depend on.
struct EpisodeScope {
    static_threshold: f64,
    gripper_level: Option<f64>,
}

impl EpisodeScope {
    fn new(episode: &Episode, cfg: &MetricConfig) -> Self {
        EpisodeScope {
            static_threshold: metrics::static_threshold(&episode.samples, episode.gripper_channel, cfg),
            gripper_level: episode
                .gripper_channel
                .and_then(|ch| metrics::gripper_level(&episode.samples, ch, cfg).ok()),
        }
    }
}

fn values_in(episode: &Episode, seg: &Segment, scope: &EpisodeScope, cfg: &MetricConfig) -> BTreeMap<MetricId, f64> {
    let window = &episode.samples[seg.sample_range.clone()];
    let mut out = BTreeMap::new();
    if window.is_empty() {
        return out;
    }
    let skip = episode.gripper_channel;
    if let Ok(m) = metrics::action_saturation(window, &episode.action_bounds, skip, cfg) {
        out.insert(MetricId::Saturation, m.value);
    }
    if let Ok(m) = metrics::ldlj(window, episode.sample_rate_hz, cfg) {
        out.insert(MetricId::Ldlj, m.value);
    }
    if let (Some(ch), Some(level)) = (skip, scope.gripper_level) {
        if let Ok(c) = metrics::gripper_chatter_at_level(window, ch, seg.duration(), level) {
            if seg.duration() > 0.0 {
                out.insert(MetricId::Chatter, c);
            }
        }
    }
    if let Ok(f) = metrics::static_fraction(window, scope.static_threshold, skip) {
        out.insert(MetricId::StaticFraction, f);
    }
    out
}

/// Metric values for every segment; metrics that cannot be computed on a
/// segment (too short for LDLJ, no gripper) are omitted.
pub fn segment_values(episode: &Episode, segments: &[Segment], cfg: &MetricConfig) -> Vec<BTreeMap<MetricId, f64>> {
    let scope = EpisodeScope::new(episode, cfg);
    segments.iter().map(|s| values_in(episode, s, &scope, cfg)).collect()
}

/// Exceed / near flags for one value against its threshold.
pub fn classify_value(value: f64, threshold: f64, eta: f64, epsilon: f64) -> (bool, bool) {
    let exceed = value > threshold;
    let near = !exceed && threshold > epsilon && (threshold - value) / threshold.max(epsilon) <= eta;
    (exceed, near)
}

pub fn segment_violations(
    episode: &Episode,
    segments: &[Segment],
    profile: &ThresholdProfile,
) -> Result<Vec<SegmentReport>, SegmentError> {
    let values = segment_values(episode, segments, &profile.metric_config);
    segments
        .iter()
        .zip(values)
        .map(|(seg, values)| {
            let mut thresholds = BTreeMap::new();
            let mut exceed = BTreeMap::new();
            let mut near = BTreeMap::new();
            for (&metric, &value) in &values {
                let theta = *profile
                    .thresholds
                    .get(&metric)
                    .ok_or(SegmentError::MissingThreshold(metric))?;
                let (e, n) = classify_value(value, theta, profile.near_margin_eta, profile.epsilon);
                thresholds.insert(metric, theta);
                exceed.insert(metric, e);
                near.insert(metric, n);
            }
            Ok(SegmentReport {
                segment: seg.clone(),
                values,
                thresholds,
                exceed,
                near,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub task_id: Option<String>,
    pub percentile: f64,
    pub percentile_overrides: BTreeMap<MetricId, f64>,
    pub segment_duration_s: f64,
    pub near_margin_eta: f64,
    pub epsilon: f64,
    pub policy: ClassificationPolicy,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            task_id: None,
            percentile: DEFAULT_CALIBRATION_PERCENTILE,
            percentile_overrides: BTreeMap::new(),
            segment_duration_s: DEFAULT_SEGMENT_DURATION_S,
            near_margin_eta: 0.15,
            epsilon: 1e-9,
            policy: ClassificationPolicy::default(),
        }
    }
}

/// Pooled per-segment values of each metric across the references.
pub fn pooled_segment_values(
    references: &[Episode],
    cfg: &MetricConfig,
    segment_duration_s: f64,
) -> Result<BTreeMap<MetricId, Vec<f64>>, SegmentError> {
    let mut pooled: BTreeMap<MetricId, Vec<f64>> = BTreeMap::new();
    for ep in references {
        let segments = partition_episode(ep, segment_duration_s)?;
        for values in segment_values(ep, &segments, cfg) {
            for (m, v) in values {
                pooled.entry(m).or_default().push(v);
            }
        }
    }
    Ok(pooled)
}

/// Calibrates per-metric thresholds as the nearest-rank percentile of the
/// pooled per-segment values, and subscore anchors from episode-level
/// values (good = median, bad = `anchor_bad_multiple` x p95).
pub fn calibrate_thresholds(
    references: &[Episode],
    cfg: MetricConfig,
    opts: &CalibrationOptions,
) -> Result<ThresholdProfile, SegmentError> {
    let first = references.first().ok_or(SegmentError::NoReferences)?;
    let pooled = pooled_segment_values(references, &cfg, opts.segment_duration_s)?;

    let mut warnings = Vec::new();
    let mut thresholds = BTreeMap::new();
    for (metric, values) in &pooled {
        let p = opts.percentile_overrides.get(metric).copied().unwrap_or(opts.percentile);
        if let Some(theta) = percentile_nearest_rank(values, p) {
            thresholds.insert(*metric, theta);
        }
        if values.len() < 5 {
            warnings.push(format!("insufficient_segments:{metric}:{}", values.len()));
        }
    }
    if references.iter().any(|r| r.task_id != first.task_id) {
        warnings.push("mixed_task_ids".to_string());
    }

    let mut episode_level: BTreeMap<MetricId, Vec<f64>> = BTreeMap::new();
    for ep in references {
        for (m, v) in metrics::episode_raw_metrics(ep, &cfg) {
            episode_level.entry(m).or_default().push(v.value);
        }
    }
    let mut metric_config = cfg;
    for (metric, values) in &episode_level {
        let (Some(good), Some(p95)) = (median(values), percentile_nearest_rank(values, 95.0)) else {
            continue;
        };
        let mut bad = p95 + (metric_config.anchor_bad_multiple - 1.0) * p95.abs();
        if bad - good < metric_config.anchor_min_span {
            bad = good + metric_config.anchor_min_span;
        }
        metric_config.subscore_anchors.insert(*metric, Anchors { good, bad });
    }

    Ok(ThresholdProfile {
        task_id: opts.task_id.clone().unwrap_or_else(|| first.task_id.clone()),
        thresholds,
        near_margin_eta: opts.near_margin_eta,
        epsilon: opts.epsilon,
        calibration_percentile: opts.percentile,
        percentile_overrides: opts.percentile_overrides.clone(),
        segment_duration_s: opts.segment_duration_s,
        metric_config,
        classification_policy: opts.policy.clone(),
        calibrated_from: references.iter().map(|r| r.episode_id.clone()).collect(),
        warnings,
        near_rule: near_rule(),
    })
}
