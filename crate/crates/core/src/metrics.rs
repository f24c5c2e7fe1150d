//! Telemetry quality metrics and episode-level quality aggregation.
//!
//! All four metrics are oriented so that a larger raw value is worse:
//! action-range saturation, log dimensionless jerk (LDLJ), gripper chatter
//! and static fraction. Each metric is a pure function of a sample window;
//! the adaptive quantities (static threshold, gripper binarization level)
//! are derived from the full episode and passed in for window evaluation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::episode::{ActionBound, TelemetrySample};
use crate::stats::percentile_nearest_rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Saturation,
    Ldlj,
    Chatter,
    StaticFraction,
}

impl MetricId {
    pub const ALL: [MetricId; 4] = [
        MetricId::Saturation,
        MetricId::Ldlj,
        MetricId::Chatter,
        MetricId::StaticFraction,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricId::Saturation => "saturation",
            MetricId::Ldlj => "ldlj",
            MetricId::Chatter => "chatter",
            MetricId::StaticFraction => "static_fraction",
        }
    }

    pub fn parse(s: &str) -> Option<MetricId> {
        MetricId::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("action has {actual} dims but {expected} bounds were given")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("window of {0} samples is too short (LDLJ needs at least 4)")]
    WindowTooShort(usize),
    #[error("episode has no gripper channel")]
    NoGripperChannel,
    #[error("gripper channel {0} out of range")]
    BadChannel(usize),
    #[error("no subscore anchors configured for {0}")]
    MissingAnchors(MetricId),
    #[error("sum of weights over present metrics is zero")]
    AllWeightsZero,
    #[error("window is empty")]
    EmptyWindow,
}

/// Piecewise-linear subscore anchors: subscore 1 at `good`, 0 at `bad`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub good: f64,
    pub bad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Saturation margin per dimension as a fraction of its bound range.
    pub saturation_margin_fraction: f64,
    /// Dimensions whose bound range is below this are excluded from saturation.
    pub degenerate_range_epsilon: f64,
    /// Gripper command is closed (1) above this fraction of its observed range.
    pub gripper_binarize_threshold: f64,
    /// Percentile of per-step action norms (whole episode) used as the static threshold.
    pub static_percentile: f64,
    /// Lower limit on the static threshold so fully stalled stretches still count.
    pub static_threshold_floor: f64,
    /// LDLJ reported for windows without motion.
    pub ldlj_floor: f64,
    /// Peak speed below which a window counts as motionless.
    pub zero_motion_epsilon: f64,
    pub weights: BTreeMap<MetricId, f64>,
    pub subscore_anchors: BTreeMap<MetricId, Anchors>,
    /// Calibration sets `bad` to this multiple of the expert p95.
    pub anchor_bad_multiple: f64,
    /// Minimum `|bad - good|` span when calibrating anchors.
    pub anchor_min_span: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            saturation_margin_fraction: 0.01,
            degenerate_range_epsilon: 1e-9,
            gripper_binarize_threshold: 0.5,
            static_percentile: 10.0,
            static_threshold_floor: 1e-6,
            ldlj_floor: -20.0,
            zero_motion_epsilon: 1e-9,
            weights: MetricId::ALL.into_iter().map(|m| (m, 1.0)).collect(),
            subscore_anchors: BTreeMap::new(),
            anchor_bad_multiple: 2.0,
            anchor_min_span: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    NoValidDims,
    ZeroMotion,
}

/// A metric value plus an optional note about how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub flag: Option<MetricFlag>,
}

impl Measured {
    fn plain(value: f64) -> Self {
        Measured { value, flag: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricId,
    pub raw_value: f64,
    pub subscore: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<MetricFlag>,
}

/// Fraction of timesteps each valid action dimension spends within its
/// margin of either bound, averaged over valid dimensions. `skip` excludes
/// one channel (the gripper, whose command sits on its bounds by design).
pub fn action_saturation(
    samples: &[TelemetrySample],
    bounds: &[ActionBound],
    skip: Option<usize>,
    cfg: &MetricConfig,
) -> Result<Measured, MetricError> {
    let Some(first) = samples.first() else {
        return Err(MetricError::EmptyWindow);
    };
    if first.action.len() != bounds.len() {
        return Err(MetricError::DimensionMismatch {
            expected: bounds.len(),
            actual: first.action.len(),
        });
    }
    let valid: Vec<usize> = (0..bounds.len())
        .filter(|&i| Some(i) != skip && bounds[i].range() >= cfg.degenerate_range_epsilon)
        .collect();
    if valid.is_empty() {
        return Ok(Measured {
            value: 0.0,
            flag: Some(MetricFlag::NoValidDims),
        });
    }
    let n = samples.len() as f64;
    let total: f64 = valid
        .iter()
        .map(|&i| {
            let b = bounds[i];
            let margin = cfg.saturation_margin_fraction * b.range();
            let hits = samples
                .iter()
                .filter(|s| {
                    let a = s.action[i];
                    a <= b.min + margin || a >= b.max - margin
                })
                .count();
            hits as f64 / n
        })
        .sum();
    Ok(Measured::plain(total / valid.len() as f64))
}

/// Log dimensionless jerk of the joint-state trajectory.
///
/// Jerk uses the centred four-point third difference (located at half-sample
/// points), speed uses first differences at half-sample points, and the
/// squared-jerk integral is trapezoidal. Windows whose peak speed is below
/// `zero_motion_epsilon`, or whose jerk integral vanishes or drops below
/// the floor, return `ldlj_floor` with [`MetricFlag::ZeroMotion`].
pub fn ldlj(samples: &[TelemetrySample], rate_hz: f64, cfg: &MetricConfig) -> Result<Measured, MetricError> {
    let n = samples.len();
    if n < 4 {
        return Err(MetricError::WindowTooShort(n));
    }
    let dt = 1.0 / rate_hz;
    let dims = samples[0].state.len();
    let duration = (n - 1) as f64 * dt;

    let mut v_max_sq: f64 = 0.0;
    for w in samples.windows(2) {
        let speed_sq: f64 = (0..dims)
            .map(|d| {
                let v = (w[1].state[d] - w[0].state[d]) * rate_hz;
                v * v
            })
            .sum();
        v_max_sq = v_max_sq.max(speed_sq);
    }

    let rate3 = rate_hz * rate_hz * rate_hz;
    let jerk_sq: Vec<f64> = samples
        .windows(4)
        .map(|w| {
            (0..dims)
                .map(|d| {
                    let j = (w[3].state[d] - 3.0 * w[2].state[d] + 3.0 * w[1].state[d] - w[0].state[d]) * rate3;
                    j * j
                })
                .sum()
        })
        .collect();
    let integral = trapezoid(&jerk_sq, dt);

    if v_max_sq.sqrt() < cfg.zero_motion_epsilon || integral <= 0.0 {
        return Ok(Measured {
            value: cfg.ldlj_floor,
            flag: Some(MetricFlag::ZeroMotion),
        });
    }
    let value = (duration.powi(3) / v_max_sq * integral).ln();
    if value <= cfg.ldlj_floor {
        // Jerk at rounding-noise level: a constant-velocity window.
        return Ok(Measured {
            value: cfg.ldlj_floor,
            flag: Some(MetricFlag::ZeroMotion),
        });
    }
    Ok(Measured::plain(value))
}

fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0] * dt,
        n => dt * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1])),
    }
}

/// Command level above which the gripper counts as closed, derived from the
/// observed command range of `samples`.
pub fn gripper_level(samples: &[TelemetrySample], channel: usize, cfg: &MetricConfig) -> Result<f64, MetricError> {
    if samples.first().is_some_and(|s| channel >= s.action.len()) {
        return Err(MetricError::BadChannel(channel));
    }
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.action[channel]), hi.max(s.action[channel]))
    });
    if samples.is_empty() {
        return Err(MetricError::EmptyWindow);
    }
    Ok(lo + cfg.gripper_binarize_threshold * (hi - lo))
}

/// Open/close transitions per second of the binarized gripper command, with
/// the binarization level taken from the observed range of the window itself.
pub fn gripper_chatter(
    samples: &[TelemetrySample],
    channel: Option<usize>,
    duration_s: f64,
    cfg: &MetricConfig,
) -> Result<f64, MetricError> {
    let channel = channel.ok_or(MetricError::NoGripperChannel)?;
    let level = gripper_level(samples, channel, cfg)?;
    gripper_chatter_at_level(samples, channel, duration_s, level)
}

/// Chatter with an externally supplied binarization level (episode-wide
/// level applied to a segment window).
pub fn gripper_chatter_at_level(
    samples: &[TelemetrySample],
    channel: usize,
    duration_s: f64,
    level: f64,
) -> Result<f64, MetricError> {
    if samples.first().is_some_and(|s| channel >= s.action.len()) {
        return Err(MetricError::BadChannel(channel));
    }
    if duration_s <= 0.0 {
        return Ok(0.0);
    }
    let transitions = samples
        .windows(2)
        .filter(|w| (w[0].action[channel] > level) != (w[1].action[channel] > level))
        .count();
    Ok(transitions as f64 / duration_s)
}

/// Euclidean norm of the action, leaving out `skip` (the gripper channel).
pub fn action_norm(sample: &TelemetrySample, skip: Option<usize>) -> f64 {
    sample
        .action
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, a)| a * a)
        .sum::<f64>()
        .sqrt()
}

/// Adaptive static threshold: the configured percentile of per-step action
/// norms over the whole episode, never below `static_threshold_floor`.
pub fn static_threshold(episode_samples: &[TelemetrySample], skip: Option<usize>, cfg: &MetricConfig) -> f64 {
    let norms: Vec<f64> = episode_samples.iter().map(|s| action_norm(s, skip)).collect();
    percentile_nearest_rank(&norms, cfg.static_percentile)
        .unwrap_or(0.0)
        .max(cfg.static_threshold_floor)
}

/// Fraction of window steps whose action norm is below `threshold`.
pub fn static_fraction(window: &[TelemetrySample], threshold: f64, skip: Option<usize>) -> Result<f64, MetricError> {
    if window.is_empty() {
        return Err(MetricError::EmptyWindow);
    }
    let below = window.iter().filter(|s| action_norm(s, skip) < threshold).count();
    Ok(below as f64 / window.len() as f64)
}

/// Piecewise-linear normalization into `[0, 1]` between the metric anchors.
pub fn subscore(metric: MetricId, raw: f64, cfg: &MetricConfig) -> Result<f64, MetricError> {
    let a = cfg
        .subscore_anchors
        .get(&metric)
        .ok_or(MetricError::MissingAnchors(metric))?;
    Ok(anchor_subscore(*a, raw))
}

pub fn anchor_subscore(a: Anchors, raw: f64) -> f64 {
    if a.good == a.bad {
        return if raw <= a.good { 1.0 } else { 0.0 };
    }
    ((raw - a.bad) / (a.good - a.bad)).clamp(0.0, 1.0)
}

/// Weighted mean of subscores scaled to `[0, 10]`. Metrics absent from
/// `results` are excluded from both sums.
pub fn aggregate_quality(results: &[MetricResult], cfg: &MetricConfig) -> Result<f64, MetricError> {
    let (num, den) = results.iter().fold((0.0, 0.0), |(num, den), r| {
        let w = cfg.weights.get(&r.metric).copied().unwrap_or(0.0).max(0.0);
        (num + w * r.subscore, den + w)
    });
    if den <= 0.0 {
        return Err(MetricError::AllWeightsZero);
    }
    Ok((10.0 * num / den).clamp(0.0, 10.0))
}

/// Raw episode-level values of every computable metric.
pub fn episode_raw_metrics(
    episode: &crate::episode::Episode,
    cfg: &MetricConfig,
) -> BTreeMap<MetricId, Measured> {
    let samples = &episode.samples;
    let skip = episode.gripper_channel;
    let mut out = BTreeMap::new();
    if let Ok(m) = action_saturation(samples, &episode.action_bounds, skip, cfg) {
        out.insert(MetricId::Saturation, m);
    }
    if let Ok(m) = ldlj(samples, episode.sample_rate_hz, cfg) {
        out.insert(MetricId::Ldlj, m);
    }
    if let Ok(c) = gripper_chatter(samples, skip, episode.duration_s, cfg) {
        out.insert(MetricId::Chatter, Measured::plain(c));
    }
    let theta = static_threshold(samples, skip, cfg);
    if let Ok(f) = static_fraction(samples, theta, skip) {
        out.insert(MetricId::StaticFraction, Measured::plain(f));
    }
    out
}
