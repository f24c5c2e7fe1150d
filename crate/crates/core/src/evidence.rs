//! Alignment of segment violations with the semantic trace, evidence
//! construction and episode classification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricId;
use crate::segment::{Segment, SegmentReport};
use crate::semantic::{SemanticTrace, SemanticUpdate};

const RATIONALE_EXCERPT_CHARS: usize = 160;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvidenceError {
    #[error("semantic trace has no usable updates")]
    EmptyTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationStatus {
    Exceed,
    Near,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSubtask {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub metric: MetricId,
    pub observed: f64,
    pub threshold: f64,
    pub status: ViolationStatus,
    pub segment_index: usize,
    pub window: (f64, f64),
    /// `None` when the trace had no usable update to align with.
    pub aligned_update_time: Option<f64>,
    pub aligned_subtask: Option<AlignedSubtask>,
    pub rationale_excerpt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Success,
    Failure,
}

/// Decision rule mapping (quality, trace, evidence) to a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassificationPolicy {
    /// Final progress below this is a failure.
    pub completion_tolerance: f64,
    /// Quality below this is a failure.
    pub quality_floor: f64,
    /// Consecutive exceeding segments of one metric that count as persistent.
    pub persistence_run: usize,
    /// Total exceeding segments of one metric that count as persistent.
    pub persistence_total: usize,
    /// Anomalous updates needed for a semantic failure.
    pub anomaly_min: usize,
}

impl Default for ClassificationPolicy {
    fn default() -> Self {
        ClassificationPolicy {
            completion_tolerance: 95.0,
            quality_floor: 5.0,
            persistence_run: 2,
            persistence_total: 4,
            anomaly_min: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeClassification {
    pub quality: f64,
    pub label: Label,
    pub reasons: Vec<String>,
    pub persistent_violation_count: usize,
    pub final_progress: f64,
    pub anomaly_count: usize,
    pub policy_snapshot: ClassificationPolicy,
}

pub const REASON_INCOMPLETE: &str = "incomplete";
pub const REASON_LOW_QUALITY: &str = "low_quality";
pub const REASON_ANOMALIES: &str = "anomalies";

pub fn persistent_reason(metric: MetricId) -> String {
    format!("persistent:{metric}")
}

/// Time of the non-gap update nearest the segment midpoint; ties go to the
/// earlier update.
pub fn align_segment(segment: &Segment, trace: &SemanticTrace) -> Result<f64, EvidenceError> {
    nearest_update(segment.midpoint(), trace).map(|u| u.t).ok_or(EvidenceError::EmptyTrace)
}

fn nearest_update(midpoint: f64, trace: &SemanticTrace) -> Option<&SemanticUpdate> {
    let mut best: Option<&SemanticUpdate> = None;
    for u in trace.updates() {
        let better = match best {
            None => true,
            Some(b) => {
                let (du, db) = ((u.t - midpoint).abs(), (b.t - midpoint).abs());
                du < db || (du == db && u.t < b.t)
            }
        };
        if better {
            best = Some(u);
        }
    }
    best
}

fn excerpt(text: &str) -> String {
    text.chars().take(RATIONALE_EXCERPT_CHARS).collect()
}

/// One evidence item per (segment, metric) with an exceed or near flag,
/// ordered by window start then metric. An empty trace still yields the
/// items, with alignment left unset.
pub fn build_evidence(reports: &[SegmentReport], trace: &SemanticTrace, plan: &[String]) -> Vec<EvidenceItem> {
    let mut items = Vec::new();
    let mut ordered: Vec<&SegmentReport> = reports.iter().collect();
    ordered.sort_by(|a, b| a.segment.t_start.total_cmp(&b.segment.t_start));
    for report in ordered {
        let aligned = nearest_update(report.segment.midpoint(), trace);
        for (&metric, &observed) in &report.values {
            let status = if report.exceed.get(&metric).copied().unwrap_or(false) {
                ViolationStatus::Exceed
            } else if report.near.get(&metric).copied().unwrap_or(false) {
                ViolationStatus::Near
            } else {
                continue;
            };
            items.push(EvidenceItem {
                metric,
                observed,
                threshold: report.thresholds.get(&metric).copied().unwrap_or(observed),
                status,
                segment_index: report.segment.index,
                window: (report.segment.t_start, report.segment.t_end),
                aligned_update_time: aligned.map(|u| u.t),
                aligned_subtask: aligned.map(|u| AlignedSubtask {
                    index: u.subtask_index,
                    name: plan.get(u.subtask_index - 1).cloned().unwrap_or_default(),
                }),
                rationale_excerpt: aligned.map(|u| excerpt(&u.rationale)).unwrap_or_default(),
            });
        }
    }
    items
}

/// Metrics whose exceed evidence is persistent: a run of at least
/// `persistence_run` consecutive segments, or `persistence_total` segments.
pub fn persistent_metrics(evidence: &[EvidenceItem], policy: &ClassificationPolicy) -> Vec<MetricId> {
    let mut by_metric: BTreeMap<MetricId, Vec<usize>> = BTreeMap::new();
    for e in evidence.iter().filter(|e| e.status == ViolationStatus::Exceed) {
        by_metric.entry(e.metric).or_default().push(e.segment_index);
    }
    by_metric
        .into_iter()
        .filter_map(|(metric, mut segs)| {
            segs.sort_unstable();
            segs.dedup();
            let mut longest = 0;
            let mut run = 0;
            for (i, &s) in segs.iter().enumerate() {
                run = if i > 0 && s == segs[i - 1] + 1 { run + 1 } else { 1 };
                longest = longest.max(run);
            }
            let persistent = (policy.persistence_run > 0 && longest >= policy.persistence_run)
                || (policy.persistence_total > 0 && segs.len() >= policy.persistence_total);
            persistent.then_some(metric)
        })
        .collect()
}

/// Labels an episode. A failure needs at least one of: final progress below
/// the completion tolerance, quality below the floor, a persistent metric
/// violation, or enough anomalous updates. Every triggered clause is
/// recorded as a reason code.
pub fn classify_episode(
    quality: f64,
    trace: &SemanticTrace,
    evidence: &[EvidenceItem],
    policy: &ClassificationPolicy,
) -> EpisodeClassification {
    let final_progress = trace.final_progress();
    let anomaly_count = trace.updates().filter(|u| u.anomaly).count();
    let persistent = persistent_metrics(evidence, policy);

    let mut reasons = Vec::new();
    if final_progress < policy.completion_tolerance {
        reasons.push(REASON_INCOMPLETE.to_string());
    }
    if quality < policy.quality_floor {
        reasons.push(REASON_LOW_QUALITY.to_string());
    }
    reasons.extend(persistent.iter().map(|&m| persistent_reason(m)));
    if policy.anomaly_min > 0 && anomaly_count >= policy.anomaly_min {
        reasons.push(REASON_ANOMALIES.to_string());
    }

    EpisodeClassification {
        quality,
        label: if reasons.is_empty() { Label::Success } else { Label::Failure },
        reasons,
        persistent_violation_count: persistent.len(),
        final_progress,
        anomaly_count,
        policy_snapshot: policy.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::TracePoint;

    fn trace(times: &[f64], final_progress: f64) -> SemanticTrace {
        let n = times.len();
        SemanticTrace {
            episode_id: "e".into(),
            plan_len: 2,
            points: times
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    TracePoint::Update(SemanticUpdate {
                        t,
                        progress: if k + 1 == n { final_progress } else { 10.0 * k as f64 },
                        subtask_index: if k + 1 == n { 2 } else { 1 },
                        completion_pct: 0.0,
                        rationale: format!("update {k}"),
                        anomaly: false,
                        provider_flagged: false,
                    })
                })
                .collect(),
        }
    }

    fn segment(index: usize, t_start: f64, t_end: f64) -> Segment {
        Segment { index, t_start, t_end, sample_range: 0..0 }
    }

    fn report(index: usize, flags: &[(MetricId, f64, bool, bool)]) -> SegmentReport {
        let t = (index - 1) as f64 * 2.5;
        SegmentReport {
            segment: segment(index, t, t + 2.5),
            values: flags.iter().map(|&(m, v, _, _)| (m, v)).collect(),
            thresholds: flags.iter().map(|&(m, _, _, _)| (m, 5.0)).collect(),
            exceed: flags.iter().map(|&(m, _, e, _)| (m, e)).collect(),
            near: flags.iter().map(|&(m, _, _, n)| (m, n)).collect(),
        }
    }

    #[test]
    fn alignment_exact_hit_and_tie() {
        assert_eq!(align_segment(&segment(1, 4.0, 6.0), &trace(&[2.5, 5.0, 7.5], 100.0)), Ok(5.0));
        assert_eq!(align_segment(&segment(1, 2.5, 5.0), &trace(&[2.5, 5.0], 100.0)), Ok(2.5));
    }

    #[test]
    fn alignment_skips_gaps_and_rejects_empty() {
        let mut tr = trace(&[2.5, 5.0], 100.0);
        tr.points[1] = TracePoint::Gap { t: 5.0, reason: "timeout".into() };
        assert_eq!(align_segment(&segment(1, 4.0, 6.0), &tr), Ok(2.5));
        tr.points.clear();
        assert_eq!(align_segment(&segment(1, 4.0, 6.0), &tr), Err(EvidenceError::EmptyTrace));
    }

    #[test]
    fn evidence_counting() {
        let tr = trace(&[2.5, 5.0], 100.0);
        let plan = vec!["a".to_string(), "b".to_string()];
        assert!(build_evidence(&[report(1, &[(MetricId::Ldlj, 1.0, false, false)])], &tr, &plan).is_empty());
        let r = report(2, &[(MetricId::Ldlj, 9.0, true, false), (MetricId::Chatter, 0.3, false, true), (MetricId::Saturation, 0.0, false, false)]);
        let items = build_evidence(&[r], &tr, &plan);
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].metric, MetricId::Ldlj);
        assert_eq!(items[0].status, ViolationStatus::Exceed);
        assert_eq!(items[1].status, ViolationStatus::Near);
        assert_eq!(items[0].window, (2.5, 5.0));
        assert_eq!(items[0].aligned_update_time, Some(2.5));
        assert_eq!(items[0].aligned_subtask.as_ref().unwrap().name, "a");
    }

    #[test]
    fn evidence_without_trace_is_unaligned() {
        let mut tr = trace(&[], 0.0);
        tr.points.clear();
        let items = build_evidence(&[report(1, &[(MetricId::Ldlj, 9.0, true, false)])], &tr, &[]);
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].aligned_update_time, None);
    }

    fn exceed_items(metric: MetricId, segments: &[usize]) -> Vec<EvidenceItem> {
        let tr = trace(&[2.5], 100.0);
        let reports: Vec<_> = segments.iter().map(|&s| report(s, &[(metric, 1.0, true, false)])).collect();
        build_evidence(&reports, &tr, &["a".into(), "b".into()])
    }

    #[test]
    fn clean_episode_is_success() {
        let c = classify_episode(9.0, &trace(&[2.5, 5.0], 100.0), &[], &ClassificationPolicy::default());
        assert_eq!(c.label, Label::Success);
        assert!(c.reasons.is_empty());
    }

    #[test]
    fn isolated_exceed_is_tolerated() {
        let ev = exceed_items(MetricId::Saturation, &[7]);
        let c = classify_episode(8.0, &trace(&[2.5, 5.0], 100.0), &ev, &ClassificationPolicy::default());
        assert_eq!(c.label, Label::Success);
    }

    #[test]
    fn consecutive_exceed_is_persistent() {
        let ev = exceed_items(MetricId::Ldlj, &[5, 6, 7]);
        let c = classify_episode(8.0, &trace(&[2.5, 5.0], 100.0), &ev, &ClassificationPolicy::default());
        assert_eq!(c.label, Label::Failure);
        assert_eq!(c.reasons, vec!["persistent:ldlj".to_string()]);
        assert_eq!(c.persistent_violation_count, 1);
    }

    #[test]
    fn scattered_exceed_counts_toward_total() {
        let policy = ClassificationPolicy::default();
        assert!(persistent_metrics(&exceed_items(MetricId::Chatter, &[1, 3, 5]), &policy).is_empty());
        assert_eq!(persistent_metrics(&exceed_items(MetricId::Chatter, &[1, 3, 5, 9]), &policy), vec![MetricId::Chatter]);
    }

    #[test]
    fn all_reasons_recorded() {
        let mut tr = trace(&[2.5, 5.0, 7.5], 60.0);
        for p in tr.points.iter_mut() {
            if let TracePoint::Update(u) = p {
                u.anomaly = true;
            }
        }
        let ev = exceed_items(MetricId::StaticFraction, &[2, 3]);
        let c = classify_episode(3.0, &tr, &ev, &ClassificationPolicy::default());
        assert_eq!(c.reasons, ["incomplete", "low_quality", "persistent:static_fraction", "anomalies"]);
        assert_eq!(c.anomaly_count, 3);
    }
}
