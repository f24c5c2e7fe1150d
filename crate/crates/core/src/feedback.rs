//! Operator feedback: what failed, where, and what to change next run.
//!
//! A text-only language-model provider proposes items from the serialized
//! [`FeedbackInput`]; every proposal is checked against the item contract
//! (non-empty fields, resolvable evidence references, no critical items on a
//! successful episode). When the provider is unavailable or produces nothing
//! usable, a deterministic rule-based synthesizer takes over.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::context::TaskContext;
use crate::evidence::{
    persistent_metrics, EpisodeClassification, EvidenceItem, Label, ViolationStatus, REASON_INCOMPLETE,
};
use crate::metrics::MetricId;
use crate::semantic::{ProviderError, SemanticTrace, SemanticUpdate};

pub const DEFAULT_FEEDBACK_CAP: usize = 5;
const TIME_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeedbackError {
    #[error("inputs belong to different episodes: {0:?}")]
    MixedEpisode(Vec<String>),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Critical,
    Warning,
    Note,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackWhere {
    pub window: (f64, f64),
    pub subtask: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceRef {
    /// Index into the evidence list.
    Evidence(usize),
    /// Time of a semantic update.
    Update(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub what: String,
    #[serde(rename = "where")]
    pub location: FeedbackWhere,
    pub change: String,
    pub severity: Severity,
    pub evidence_refs: Vec<EvidenceRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackInput {
    pub episode_id: String,
    pub plan: Vec<String>,
    pub trace: SemanticTrace,
    pub evidence: Vec<EvidenceItem>,
    pub quality: f64,
    pub expert_instructions: String,
    pub classification: EpisodeClassification,
}

impl FeedbackInput {
    fn resolves(&self, r: &EvidenceRef) -> bool {
        match *r {
            EvidenceRef::Evidence(i) => i < self.evidence.len(),
            EvidenceRef::Update(t) => self.trace.updates().any(|u| (u.t - t).abs() <= TIME_TOLERANCE),
        }
    }

    fn subtask_name(&self, index: usize) -> String {
        index
            .checked_sub(1)
            .and_then(|i| self.plan.get(i))
            .cloned()
            .unwrap_or_else(|| format!("subtask {index}"))
    }
}

/// Corrective phrase per metric; `<subtask>` is replaced by the subtask name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseTable(pub BTreeMap<MetricId, String>);

impl Default for PhraseTable {
    fn default() -> Self {
        PhraseTable(BTreeMap::from([
            (
                MetricId::Saturation,
                "keep arms away from joint limits during <subtask>; avoid over-extending to reach".to_string(),
            ),
            (
                MetricId::Ldlj,
                "move more slowly and continuously during <subtask>; avoid abrupt corrections".to_string(),
            ),
            (
                MetricId::Chatter,
                "close the gripper once and hold it during <subtask>; do not grasp the item at its extreme edge".to_string(),
            ),
            (
                MetricId::StaticFraction,
                "plan the next motion before pausing during <subtask>; avoid long idle stretches".to_string(),
            ),
        ]))
    }
}

impl PhraseTable {
    fn phrase(&self, metric: MetricId, subtask: &str) -> String {
        self.0
            .get(&metric)
            .cloned()
            .unwrap_or_else(|| format!("reduce {metric} during <subtask>"))
            .replace("<subtask>", subtask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    pub cap: usize,
    pub phrases: PhraseTable,
    pub fallback_enabled: bool,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            cap: DEFAULT_FEEDBACK_CAP,
            phrases: PhraseTable::default(),
            fallback_enabled: true,
        }
    }
}

/// What the feedback provider receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub input: FeedbackInput,
    pub phrase_table: PhraseTable,
    pub cap: usize,
}

pub trait FeedbackProvider: Send + Sync {
    /// Returns a JSON array of feedback item objects.
    fn generate(&self, request: &FeedbackRequest) -> Result<Value, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Provider,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub items: Vec<FeedbackItem>,
    /// Provider items discarded for breaking the item contract.
    pub dropped: usize,
    pub source: FeedbackSource,
}

pub fn assemble_input(
    trace: &SemanticTrace,
    evidence: &[EvidenceItem],
    quality: f64,
    classification: &EpisodeClassification,
    ctx: &TaskContext,
    episode_id: &str,
) -> Result<FeedbackInput, FeedbackError> {
    if trace.episode_id != episode_id {
        return Err(FeedbackError::MixedEpisode(vec![episode_id.to_string(), trace.episode_id.clone()]));
    }
    Ok(FeedbackInput {
        episode_id: episode_id.to_string(),
        plan: ctx.plan.clone(),
        trace: trace.clone(),
        evidence: evidence.to_vec(),
        quality,
        expert_instructions: ctx.expert_instructions.clone(),
        classification: classification.clone(),
    })
}

/// Checks one proposed item against the contract. Critical items on a
/// successful episode are downgraded to warnings.
fn admit(input: &FeedbackInput, mut item: FeedbackItem) -> Option<FeedbackItem> {
    if item.what.trim().is_empty() || item.change.trim().is_empty() || item.location.subtask.trim().is_empty() {
        return None;
    }
    let (a, b) = item.location.window;
    if !(a.is_finite() && b.is_finite() && a <= b) {
        return None;
    }
    if !item.evidence_refs.iter().all(|r| input.resolves(r)) {
        return None;
    }
    if item.severity != Severity::Note && item.evidence_refs.is_empty() {
        return None;
    }
    if input.classification.label == Label::Success && item.severity == Severity::Critical {
        item.severity = Severity::Warning;
    }
    Some(item)
}

fn finish(mut items: Vec<FeedbackItem>, cap: usize) -> Vec<FeedbackItem> {
    items.sort_by_key(|i| i.severity);
    items.truncate(cap);
    items
}

/// Runs the provider (if any), validates its items, and falls back to the
/// rule-based synthesizer when the provider fails or a failed episode would
/// otherwise get no feedback.
pub fn synthesize(
    input: &FeedbackInput,
    provider: Option<&dyn FeedbackProvider>,
    cfg: &FeedbackConfig,
) -> Result<FeedbackOutcome, FeedbackError> {
    let fallback = |dropped| FeedbackOutcome {
        items: synthesize_fallback(input, cfg),
        dropped,
        source: FeedbackSource::Fallback,
    };
    let Some(provider) = provider else {
        return if cfg.fallback_enabled {
            Ok(fallback(0))
        } else {
            Err(ProviderError::Transport("no feedback provider configured".into()).into())
        };
    };
    let request = FeedbackRequest {
        input: input.clone(),
        phrase_table: cfg.phrases.clone(),
        cap: cfg.cap,
    };
    let parsed = provider.generate(&request).and_then(|raw| match raw {
        Value::Array(items) => Ok(items),
        other => Err(ProviderError::Schema(format!(
            "expected an array of feedback items, got {}",
            short_kind(&other)
        ))),
    });
    let raw_items = match parsed {
        Ok(items) => items,
        Err(e) if cfg.fallback_enabled => {
            let _ = e;
            return Ok(fallback(0));
        }
        Err(e) => return Err(e.into()),
    };

    let total = raw_items.len();
    let items: Vec<FeedbackItem> = raw_items
        .into_iter()
        .filter_map(|v| serde_json::from_value::<FeedbackItem>(v).ok())
        .filter_map(|item| admit(input, item))
        .collect();
    let dropped = total - items.len();
    if items.is_empty() && input.classification.label == Label::Failure {
        return if cfg.fallback_enabled {
            Ok(fallback(dropped))
        } else {
            Err(ProviderError::Schema("provider returned no usable items for a failed episode".into()).into())
        };
    }
    Ok(FeedbackOutcome {
        items: finish(items, cfg.cap),
        dropped,
        source: FeedbackSource::Provider,
    })
}

fn short_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "prose",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn update_window(updates: &[&SemanticUpdate], k: usize) -> (f64, f64) {
    let start = if k == 0 { 0.0 } else { updates[k - 1].t };
    (start, updates[k].t)
}

/// Rule-based feedback in fixed priority order: completion gap, anomaly
/// clusters, persistent metric violations, then near-threshold and isolated
/// threshold warnings. Capped to `cfg.cap`, most severe first.
pub fn synthesize_fallback(input: &FeedbackInput, cfg: &FeedbackConfig) -> Vec<FeedbackItem> {
    let failed = input.classification.label == Label::Failure;
    let updates: Vec<&SemanticUpdate> = input.trace.updates().collect();
    let mut items = Vec::new();

    // (1) completion gap
    if let Some(last) = updates.last() {
        if last.progress < 100.0 {
            let k = updates.len() - 1;
            let name = input.subtask_name(last.subtask_index);
            let critical = input.classification.reasons.iter().any(|r| r == REASON_INCOMPLETE);
            items.push(FeedbackItem {
                what: if critical {
                    "task incomplete".to_string()
                } else {
                    "task finished short of full completion".to_string()
                },
                location: FeedbackWhere {
                    window: update_window(&updates, k),
                    subtask: name.clone(),
                },
                change: format!(
                    "complete subtask \"{name}\" before ending the episode (final progress {:.0}%)",
                    last.progress
                ),
                severity: if critical { Severity::Critical } else { Severity::Warning },
                evidence_refs: vec![EvidenceRef::Update(last.t)],
            });
        }
    }

    // (2) anomaly clusters: maximal runs of consecutive anomalous updates
    let anomaly_failure = failed && input.classification.reasons.iter().any(|r| r == crate::evidence::REASON_ANOMALIES);
    let mut k = 0;
    while k < updates.len() {
        if !updates[k].anomaly {
            k += 1;
            continue;
        }
        let start = k;
        while k < updates.len() && updates[k].anomaly {
            k += 1;
        }
        let cluster = &updates[start..k];
        let first = cluster[0];
        let name = input.subtask_name(first.subtask_index);
        let rationale = if first.rationale.trim().is_empty() {
            "progress regressed".to_string()
        } else {
            first.rationale.clone()
        };
        items.push(FeedbackItem {
            what: format!("semantic anomaly: {rationale}"),
            location: FeedbackWhere {
                window: (update_window(&updates, start).0, cluster[cluster.len() - 1].t),
                subtask: name.clone(),
            },
            change: format!("finish \"{name}\" before moving on; avoid backtracking between subtasks"),
            severity: if anomaly_failure { Severity::Critical } else { Severity::Warning },
            evidence_refs: cluster.iter().map(|u| EvidenceRef::Update(u.t)).collect(),
        });
    }

    // (3) persistent violations, one item per metric
    let persistent = persistent_metrics(&input.evidence, &input.classification.policy_snapshot);
    for &metric in &persistent {
        let idx: Vec<usize> = input
            .evidence
            .iter()
            .enumerate()
            .filter(|(_, e)| e.metric == metric && e.status == ViolationStatus::Exceed)
            .map(|(i, _)| i)
            .collect();
        let first = &input.evidence[idx[0]];
        let last = &input.evidence[idx[idx.len() - 1]];
        let name = subtask_of(first);
        items.push(FeedbackItem {
            what: format!(
                "{metric} exceeded its threshold ({:.3}) in {} segments",
                first.threshold,
                idx.len()
            ),
            location: FeedbackWhere {
                window: (first.window.0, last.window.1),
                subtask: name.clone(),
            },
            change: cfg.phrases.phrase(metric, &name),
            severity: Severity::Critical,
            evidence_refs: idx.into_iter().map(EvidenceRef::Evidence).collect(),
        });
    }

    // (4) near-threshold risks and isolated exceedances
    let mut remaining: BTreeMap<MetricId, Vec<usize>> = BTreeMap::new();
    for (i, e) in input.evidence.iter().enumerate() {
        if !persistent.contains(&e.metric) {
            remaining.entry(e.metric).or_default().push(i);
        }
    }
    for (metric, idx) in remaining {
        let first = &input.evidence[idx[0]];
        let exceeded = idx
            .iter()
            .filter(|&&i| input.evidence[i].status == ViolationStatus::Exceed)
            .count();
        let name = subtask_of(first);
        let what = if exceeded > 0 {
            format!("{metric} briefly exceeded its threshold ({exceeded} isolated segment(s)) and ran close to it elsewhere")
        } else {
            format!("{metric} ran close to its threshold in {} segment(s)", idx.len())
        };
        items.push(FeedbackItem {
            what,
            location: FeedbackWhere {
                window: first.window,
                subtask: name.clone(),
            },
            change: cfg.phrases.phrase(metric, &name),
            severity: Severity::Warning,
            evidence_refs: idx.into_iter().map(EvidenceRef::Evidence).collect(),
        });
    }

    if failed && items.is_empty() {
        // Low quality without localized evidence.
        let (window, subtask, refs) = match updates.last() {
            Some(u) => ((0.0, u.t), input.subtask_name(u.subtask_index), vec![EvidenceRef::Update(u.t)]),
            None => ((0.0, 0.0), "entire episode".to_string(), vec![]),
        };
        items.push(FeedbackItem {
            what: format!("overall execution quality {:.1}/10 is below the acceptance floor", input.quality),
            location: FeedbackWhere { window, subtask },
            change: "repeat the demonstration with slower, steadier motions and fewer pauses".to_string(),
            severity: if refs.is_empty() { Severity::Note } else { Severity::Critical },
            evidence_refs: refs,
        });
    }

    finish(items, cfg.cap)
}

fn subtask_of(e: &EvidenceItem) -> String {
    e.aligned_subtask
        .as_ref()
        .map(|s| s.name.clone())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "entire episode".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ReferenceFrame;
    use crate::evidence::{classify_episode, AlignedSubtask, ClassificationPolicy};
    use crate::semantic::TracePoint;
    use serde_json::json;

    const PLAN: [&str; 5] = ["pick", "present", "receive", "carry", "return to neutral"];

    fn ctx() -> TaskContext {
        TaskContext {
            task_id: "t".into(),
            description: String::new(),
            plan: PLAN.map(String::from).to_vec(),
            reference_frames: vec![ReferenceFrame { uri: "r".into(), caption: "c".into() }],
            expert_instructions: "be concrete".into(),
        }
    }

    fn trace(progress: &[(usize, f64)]) -> SemanticTrace {
        SemanticTrace {
            episode_id: "ep".into(),
            plan_len: PLAN.len(),
            points: progress
                .iter()
                .enumerate()
                .map(|(k, &(i, c))| {
                    TracePoint::Update(SemanticUpdate {
                        t: 2.5 * (k + 1) as f64,
                        progress: 20.0 * ((i - 1) as f64 + c / 100.0),
                        subtask_index: i,
                        completion_pct: c,
                        rationale: format!("working on {}", PLAN[i - 1]),
                        anomaly: false,
                        provider_flagged: false,
                    })
                })
                .collect(),
        }
    }

    fn exceed(metric: MetricId, segment: usize, subtask: usize) -> EvidenceItem {
        let t = (segment - 1) as f64 * 2.5;
        EvidenceItem {
            metric,
            observed: 0.3,
            threshold: 0.1,
            status: ViolationStatus::Exceed,
            segment_index: segment,
            window: (t, t + 2.5),
            aligned_update_time: Some(t + 2.5),
            aligned_subtask: Some(AlignedSubtask { index: subtask, name: PLAN[subtask - 1].into() }),
            rationale_excerpt: String::new(),
        }
    }

    fn input(trace: SemanticTrace, evidence: Vec<EvidenceItem>, q: f64) -> FeedbackInput {
        let c = classify_episode(q, &trace, &evidence, &ClassificationPolicy::default());
        assemble_input(&trace, &evidence, q, &c, &ctx(), "ep").unwrap()
    }

    #[test]
    fn mixed_episode_rejected() {
        let tr = trace(&[(5, 100.0)]);
        let c = classify_episode(9.0, &tr, &[], &ClassificationPolicy::default());
        assert!(matches!(
            assemble_input(&tr, &[], 9.0, &c, &ctx(), "other"),
            Err(FeedbackError::MixedEpisode(_))
        ));
        // empty evidence on a successful episode is a valid input
        assert!(assemble_input(&tr, &[], 9.0, &c, &ctx(), "ep").is_ok());
    }

    #[test]
    fn incomplete_episode_leads_with_completion_gap() {
        // final progress 80 = start of the fifth subtask
        let inp = input(trace(&[(1, 50.0), (3, 0.0), (5, 0.0)]), vec![], 9.0);
        assert_eq!(inp.classification.final_progress, 80.0);
        let items = synthesize_fallback(&inp, &FeedbackConfig::default());
        assert_eq!(items[0].what, "task incomplete");
        assert_eq!(items[0].location.subtask, "return to neutral");
        assert_eq!(items[0].location.window, (5.0, 7.5));
        assert_eq!(items[0].severity, Severity::Critical);
    }

    #[test]
    fn clean_success_gives_no_items() {
        let inp = input(trace(&[(2, 50.0), (5, 100.0)]), vec![], 9.5);
        assert!(synthesize_fallback(&inp, &FeedbackConfig::default()).is_empty());
    }

    #[test]
    fn persistent_saturation_cites_its_evidence() {
        let ev = vec![exceed(MetricId::Saturation, 3, 2), exceed(MetricId::Saturation, 4, 2)];
        let inp = input(trace(&[(1, 50.0), (2, 50.0), (3, 50.0), (5, 100.0)]), ev, 8.0);
        assert_eq!(inp.classification.label, Label::Failure);
        let items = synthesize_fallback(&inp, &FeedbackConfig::default());
        assert_eq!(items.len(), 1);
        let item = &items[0];
        assert_eq!(item.location.subtask, "present");
        assert_eq!(item.location.window, (5.0, 10.0));
        assert_eq!(item.evidence_refs, vec![EvidenceRef::Evidence(0), EvidenceRef::Evidence(1)]);
        assert!(item.change.contains("joint limits during present"));
    }

    #[test]
    fn fallback_is_deterministic_and_capped() {
        let ev: Vec<_> = MetricId::ALL
            .iter()
            .flat_map(|&m| [exceed(m, 2, 1), exceed(m, 3, 1)])
            .collect();
        let mut tr = trace(&[(1, 50.0), (2, 10.0), (1, 90.0), (2, 0.0)]);
        for p in tr.points.iter_mut().skip(2) {
            if let TracePoint::Update(u) = p {
                u.anomaly = true;
            }
        }
        let inp = input(tr, ev, 2.0);
        let a = synthesize_fallback(&inp, &FeedbackConfig::default());
        let b = synthesize_fallback(&inp, &FeedbackConfig::default());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.len(), DEFAULT_FEEDBACK_CAP);
        assert!(a.iter().all(|i| i.severity == Severity::Critical));
        assert_eq!(a[0].what, "task incomplete");
    }

    struct Canned(Value);

    impl FeedbackProvider for Canned {
        fn generate(&self, _: &FeedbackRequest) -> Result<Value, ProviderError> {
            Ok(self.0.clone())
        }
    }

    fn provider_item(refs: Value, severity: &str) -> Value {
        json!({
            "what": "arms near joint limits",
            "where": {"window": [5.0, 10.0], "subtask": "present"},
            "change": "keep the elbow bent",
            "severity": severity,
            "evidence_refs": refs,
        })
    }

    #[test]
    fn unresolvable_refs_are_dropped() {
        let ev = vec![exceed(MetricId::Saturation, 3, 2), exceed(MetricId::Saturation, 4, 2), exceed(MetricId::Ldlj, 9, 3)];
        let inp = input(trace(&[(1, 50.0), (5, 100.0)]), ev, 8.0);
        let canned = Canned(json!([
            provider_item(json!([{"evidence": 0}, {"evidence": 1}]), "critical"),
            provider_item(json!([{"evidence": 99}]), "warning"),
        ]));
        let out = synthesize(&inp, Some(&canned), &FeedbackConfig::default()).unwrap();
        assert_eq!(out.source, FeedbackSource::Provider);
        assert_eq!(out.dropped, 1);
        assert_eq!(out.items.len(), 1);
    }

    #[test]
    fn prose_response_falls_back() {
        let inp = input(trace(&[(1, 50.0), (3, 0.0)]), vec![], 9.0);
        let out = synthesize(&inp, Some(&Canned(json!("Great job overall!"))), &FeedbackConfig::default()).unwrap();
        assert_eq!(out.source, FeedbackSource::Fallback);
        assert!(!out.items.is_empty());

        let strict = FeedbackConfig { fallback_enabled: false, ..Default::default() };
        assert!(matches!(
            synthesize(&inp, Some(&Canned(json!("prose"))), &strict),
            Err(FeedbackError::Provider(ProviderError::Schema(_)))
        ));
    }

    #[test]
    fn success_never_gets_critical_items() {
        let inp = input(trace(&[(5, 100.0)]), vec![], 9.5);
        let canned = Canned(json!([
            provider_item(json!([{"update": 2.5}]), "critical"),
            provider_item(json!([]), "note"),
        ]));
        let out = synthesize(&inp, Some(&canned), &FeedbackConfig::default()).unwrap();
        assert_eq!(out.items.len(), 2);
        assert_eq!(out.items[0].severity, Severity::Warning);
        assert_eq!(out.items[1].severity, Severity::Note);
    }

    #[test]
    fn evidence_ref_wire_format() {
        let refs = vec![EvidenceRef::Evidence(2), EvidenceRef::Update(12.5)];
        assert_eq!(serde_json::to_string(&refs).unwrap(), r#"[{"evidence":2},{"update":12.5}]"#);
    }
}
