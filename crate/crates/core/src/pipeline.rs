//! End-to-end analysis of one episode: telemetry metrics and the semantic
//! trace run concurrently, then evidence, classification and feedback.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::TaskContext;
use crate::episode::Episode;
use crate::evidence::{build_evidence, classify_episode, EpisodeClassification, EvidenceItem};
use crate::feedback::{assemble_input, synthesize, FeedbackConfig, FeedbackError, FeedbackItem, FeedbackProvider, FeedbackSource};
use crate::metrics::{aggregate_quality, episode_raw_metrics, subscore, MetricError, MetricId, MetricResult};
use crate::segment::{partition_episode, segment_violations, SegmentError, SegmentReport, ThresholdProfile};
use crate::semantic::{build_trace, SemanticError, SemanticProvider, SemanticTrace, TraceOptions};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("episode task {episode} does not match {what} task {other}")]
    TaskMismatch { episode: String, what: &'static str, other: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub trace: TraceOptions,
    pub feedback: FeedbackConfig,
}

/// Everything learned about one episode. Serialized as `.assessment.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub episode_id: String,
    pub task_id: String,
    pub q: f64,
    pub subscores: BTreeMap<MetricId, MetricResult>,
    pub plan: Vec<String>,
    pub segments: Vec<SegmentReport>,
    pub trace: SemanticTrace,
    pub evidence: Vec<EvidenceItem>,
    pub classification: EpisodeClassification,
    pub feedback: Vec<FeedbackItem>,
    pub feedback_dropped: usize,
    pub feedback_source: FeedbackSource,
}

impl Assessment {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("assessment serializes")
    }
}

/// Telemetry half of the analysis: episode metrics and segment reports.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryAnalysis {
    pub q: f64,
    pub subscores: BTreeMap<MetricId, MetricResult>,
    pub segments: Vec<SegmentReport>,
}

pub fn analyze_telemetry(episode: &Episode, profile: &ThresholdProfile) -> Result<TelemetryAnalysis, PipelineError> {
    let cfg = &profile.metric_config;
    let mut subscores = BTreeMap::new();
    for (metric, m) in episode_raw_metrics(episode, cfg) {
        subscores.insert(
            metric,
            MetricResult {
                metric,
                raw_value: m.value,
                subscore: subscore(metric, m.value, cfg)?,
                flag: m.flag,
            },
        );
    }
    let results: Vec<MetricResult> = subscores.values().cloned().collect();
    let q = aggregate_quality(&results, cfg)?;
    let segments = partition_episode(episode, profile.segment_duration_s)?;
    let segments = segment_violations(episode, &segments, profile)?;
    Ok(TelemetryAnalysis { q, subscores, segments })
}

fn check_tasks(episode: &Episode, ctx: &TaskContext, profile: &ThresholdProfile) -> Result<(), PipelineError> {
    for (what, other) in [("context", &ctx.task_id), ("profile", &profile.task_id)] {
        if *other != episode.task_id {
            return Err(PipelineError::TaskMismatch {
                episode: episode.task_id.clone(),
                what,
                other: other.clone(),
            });
        }
    }
    Ok(())
}

/// Full analysis. The telemetry stage runs on its own thread while the
/// semantic trace is being built.
pub fn analyze(
    episode: &Episode,
    ctx: &TaskContext,
    profile: &ThresholdProfile,
    semantic: &dyn SemanticProvider,
    feedback: Option<&dyn FeedbackProvider>,
    opts: &AnalysisOptions,
) -> Result<Assessment, PipelineError> {
    check_tasks(episode, ctx, profile)?;
    let (telemetry, trace) = std::thread::scope(|s| {
        let telemetry = s.spawn(|| analyze_telemetry(episode, profile));
        let trace = build_trace(episode, ctx, semantic, &opts.trace);
        (telemetry.join().expect("telemetry stage panicked"), trace)
    });
    finish(episode, ctx, profile, telemetry?, trace?, feedback, opts)
}

/// Completes an analysis from an already-built trace (used by streaming).
pub fn analyze_with_trace(
    episode: &Episode,
    ctx: &TaskContext,
    profile: &ThresholdProfile,
    trace: SemanticTrace,
    feedback: Option<&dyn FeedbackProvider>,
    opts: &AnalysisOptions,
) -> Result<Assessment, PipelineError> {
    check_tasks(episode, ctx, profile)?;
    let telemetry = analyze_telemetry(episode, profile)?;
    finish(episode, ctx, profile, telemetry, trace, feedback, opts)
}

fn finish(
    episode: &Episode,
    ctx: &TaskContext,
    profile: &ThresholdProfile,
    telemetry: TelemetryAnalysis,
    trace: SemanticTrace,
    feedback: Option<&dyn FeedbackProvider>,
    opts: &AnalysisOptions,
) -> Result<Assessment, PipelineError> {
    let evidence = build_evidence(&telemetry.segments, &trace, &ctx.plan);
    let classification = classify_episode(telemetry.q, &trace, &evidence, &profile.classification_policy);
    let input = assemble_input(&trace, &evidence, telemetry.q, &classification, ctx, &episode.episode_id)?;
    let outcome = synthesize(&input, feedback, &opts.feedback)?;
    Ok(Assessment {
        episode_id: episode.episode_id.clone(),
        task_id: episode.task_id.clone(),
        q: telemetry.q,
        subscores: telemetry.subscores,
        plan: ctx.plan.clone(),
        segments: telemetry.segments,
        trace,
        evidence,
        classification,
        feedback: outcome.items,
        feedback_dropped: outcome.dropped,
        feedback_source: outcome.source,
    })
}
