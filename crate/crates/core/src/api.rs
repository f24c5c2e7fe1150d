//! Request and response bodies of the HTTP service, shared by server and
//! client.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::evidence::{ClassificationPolicy, Label};
use crate::feedback::{FeedbackItem, FeedbackSource};
use crate::metrics::MetricId;
use crate::pipeline::Assessment;
use crate::streaming::StreamingSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub mock_providers: bool,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stored {
    pub id: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: String,
    pub task_id: String,
    pub duration_s: f64,
    pub status: Option<RecordStatus>,
    pub q: Option<f64>,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateRequest {
    pub task_id: String,
    pub reference_ids: Vec<String>,
    #[serde(default)]
    pub percentile: Option<f64>,
    #[serde(default)]
    pub percentile_overrides: BTreeMap<MetricId, f64>,
    #[serde(default)]
    pub policy: Option<ClassificationPolicy>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeMode {
    #[default]
    Batch,
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    #[serde(default)]
    pub mode: AnalyzeMode,
    /// Respond only once the analysis has finished.
    #[serde(default = "yes")]
    pub wait: bool,
}

fn yes() -> bool {
    true
}

impl Default for AnalyzeRequest {
    fn default() -> Self {
        AnalyzeRequest { mode: AnalyzeMode::Batch, wait: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Pending,
    SemanticRunning,
    Complete,
    Error,
}

impl RecordStatus {
    /// Whether `next` is a legal successor of `self`.
    pub fn can_become(self, next: RecordStatus) -> bool {
        use RecordStatus::*;
        matches!(
            (self, next),
            (Pending, SemanticRunning) | (SemanticRunning, Complete) | (SemanticRunning, Error) | (Pending, Error)
        )
    }

    pub fn is_final(self) -> bool {
        matches!(self, RecordStatus::Complete | RecordStatus::Error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub episode_id: String,
    pub created_at: String,
    pub status: RecordStatus,
    pub mode: AnalyzeMode,
    /// SHA-256 of every stored input the analysis read.
    pub inputs: BTreeMap<String, String>,
    pub assessment: Option<Assessment>,
    pub streaming: Option<StreamingSchedule>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub episode_id: String,
    pub items: Vec<FeedbackItem>,
    pub source: FeedbackSource,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationQuery {
    pub task_id: Option<String>,
    pub min_quality: Option<f64>,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub episode_id: String,
    pub q: f64,
    pub label: Label,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task_id: Option<String>,
    pub min_quality: f64,
    pub label: Option<Label>,
    pub episodes: Vec<ManifestEntry>,
}

/// Ranks by quality (highest first), ties broken by episode id.
pub fn rank_manifest(mut entries: Vec<ManifestEntry>) -> Vec<ManifestEntry> {
    entries.sort_by(|a, b| b.q.total_cmp(&a.q).then_with(|| a.episode_id.cmp(&b.episode_id)));
    entries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub error: String,
    pub message: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, q: f64) -> ManifestEntry {
        ManifestEntry { episode_id: id.into(), q, label: Label::Success, reasons: vec![] }
    }

    #[test]
    fn ranking_ties_by_id() {
        let r = rank_manifest(vec![entry("b", 7.5), entry("c", 9.0), entry("a", 7.5)]);
        let ids: Vec<&str> = r.iter().map(|e| e.episode_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn status_moves_forward_only() {
        use RecordStatus::*;
        assert!(Pending.can_become(SemanticRunning));
        assert!(SemanticRunning.can_become(Complete));
        assert!(!Complete.can_become(Pending));
        assert!(!Complete.can_become(SemanticRunning));
        assert!(!SemanticRunning.can_become(Pending));
    }

    #[test]
    fn analyze_request_defaults() {
        let r: AnalyzeRequest = serde_json::from_str("{}").unwrap();
        assert_eq!(r, AnalyzeRequest::default());
        let r: AnalyzeRequest = serde_json::from_str(r#"{"mode":"streaming"}"#).unwrap();
        assert_eq!(r.mode, AnalyzeMode::Streaming);
    }
}
