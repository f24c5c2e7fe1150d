//! HTTP-backed semantic and feedback providers.

use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use dqaf_core::context::ReferenceFrame;
use dqaf_core::episode::FramePointer;
use dqaf_core::feedback::{FeedbackProvider, FeedbackRequest};
use dqaf_core::semantic::{ProviderError, SemanticContext, SemanticProvider};
use serde::Serialize;
use serde_json::Value;

const INSTRUCTIONS: &str = "Given the anchor frame, the recent clip, the ordered subtask plan and the captioned \
reference frames, answer with a single JSON object {subtask_index, completion_pct, rationale, anomaly}. \
subtask_index is 1-based into the plan; completion_pct is progress within that subtask in [0, 100]; \
set anomaly when the scene contradicts the expected state.";

#[derive(Debug, Serialize)]
struct Image {
    t: Option<f64>,
    uri: String,
    caption: Option<String>,
    /// Base64 bytes when the uri points at a readable local file.
    data: Option<String>,
}

#[derive(Debug, Serialize)]
struct SemanticRequest<'a> {
    episode_id: &'a str,
    update_time: f64,
    task_description: &'a str,
    anchor: Image,
    clip: Vec<Image>,
    plan: &'a [String],
    references: Vec<Image>,
    instructions: &'a str,
}

fn local_path(uri: &str, frame_root: Option<&Path>) -> Option<PathBuf> {
    let raw = uri.strip_prefix("file://").unwrap_or(uri);
    if raw.contains("://") {
        return None;
    }
    let p = Path::new(raw);
    Some(match frame_root {
        Some(root) if p.is_relative() => root.join(p),
        _ => p.to_path_buf(),
    })
}

fn image(uri: &str, t: Option<f64>, caption: Option<&str>, frame_root: Option<&Path>) -> Image {
    let data = local_path(uri, frame_root)
        .and_then(|p| std::fs::read(p).ok())
        .map(|bytes| STANDARD.encode(bytes));
    Image { t, uri: uri.to_string(), caption: caption.map(str::to_string), data }
}

fn classify(e: reqwest::Error) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout
    } else if e.is_decode() {
        ProviderError::Schema(e.to_string())
    } else {
        ProviderError::Transport(e.to_string())
    }
}

fn client(timeout: Duration) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .expect("http client builds")
}

fn post(client: &reqwest::blocking::Client, url: &str, key: Option<&str>, body: &impl Serialize) -> Result<Value, ProviderError> {
    let mut req = client.post(url).json(body);
    if let Some(key) = key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(classify)?;
    let status = resp.status();
    if !status.is_success() {
        return Err(ProviderError::Transport(format!("provider answered {status}")));
    }
    resp.json::<Value>().map_err(classify)
}

/// Sends each semantic context to a hosted multimodal model endpoint.
pub struct HttpSemanticProvider {
    url: String,
    api_key: Option<String>,
    frame_root: Option<PathBuf>,
    client: reqwest::blocking::Client,
}

impl HttpSemanticProvider {
    pub fn new(url: impl Into<String>, api_key: Option<String>, frame_root: Option<PathBuf>, timeout: Duration) -> Self {
        HttpSemanticProvider { url: url.into(), api_key, frame_root, client: client(timeout) }
    }

    fn frame(&self, f: &FramePointer) -> Image {
        image(&f.uri, Some(f.t), None, self.frame_root.as_deref())
    }

    fn reference(&self, r: &ReferenceFrame) -> Image {
        image(&r.uri, None, Some(&r.caption), self.frame_root.as_deref())
    }
}

impl SemanticProvider for HttpSemanticProvider {
    fn query(&self, c: &SemanticContext) -> Result<Value, ProviderError> {
        let body = SemanticRequest {
            episode_id: &c.episode_id,
            update_time: c.update_time,
            task_description: &c.task_description,
            anchor: self.frame(&c.anchor),
            clip: c.clip.iter().map(|f| self.frame(f)).collect(),
            plan: &c.plan,
            references: c.references.iter().map(|r| self.reference(r)).collect(),
            instructions: INSTRUCTIONS,
        };
        let v = post(&self.client, &self.url, self.api_key.as_deref(), &body)?;
        if v.is_object() {
            Ok(v)
        } else {
            Err(ProviderError::Schema("expected a single JSON object".into()))
        }
    }
}

/// Sends the feedback request to a text-only language-model endpoint.
pub struct HttpFeedbackProvider {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpFeedbackProvider {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        HttpFeedbackProvider { url: url.into(), api_key, client: client(timeout) }
    }
}

impl FeedbackProvider for HttpFeedbackProvider {
    fn generate(&self, request: &FeedbackRequest) -> Result<Value, ProviderError> {
        post(&self.client, &self.url, self.api_key.as_deref(), request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_frames_are_inlined() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f0.jpg"), b"jpeg").unwrap();
        let img = image("f0.jpg", Some(0.0), None, Some(dir.path()));
        assert_eq!(img.data.as_deref(), Some("anBlZw=="));
        let img = image("synth://ep/frame/0000", Some(0.0), None, Some(dir.path()));
        assert!(img.data.is_none());
        let uri = format!("file://{}", dir.path().join("f0.jpg").display());
        assert!(image(&uri, None, None, None).data.is_some());
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let p = HttpSemanticProvider::new("http://127.0.0.1:9/", None, None, Duration::from_millis(300));
        let ctx = SemanticContext {
            episode_id: "e".into(),
            task_description: String::new(),
            anchor: FramePointer { t: 0.0, uri: "a".into() },
            clip: vec![],
            plan: vec!["x".into()],
            references: vec![],
            update_time: 1.0,
        };
        assert!(matches!(p.query(&ctx), Err(ProviderError::Transport(_) | ProviderError::Timeout)));
    }
}
