//! Episode data model and the `.dqaf.jsonl` container.
//!
//! An episode file is line-delimited JSON: one header object, then one
//! `{"s": {...}}` line per telemetry sample and one `{"f": {...}}` line per
//! camera frame pointer. Readers accept samples and frames interleaved (a
//! file that is still being recorded); the writer always emits all samples
//! first, then all frames.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Schema { line: Option<usize>, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EpisodeError {
    fn schema(line: Option<usize>, message: impl Into<String>) -> Self {
        EpisodeError::Schema {
            line,
            message: message.into(),
        }
    }
}

/// One proprioceptive/command sample, `t` in seconds from episode start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub t: f64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

/// Reference to a camera frame. `uri` is a path relative to the episode file
/// or an opaque token (synthetic episodes use `synth://...`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePointer {
    pub t: f64,
    pub uri: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBound {
    pub min: f64,
    pub max: f64,
}

impl ActionBound {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub state: usize,
    pub action: usize,
}

/// First line of an episode file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub episode_id: String,
    pub task_id: String,
    pub sample_rate_hz: f64,
    /// `None` means bounds are inferred from the observed actions.
    pub action_bounds: Option<Vec<ActionBound>>,
    pub gripper_channel: Option<usize>,
    pub dims: Dims,
}

/// A validated, immutable teleoperation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub task_id: String,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub samples: Vec<TelemetrySample>,
    pub frames: Vec<FramePointer>,
    pub action_bounds: Vec<ActionBound>,
    pub bounds_inferred: bool,
    pub gripper_channel: Option<usize>,
}

#[derive(Serialize, Deserialize)]
enum Record {
    #[serde(rename = "s")]
    Sample(TelemetrySample),
    #[serde(rename = "f")]
    Frame(FramePointer),
}

// Records are borrowed on the write path to avoid cloning every sample.
#[derive(Serialize)]
enum RecordRef<'a> {
    #[serde(rename = "s")]
    Sample(&'a TelemetrySample),
    #[serde(rename = "f")]
    Frame(&'a FramePointer),
}

impl Episode {
    /// Validates raw parts and builds an episode. `lines` carries the source
    /// line number of each sample and frame so errors can point at the file.
    fn assemble(
        header: EpisodeHeader,
        samples: Vec<(usize, TelemetrySample)>,
        frames: Vec<(usize, FramePointer)>,
    ) -> Result<Episode, EpisodeError> {
        if !(header.sample_rate_hz.is_finite() && header.sample_rate_hz > 0.0) {
            return Err(EpisodeError::schema(Some(1), "sample_rate_hz must be positive"));
        }
        if samples.is_empty() {
            return Err(EpisodeError::schema(None, "episode has no samples"));
        }
        let dims = header.dims;
        if dims.action == 0 {
            return Err(EpisodeError::schema(Some(1), "action dimension must be at least 1"));
        }
        if let Some(ch) = header.gripper_channel {
            if ch >= dims.action {
                return Err(EpisodeError::schema(
                    Some(1),
                    format!("gripper_channel {ch} out of range for {} action dims", dims.action),
                ));
            }
        }

        let period = 1.0 / header.sample_rate_hz;
        let mut prev_t = f64::NEG_INFINITY;
        for (line, s) in &samples {
            let line = Some(*line);
            if !s.t.is_finite() {
                return Err(EpisodeError::schema(line, "non-finite timestamp"));
            }
            if s.t <= prev_t {
                return Err(EpisodeError::schema(
                    line,
                    format!("timestamp {} not strictly after {}", s.t, prev_t),
                ));
            }
            prev_t = s.t;
            if s.state.len() != dims.state {
                return Err(EpisodeError::schema(
                    line,
                    format!("state has {} values, header declares {}", s.state.len(), dims.state),
                ));
            }
            if s.action.len() != dims.action {
                return Err(EpisodeError::schema(
                    line,
                    format!("action has {} values, header declares {}", s.action.len(), dims.action),
                ));
            }
            if s.state.iter().chain(&s.action).any(|v| !v.is_finite()) {
                return Err(EpisodeError::schema(line, "non-finite state or action value"));
            }
        }
        let (first_line, first) = &samples[0];
        if first.t < 0.0 || first.t > period * (1.0 + 1e-9) {
            return Err(EpisodeError::schema(
                Some(*first_line),
                format!("first sample at {} s; expected within one sample period of 0", first.t),
            ));
        }
        let duration_s = samples[samples.len() - 1].1.t;

        let mut prev_f = f64::NEG_INFINITY;
        for (line, f) in &frames {
            let line = Some(*line);
            if !f.t.is_finite() || f.t < prev_f {
                return Err(EpisodeError::schema(line, "frame timestamps must be nondecreasing"));
            }
            if f.t < 0.0 || f.t > duration_s {
                return Err(EpisodeError::schema(
                    line,
                    format!("frame at {} s outside episode [0, {duration_s}]", f.t),
                ));
            }
            prev_f = f.t;
        }

        let samples: Vec<TelemetrySample> = samples.into_iter().map(|(_, s)| s).collect();
        let (action_bounds, bounds_inferred) = match header.action_bounds {
            Some(bounds) => {
                if bounds.len() != dims.action {
                    return Err(EpisodeError::schema(
                        Some(1),
                        format!("{} action bounds for {} action dims", bounds.len(), dims.action),
                    ));
                }
                if bounds
                    .iter()
                    .any(|b| !(b.min.is_finite() && b.max.is_finite() && b.min <= b.max))
                {
                    return Err(EpisodeError::schema(Some(1), "action bound with min > max"));
                }
                (bounds, false)
            }
            None => (observed_bounds(&samples, dims.action), true),
        };

        Ok(Episode {
            episode_id: header.episode_id,
            task_id: header.task_id,
            sample_rate_hz: header.sample_rate_hz,
            duration_s,
            samples,
            frames: frames.into_iter().map(|(_, f)| f).collect(),
            action_bounds,
            bounds_inferred,
            gripper_channel: header.gripper_channel,
        })
    }

    /// Builds an episode from in-memory parts, applying every file invariant.
    pub fn new(
        header: EpisodeHeader,
        samples: Vec<TelemetrySample>,
        frames: Vec<FramePointer>,
    ) -> Result<Episode, EpisodeError> {
        // Synthetic line numbers mirror the canonical file layout.
        let n = samples.len();
        Episode::assemble(
            header,
            samples.into_iter().enumerate().map(|(i, s)| (i + 2, s)).collect(),
            frames.into_iter().enumerate().map(|(i, f)| (i + 2 + n, f)).collect(),
        )
    }

    /// Re-checks the invariants of an episode received from an untrusted
    /// source (e.g. a JSON request body).
    pub fn validated(self) -> Result<Episode, EpisodeError> {
        let header = self.header();
        Episode::new(header, self.samples, self.frames)
    }

    pub fn header(&self) -> EpisodeHeader {
        EpisodeHeader {
            episode_id: self.episode_id.clone(),
            task_id: self.task_id.clone(),
            sample_rate_hz: self.sample_rate_hz,
            action_bounds: if self.bounds_inferred {
                None
            } else {
                Some(self.action_bounds.clone())
            },
            gripper_channel: self.gripper_channel,
            dims: self.dims(),
        }
    }

    pub fn dims(&self) -> Dims {
        let first = &self.samples[0];
        Dims {
            state: first.state.len(),
            action: first.action.len(),
        }
    }

    pub fn action_dim(&self) -> usize {
        self.samples[0].action.len()
    }

    /// Parses the canonical line-delimited format.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Episode, EpisodeError> {
        let mut lines = reader.lines().enumerate();
        let header: EpisodeHeader = loop {
            match lines.next() {
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| EpisodeError::Parse {
                        line: i + 1,
                        message: format!("invalid header: {e}"),
                    })?;
                }
                None => {
                    return Err(EpisodeError::Parse {
                        line: 1,
                        message: "missing header".into(),
                    })
                }
            }
        };

        let mut samples = Vec::new();
        let mut frames = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| EpisodeError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            match record {
                Record::Sample(s) => samples.push((i + 1, s)),
                Record::Frame(f) => frames.push((i + 1, f)),
            }
        }
        Episode::assemble(header, samples, frames)
    }

    /// Canonical serialization; `from_jsonl` inverts it exactly.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &self.header())?;
        out.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut out, &RecordRef::Sample(s))?;
            out.write_all(b"\n")?;
        }
        for f in &self.frames {
            serde_json::to_writer(&mut out, &RecordRef::Frame(f))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

fn observed_bounds(samples: &[TelemetrySample], dim: usize) -> Vec<ActionBound> {
    (0..dim)
        .map(|i| {
            let (min, max) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.action[i]), hi.max(s.action[i]))
            });
            ActionBound { min, max }
        })
        .collect()
}

pub fn load_episode(path: impl AsRef<Path>) -> Result<Episode, EpisodeError> {
    let file = fs::File::open(path)?;
    Episode::from_jsonl(BufReader::new(file))
}

pub fn write_episode(episode: &Episode, path: impl AsRef<Path>) -> Result<(), EpisodeError> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    episode.write_jsonl(&mut file)?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"episode_id":"ep-1","task_id":"handover","sample_rate_hz":10.0,"action_bounds":[{"min":-1.0,"max":1.0},{"min":0.0,"max":1.0}],"gripper_channel":1,"dims":{"state":1,"action":2}}
{"s":{"t":0.0,"state":[0.0],"action":[0.0,0.0]}}
{"s":{"t":0.1,"state":[0.1],"action":[0.5,1.0]}}
{"s":{"t":0.2,"state":[0.2],"action":[1.0,1.0]}}
{"f":{"t":0.0,"uri":"frames/0000.png"}}
"#;

    #[test]
    fn loads_hand_written_fixture() {
        let ep = Episode::from_jsonl(FIXTURE.as_bytes()).unwrap();
        assert_eq!(ep.samples.len(), 3);
        assert_eq!(ep.action_dim(), 2);
        assert_eq!(ep.frames.len(), 1);
        assert!((ep.duration_s - 0.2).abs() < 1e-12);
        assert!(!ep.bounds_inferred);
        assert_eq!(ep.to_jsonl_string(), FIXTURE);
    }

    #[test]
    fn decreasing_timestamp_names_line() {
        let bad = FIXTURE.replace(r#""t":0.2,"state""#, r#""t":0.05,"state""#);
        match Episode::from_jsonl(bad.as_bytes()) {
            Err(EpisodeError::Schema { line: Some(4), .. }) => {}
            other => panic!("expected schema error at line 4, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_is_parse_error() {
        let bad = FIXTURE.replace(r#"{"s":{"t":0.1"#, r#"{"s":{"t":"x""#);
        match Episode::from_jsonl(bad.as_bytes()) {
            Err(EpisodeError::Parse { line: 3, .. }) => {}
            other => panic!("expected parse error at line 3, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_schema_error() {
        let bad = FIXTURE.replace(r#""action":[0.5,1.0]"#, r#""action":[0.5]"#);
        assert!(matches!(
            Episode::from_jsonl(bad.as_bytes()),
            Err(EpisodeError::Schema { line: Some(3), .. })
        ));
    }

    #[test]
    fn frame_after_end_rejected() {
        let bad = FIXTURE.replace(r#"{"f":{"t":0.0"#, r#"{"f":{"t":0.5"#);
        assert!(matches!(
            Episode::from_jsonl(bad.as_bytes()),
            Err(EpisodeError::Schema { line: Some(5), .. })
        ));
    }

    #[test]
    fn missing_bounds_are_inferred_and_round_trip() {
        let src = FIXTURE.replace(
            r#""action_bounds":[{"min":-1.0,"max":1.0},{"min":0.0,"max":1.0}]"#,
            r#""action_bounds":null"#,
        );
        let ep = Episode::from_jsonl(src.as_bytes()).unwrap();
        assert!(ep.bounds_inferred);
        assert_eq!(ep.action_bounds[0], ActionBound { min: 0.0, max: 1.0 });
        let again = Episode::from_jsonl(ep.to_jsonl_string().as_bytes()).unwrap();
        assert_eq!(again, ep);
    }

    #[test]
    fn empty_frames_write_no_frame_records() {
        let mut ep = Episode::from_jsonl(FIXTURE.as_bytes()).unwrap();
        ep.frames.clear();
        let text = ep.to_jsonl_string();
        assert_eq!(text.lines().filter(|l| l.starts_with(r#"{"f""#)).count(), 0);
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn no_samples_is_schema_error() {
        let header = FIXTURE.lines().next().unwrap();
        assert!(matches!(
            Episode::from_jsonl(header.as_bytes()),
            Err(EpisodeError::Schema { line: None, .. })
        ));
    }
}
