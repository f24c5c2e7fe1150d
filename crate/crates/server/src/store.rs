//! Flat-file store: one directory per artifact kind, one file per id.
//! Writes go through a temporary file and an atomic rename so readers never
//! observe a partial file.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use dqaf_core::api::AssessmentRecord;
use dqaf_core::episode::{Episode, EpisodeError};
use dqaf_core::pipeline::Assessment;
use dqaf_core::semantic::SemanticScript;
use dqaf_core::{TaskContext, ThresholdProfile};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("invalid id {0:?}: use letters, digits, '.', '-' or '_'")]
    BadId(String),
    #[error("corrupt {kind} {id}: {message}")]
    Corrupt { kind: &'static str, id: String, message: String },
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Episode,
    Mock,
    Context,
    Profile,
    Assessment,
    Record,
}

impl Kind {
    pub const ALL: [Kind; 6] = [Kind::Episode, Kind::Mock, Kind::Context, Kind::Profile, Kind::Assessment, Kind::Record];

    fn dir(self) -> &'static str {
        match self {
            Kind::Episode => "episodes",
            Kind::Mock => "mocks",
            Kind::Context => "contexts",
            Kind::Profile => "profiles",
            Kind::Assessment => "assessments",
            Kind::Record => "records",
        }
    }

    fn ext(self) -> &'static str {
        match self {
            Kind::Episode => ".dqaf.jsonl",
            Kind::Mock => ".semmock.json",
            Kind::Context => ".task.json",
            Kind::Profile => ".profile.json",
            Kind::Assessment => ".assessment.json",
            Kind::Record => ".record.json",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Episode => "episode",
            Kind::Mock => "semantic mock",
            Kind::Context => "task context",
            Kind::Profile => "threshold profile",
            Kind::Assessment => "assessment",
            Kind::Record => "assessment record",
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = root.into();
        for kind in Kind::ALL {
            fs::create_dir_all(root.join(kind.dir()))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, kind: Kind, id: &str) -> Result<PathBuf, StoreError> {
        check_id(id)?;
        Ok(self.root.join(kind.dir()).join(format!("{id}{}", kind.ext())))
    }

    pub fn write_bytes(&self, kind: Kind, id: &str, bytes: &[u8]) -> Result<String, StoreError> {
        let path = self.path(kind, id)?;
        let dir = path.parent().expect("store paths have a parent");
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(sha256_hex(bytes))
    }

    pub fn read_bytes(&self, kind: Kind, id: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.path(kind, id)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound { kind: kind.name(), id: id.to_string() },
            _ => StoreError::Io(e),
        })
    }

    pub fn exists(&self, kind: Kind, id: &str) -> bool {
        self.path(kind, id).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Ids stored under `kind`, sorted.
    pub fn list(&self, kind: Kind) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join(kind.dir()))? {
            let name = entry?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(kind.ext())) {
                if check_id(id).is_ok() {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn write_json<T: Serialize>(&self, kind: Kind, id: &str, value: &T) -> Result<String, StoreError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("store values serialize");
        bytes.push(b'\n');
        self.write_bytes(kind, id, &bytes)
    }

    fn read_json<T: DeserializeOwned>(&self, kind: Kind, id: &str) -> Result<T, StoreError> {
        let bytes = self.read_bytes(kind, id)?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            kind: kind.name(),
            id: id.to_string(),
            message: e.to_string(),
        })
    }

    pub fn put_episode(&self, episode: &Episode) -> Result<String, StoreError> {
        self.write_bytes(Kind::Episode, &episode.episode_id, episode.to_jsonl_string().as_bytes())
    }

    pub fn episode(&self, id: &str) -> Result<Episode, StoreError> {
        let bytes = self.read_bytes(Kind::Episode, id)?;
        Episode::from_jsonl(bytes.as_slice()).map_err(|e: EpisodeError| StoreError::Corrupt {
            kind: Kind::Episode.name(),
            id: id.to_string(),
            message: e.to_string(),
        })
    }

    pub fn put_mock(&self, script: &SemanticScript) -> Result<String, StoreError> {
        self.write_json(Kind::Mock, &script.episode_id, script)
    }

    pub fn mock(&self, episode_id: &str) -> Result<SemanticScript, StoreError> {
        self.read_json(Kind::Mock, episode_id)
    }

    pub fn put_context(&self, ctx: &TaskContext) -> Result<String, StoreError> {
        self.write_json(Kind::Context, &ctx.task_id, ctx)
    }

    pub fn context(&self, task_id: &str) -> Result<TaskContext, StoreError> {
        self.read_json(Kind::Context, task_id)
    }

    pub fn put_profile(&self, profile: &ThresholdProfile) -> Result<String, StoreError> {
        self.write_json(Kind::Profile, &profile.task_id, profile)
    }

    pub fn profile(&self, task_id: &str) -> Result<ThresholdProfile, StoreError> {
        self.read_json(Kind::Profile, task_id)
    }

    pub fn put_assessment(&self, a: &Assessment) -> Result<String, StoreError> {
        self.write_json(Kind::Assessment, &a.episode_id, a)
    }

    pub fn assessment(&self, episode_id: &str) -> Result<Assessment, StoreError> {
        self.read_json(Kind::Assessment, episode_id)
    }

    pub fn put_record(&self, r: &AssessmentRecord) -> Result<String, StoreError> {
        self.write_json(Kind::Record, &r.episode_id, r)
    }

    pub fn record(&self, episode_id: &str) -> Result<AssessmentRecord, StoreError> {
        self.read_json(Kind::Record, episode_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dqaf_core::synth::{generate_episode, GenerationConfig};

    #[test]
    fn episode_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let g = generate_episode("ep-1", 1, &GenerationConfig::default(), &[]).unwrap();
        let hash = store.put_episode(&g.episode).unwrap();
        assert_eq!(store.episode("ep-1").unwrap(), g.episode);
        assert_eq!(sha256_hex(&store.read_bytes(Kind::Episode, "ep-1").unwrap()), hash);
        assert_eq!(store.list(Kind::Episode).unwrap(), vec!["ep-1"]);
    }

    #[test]
    fn missing_and_bad_ids() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.context("nope"), Err(StoreError::NotFound { .. })));
        assert!(matches!(store.context("../etc"), Err(StoreError::BadId(_))));
        assert!(matches!(store.context(""), Err(StoreError::BadId(_))));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
