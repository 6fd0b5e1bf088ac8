//! Session persistence: one JSON-lines log per session, in the format read
//! by [`dc3::proposals::read_session_log`].

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use dc3::dataset::AnnotationRecord;
use dc3::proposals::{read_session_log, write_session_log, AnnotationSession, SessionHeader};

use crate::error::ServiceError;

pub trait SessionStore: Send + Sync {
    /// Starts an empty log for `id`.
    fn create(&self, id: &str, header: &SessionHeader) -> Result<(), ServiceError>;
    fn append(&self, id: &str, record: &AnnotationRecord) -> Result<(), ServiceError>;
    /// Every stored session, ordered by id.
    fn load_all(&self) -> Result<Vec<(String, AnnotationSession)>, ServiceError>;
    fn exists(&self, id: &str) -> bool;
}

pub struct JsonlStore {
    dir: PathBuf,
}

impl JsonlStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
        Ok(JsonlStore { dir })
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }
}

impl SessionStore for JsonlStore {
    fn create(&self, id: &str, header: &SessionHeader) -> Result<(), ServiceError> {
        let session = AnnotationSession {
            annotator_id: header.annotator.clone(),
            proposal_mode: header.mode,
            repetition: header.repetition,
            manifest: header.manifest.clone(),
            started: header.started,
            ended: None,
            records: Vec::new(),
        };
        write_session_log(&session, &self.path(id))?;
        Ok(())
    }

    fn append(&self, id: &str, record: &AnnotationRecord) -> Result<(), ServiceError> {
        let path = self.path(id);
        let mut line = serde_json::to_vec(record).map_err(|e| ServiceError::Json {
            path: path.clone(),
            source: e,
        })?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::io(&path, e))?;
        f.write_all(&line).map_err(|e| ServiceError::io(&path, e))
    }

    fn load_all(&self) -> Result<Vec<(String, AnnotationSession)>, ServiceError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(|e| ServiceError::io(&self.dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|p| {
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                Ok((id, read_session_log(&p)?))
            })
            .collect()
    }

    fn exists(&self, id: &str) -> bool {
        self.path(id).exists()
    }
}
