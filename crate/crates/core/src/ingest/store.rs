//! Embedded on-disk job store.
//!
//! ```text
//! store/index                     one job id per line, sorted
//! store/jobs/<job_id>/timeline.json
//! store/jobs/<job_id>/profile     key-value text
//! ```
//!
//! Entries are replaced by write-temp-then-rename. Writers hold an
//! exclusive lock on `store/.lock`; readers take no lock.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::timeline::JobTimeline;
use crate::metrics::JobProfile;
use crate::record_format::is_job_id;

const TIMELINE: &str = "timeline.json";
const PROFILE: &str = "profile";

#[derive(Error, Debug)]
pub enum StoreError {
    #[error("store i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store entry {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("invalid job id for store key: {0:?}")]
    BadKey(String),
    #[error("no {what} stored for job {job_id}")]
    NotFound { job_id: String, what: &'static str },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A skipped entry found while scanning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptEntry {
    pub job_id: String,
    pub reason: String,
}

pub struct JobStore {
    root: PathBuf,
    index: BTreeSet<String>,
    dirty: bool,
    lock: Option<File>,
}

impl JobStore {
    /// Opens (creating if needed) for writing; blocks while another writer
    /// holds the store.
    pub fn open_writer(root: &Path) -> Result<JobStore, StoreError> {
        let jobs = root.join("jobs");
        fs::create_dir_all(&jobs).map_err(io(&jobs))?;
        let lock_path = root.join(".lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io(&lock_path))?;
        lock.lock().map_err(io(&lock_path))?;
        let mut store = JobStore::open_reader(root)?;
        store.lock = Some(lock);
        Ok(store)
    }

    pub fn open_reader(root: &Path) -> Result<JobStore, StoreError> {
        let index_path = root.join("index");
        let index = match fs::read_to_string(&index_path) {
            Ok(text) => text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => list_job_dirs(&root.join("jobs"))?,
            Err(e) => return Err(io(&index_path)(e)),
        };
        Ok(JobStore {
            root: root.to_path_buf(),
            index,
            dirty: false,
            lock: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_ids(&self) -> impl Iterator<Item = &str> {
        self.index.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn entry_dir(&self, job_id: &str) -> Result<PathBuf, StoreError> {
        if !is_job_id(job_id) {
            return Err(StoreError::BadKey(job_id.to_string()));
        }
        Ok(self.root.join("jobs").join(job_id))
    }

    fn put(&mut self, job_id: &str, name: &str, content: &[u8]) -> Result<(), StoreError> {
        debug_assert!(self.lock.is_some(), "put on a read-only store");
        let dir = self.entry_dir(job_id)?;
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let tmp = dir.join(format!(".{name}.tmp"));
        let dst = dir.join(name);
        fs::write(&tmp, content).map_err(io(&tmp))?;
        fs::rename(&tmp, &dst).map_err(io(&dst))?;
        if self.index.insert(job_id.to_string()) {
            self.dirty = true;
        }
        Ok(())
    }

    pub fn put_timeline(&mut self, tl: &JobTimeline) -> Result<(), StoreError> {
        let text = serde_json::to_vec(tl).expect("timeline serializes");
        self.put(&tl.job.job_id, TIMELINE, &text)
    }

    pub fn put_profile(&mut self, p: &JobProfile) -> Result<(), StoreError> {
        self.put(&p.job_id, PROFILE, p.to_kv().as_bytes())
    }

    fn read(&self, job_id: &str, name: &'static str) -> Result<String, StoreError> {
        let path = self.entry_dir(job_id)?.join(name);
        fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::NotFound {
                job_id: job_id.to_string(),
                what: name,
            },
            _ => io(&path)(e),
        })
    }

    pub fn get_timeline(&self, job_id: &str) -> Result<JobTimeline, StoreError> {
        let text = self.read(job_id, TIMELINE)?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path: self.root.join("jobs").join(job_id).join(TIMELINE),
            reason: e.to_string(),
        })
    }

    pub fn get_profile(&self, job_id: &str) -> Result<JobProfile, StoreError> {
        let text = self.read(job_id, PROFILE)?;
        JobProfile::from_kv(&text).map_err(|reason| StoreError::Corrupt {
            path: self.root.join("jobs").join(job_id).join(PROFILE),
            reason,
        })
    }

    /// Timelines in job id order; errors are per entry.
    pub fn timelines(&self) -> impl Iterator<Item = Result<JobTimeline, StoreError>> + '_ {
        self.index.iter().map(|id| self.get_timeline(id))
    }

    /// Profiles in job id order. Jobs not yet analyzed are passed over;
    /// unreadable entries are yielded as errors.
    pub fn profiles(&self) -> impl Iterator<Item = Result<JobProfile, StoreError>> + '_ {
        self.index
            .iter()
            .map(|id| self.get_profile(id))
            .filter(|r| !matches!(r, Err(StoreError::NotFound { .. })))
    }

    /// Collects all readable profiles, reporting the rest.
    pub fn scan_profiles(&self) -> (Vec<JobProfile>, Vec<CorruptEntry>) {
        let mut good = Vec::new();
        let mut bad = Vec::new();
        for (id, r) in self.index.iter().map(|id| (id, self.get_profile(id))) {
            match r {
                Ok(p) => good.push(p),
                Err(StoreError::NotFound { .. }) => {}
                Err(e) => {
                    log::warn!("skipping store entry {id}: {e}");
                    bad.push(CorruptEntry {
                        job_id: id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        (good, bad)
    }

    /// Writes the index if it changed.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        if !self.dirty && self.root.join("index").exists() {
            return Ok(());
        }
        let mut text = String::new();
        for id in &self.index {
            text.push_str(id);
            text.push('\n');
        }
        let tmp = self.root.join(".index.tmp");
        let dst = self.root.join("index");
        fs::write(&tmp, text).map_err(io(&tmp))?;
        fs::rename(&tmp, &dst).map_err(io(&dst))?;
        self.dirty = false;
        Ok(())
    }
}

impl Drop for JobStore {
    fn drop(&mut self) {
        if self.lock.is_some() && self.dirty {
            if let Err(e) = self.flush() {
                log::error!("store index not written: {e}");
            }
        }
    }
}

fn list_job_dirs(jobs: &Path) -> Result<BTreeSet<String>, StoreError> {
    match fs::read_dir(jobs) {
        Ok(rd) => Ok(rd
            .filter_map(Result::ok)
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| is_job_id(n))
            .collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeSet::new()),
        Err(e) => Err(io(jobs)(e)),
    }
}
