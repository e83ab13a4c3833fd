//! On-disk layout of the service data directory.
//!
//! ```text
//! <root>/index.json                 counters and job metadata
//! <root>/volumes/<id>.vol.{json,raw} uploaded volumes, keyed by service id
//! <root>/jobs/<id>.mask.rle.json    finished job masks
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slideseg_core::volume::{mask_path, read_volume, volume_paths, Volume, VolumeSidecar};
use slideseg_core::Result;

use crate::jobs::{JobRecord, JobStatus};

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub volumes_issued: u64,
    pub jobs_issued: u64,
    pub volumes: Vec<String>,
    pub jobs: BTreeMap<String, JobRecord>,
}

impl Index {
    pub fn next_volume_id(&mut self) -> String {
        self.volumes_issued += 1;
        format!("vol{:06}", self.volumes_issued)
    }

    pub fn next_job_id(&mut self) -> String {
        self.jobs_issued += 1;
        format!("job{:06}", self.jobs_issued)
    }

    pub fn has_volume(&self, id: &str) -> bool {
        self.volumes.iter().any(|v| v == id)
    }

    /// The queued or running job on `volume_id`, if any.
    pub fn active_job(&self, volume_id: &str) -> Option<&JobRecord> {
        self.jobs
            .values()
            .find(|j| j.volume_id == volume_id && !j.status.is_terminal())
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Opens (or creates) a data directory. Jobs that were queued or
    /// running when the previous process stopped are marked failed.
    pub fn open(root: &Path) -> Result<(Self, Index)> {
        let store = Store { root: root.to_path_buf() };
        fs::create_dir_all(store.volume_dir())?;
        fs::create_dir_all(store.job_dir())?;
        let path = root.join(INDEX_FILE);
        let mut index = if path.exists() {
            serde_json::from_slice::<Index>(&fs::read(&path)?)?
        } else {
            Index::default()
        };
        let mut changed = false;
        for job in index.jobs.values_mut() {
            if !job.status.is_terminal() {
                job.status = JobStatus::Failed;
                job.error = Some("interrupted by service restart".into());
                changed = true;
            }
        }
        if changed {
            store.save_index(&index)?;
        }
        Ok((store, index))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn volume_dir(&self) -> PathBuf {
        self.root.join("volumes")
    }

    fn job_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }

    /// Replaces the index through a temp file and rename.
    pub fn save_index(&self, index: &Index) -> Result<()> {
        let tmp = self.root.join(format!("{INDEX_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(index)?)?;
        fs::rename(&tmp, self.root.join(INDEX_FILE))?;
        Ok(())
    }

    /// Stores an uploaded container as-is under the service id.
    pub fn put_volume(&self, id: &str, sidecar: &VolumeSidecar, raw: &[u8]) -> Result<()> {
        let (raw_path, json_path) = volume_paths(&self.volume_dir(), id);
        fs::write(raw_path, raw)?;
        fs::write(json_path, serde_json::to_vec_pretty(sidecar)?)?;
        Ok(())
    }

    pub fn load_volume(&self, id: &str) -> Result<Volume> {
        read_volume(&volume_paths(&self.volume_dir(), id).1)
    }

    pub fn put_mask(&self, job_id: &str, bytes: &[u8]) -> Result<()> {
        let path = mask_path(&self.job_dir(), job_id);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn mask_bytes(&self, job_id: &str) -> Result<Vec<u8>> {
        Ok(fs::read(mask_path(&self.job_dir(), job_id))?)
    }
}
