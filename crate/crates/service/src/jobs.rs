use serde::{Deserialize, Serialize};
use slideseg_core::prompt::{BBox, PointPrompt, Prompt};
use slideseg_core::volume::{Axis, MaskFile};
use slideseg_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }

    /// Allowed moves: queued -> running -> done | failed.
    pub fn can_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Queued, JobStatus::Failed)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptType {
    Box,
    Point,
}

/// Prompt as it travels over the wire.
///
/// `box` takes `[x0, y0, x1, y1]` (inclusive corners); `point` takes one or
/// more `x, y` pairs that all share `label` (1 = foreground, the default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBody {
    #[serde(rename = "type")]
    pub kind: PromptType,
    pub coords: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl PromptBody {
    pub fn to_prompt(&self) -> Result<Prompt> {
        let coords = self
            .coords
            .iter()
            .map(|&c| usize::try_from(c).map_err(|_| Error::InvalidPrompt(format!("negative coordinate {c}"))))
            .collect::<Result<Vec<_>>>()?;
        match self.kind {
            PromptType::Box => {
                if self.label.is_some() {
                    return Err(Error::InvalidPrompt("box prompts take no label".into()));
                }
                let [x0, y0, x1, y1] = coords[..] else {
                    return Err(Error::InvalidPrompt(format!(
                        "box needs 4 coordinates, got {}",
                        coords.len()
                    )));
                };
                if x0 > x1 || y0 > y1 {
                    return Err(Error::InvalidPrompt(format!("box [{x0}, {y0}, {x1}, {y1}] has inverted corners")));
                }
                Ok(Prompt::Box(BBox::new(x0, y0, x1, y1)))
            }
            PromptType::Point => {
                let foreground = match self.label.unwrap_or(1) {
                    0 => false,
                    1 => true,
                    other => return Err(Error::InvalidPrompt(format!("label must be 0 or 1, got {other}"))),
                };
                if coords.is_empty() || coords.len() % 2 != 0 {
                    return Err(Error::InvalidPrompt(format!(
                        "point needs x, y pairs, got {} coordinates",
                        coords.len()
                    )));
                }
                Ok(Prompt::Points(
                    coords
                        .chunks(2)
                        .map(|p| PointPrompt { x: p[0], y: p[1], foreground })
                        .collect(),
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProgress {
    pub labeled: usize,
    pub total: usize,
}

/// Persisted job metadata. Masks live in separate files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub volume_id: String,
    pub axis: Axis,
    pub slice: usize,
    pub prompt: PromptBody,
    pub status: JobStatus,
    pub progress: JobProgress,
    pub parent: Option<String>,
    pub error: Option<String>,
}

/// `GET /v1/jobs/{id}` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    #[serde(flatten)]
    pub record: JobRecord,
    /// Partial while running, final once done.
    pub results: Option<MaskFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub axis: Axis,
    pub slice: usize,
    pub prompt: PromptBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub slice: usize,
    pub prompt: PromptBody,
}
