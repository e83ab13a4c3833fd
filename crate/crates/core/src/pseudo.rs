//! Single-slice pseudo-labels from unlabelled volumes.
//!
//! Each interior slice is re-rendered under several intensity truncation
//! windows around the volume mean, superpixels of every rendering seed point
//! and box prompts, and the surviving central-slice masks are deduplicated
//! across renderings with box NMS.

use std::path::Path;

use ndarray::{Array3, Axis as NdAxis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::WindowPredictor;
use crate::postprocess::{best_hypothesis, filter_predictions, nms_indices, FilterConfig, InstanceMask};
use crate::prompt::Prompt;
use crate::slic::{superpixel_prompts, SlicConfig};
use crate::training::TrainingSample;
use crate::volume::{rle_decode, rle_encode, Axis, RleMask, SliceWindow, Volume};

/// Truncation half-widths in units of the intensity standard deviation.
pub const TRUNCATION_FACTORS: [f64; 4] = [3.0, 2.0, 1.0, 0.5];

/// Rendered intensities are snapped to multiples of this step so that the
/// output does not depend on rounding noise in the mean.
const RENDER_QUANTUM: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationVariant {
    pub k: f64,
    pub low: f64,
    pub high: f64,
    /// Same geometry as the source volume, intensities in `[0, 255]`.
    pub volume: Volume,
}

/// Mean and population standard deviation of the raw voxels.
pub fn intensity_stats(volume: &Volume) -> (f64, f64) {
    let n = volume.voxels.len() as f64;
    let mean = volume.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume.voxels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Clamps to `[mu - k*sd, mu + k*sd]` for each factor and stretches the
/// window onto `[0, 255]`.
pub fn truncation_variants(volume: &Volume) -> Result<Vec<TruncationVariant>> {
    let (mu, sd) = intensity_stats(volume);
    if !sd.is_finite() || sd <= 0.0 {
        return Err(Error::DegenerateVolume(format!(
            "volume {} has zero intensity variance",
            volume.id
        )));
    }
    Ok(TRUNCATION_FACTORS
        .iter()
        .map(|&k| {
            let half = k * sd;
            let voxels = volume.voxels.mapv(|v| {
                let t = ((v as f64 - mu).clamp(-half, half) + half) / (2.0 * half) * 255.0;
                ((t / RENDER_QUANTUM).round() * RENDER_QUANTUM) as f32
            });
            let mut rendered = volume.clone();
            rendered.voxels = voxels;
            rendered.normalized = true;
            TruncationVariant {
                k,
                low: mu - half,
                high: mu + half,
                volume: rendered,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Point,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub axis: Axis,
    pub slice_stride: usize,
    pub slic: SlicConfig,
    /// Superpixels darker than this (on the rendered `[0, 255]` scale) are
    /// treated as background.
    pub mean_min: f32,
    pub filter: FilterConfig,
    pub nms_iou: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            axis: Axis::Z,
            slice_stride: 1,
            slic: SlicConfig::default(),
            mean_min: 20.0,
            filter: FilterConfig::default(),
            nms_iou: 0.7,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slice_stride == 0 {
            return Err(Error::Config("slice_stride must be at least 1".into()));
        }
        if self.slic.n_segments == 0 {
            return Err(Error::Config("n_segments must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("nms_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One pseudo-labelled window: the mask lives on the central slice only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecord {
    pub axis: Axis,
    pub center_index: usize,
    pub indicator: [u8; 3],
    pub variant_k: f64,
    pub prompt: PromptKind,
    pub score: f32,
    pub mask: RleMask,
}

pub const RECORD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecordFile {
    pub version: u32,
    pub volume_id: String,
    pub shape: [usize; 3],
    pub records: Vec<PseudoRecord>,
}

impl PseudoRecordFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file: PseudoRecordFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.version != RECORD_FORMAT_VERSION {
            return Err(Error::CorruptData(format!(
                "pseudo-label file version {} is not supported",
                file.version
            )));
        }
        Ok(file)
    }

    /// Rebuilds training samples against the source volume, using the
    /// rendering each mask was produced from.
    pub fn to_samples(&self, volume: &Volume, seed: u64) -> Result<Vec<TrainingSample>> {
        let (d, h, w) = volume.shape();
        if [d, h, w] != self.shape {
            return Err(Error::CorruptData(format!(
                "records were made for shape {:?}, volume has {:?}",
                self.shape,
                (d, h, w)
            )));
        }
        let variants = truncation_variants(volume)?;
        self.records
            .iter()
            .enumerate()
            .map(|(n, r)| {
                let variant = variants
                    .iter()
                    .find(|v| v.k == r.variant_k)
                    .ok_or_else(|| Error::CorruptData(format!("unknown truncation factor {}", r.variant_k)))?;
                let window = SliceWindow::from_volume(&variant.volume, r.axis, r.center_index)?;
                let central = rle_decode(&r.mask)?;
                if central.dim() != (window.height(), window.width()) {
                    return Err(Error::CorruptData("record mask does not match the slice size".into()));
                }
                let mut gt = Array3::from_elem(window.pixels.dim(), false);
                gt.index_axis_mut(NdAxis(0), 1).assign(&central);
                TrainingSample::new(window.pixels, gt, r.indicator, seed.wrapping_add(n as u64))
            })
            .collect()
    }
}

struct Candidate {
    mask: InstanceMask,
    variant_k: f64,
    prompt: PromptKind,
}

fn slice_candidates<P: WindowPredictor + ?Sized>(
    predictor: &P,
    variants: &[TruncationVariant],
    axis: Axis,
    center: usize,
    config: &PseudoConfig,
) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for variant in variants {
        let window = SliceWindow::from_volume(&variant.volume, axis, center)?;
        let image = window.pixels.index_axis(NdAxis(0), 1);
        for sp in superpixel_prompts(image, &config.slic, config.mean_min) {
            for (kind, prompt) in [
                (PromptKind::Point, Prompt::Points(vec![sp.point])),
                (PromptKind::Box, Prompt::Box(sp.bbox)),
            ] {
                let outputs = predictor.predict_window(&window.pixels, &prompt)?;
                let best = best_hypothesis(filter_predictions(&outputs, &config.filter));
                if let Some(mask) = best.and_then(|h| h.central_instance()) {
                    out.push(Candidate {
                        mask,
                        variant_k: variant.k,
                        prompt: kind,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Pseudo-labels every `slice_stride`-th interior slice along the configured
/// axis. Slices are processed in parallel; record order is by slice, then
/// by NMS rank.
pub fn generate_pseudo_records<P: WindowPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    config: &PseudoConfig,
) -> Result<PseudoRecordFile> {
    config.validate()?;
    let variants = truncation_variants(volume)?;
    let dim = volume.dim(config.axis);
    let centers: Vec<usize> = (1..dim.saturating_sub(1)).step_by(config.slice_stride).collect();
    let per_slice = centers
        .par_iter()
        .map(|&c| {
            let candidates = slice_candidates(predictor, &variants, config.axis, c, config)?;
            let boxes: Vec<_> = candidates.iter().map(|c| c.mask.bbox).collect();
            let scores: Vec<_> = candidates.iter().map(|c| c.mask.score).collect();
            let keep = nms_indices(&boxes, &scores, config.nms_iou);
            Ok(keep
                .into_iter()
                .map(|i| {
                    let cand = &candidates[i];
                    PseudoRecord {
                        axis: config.axis,
                        center_index: c,
                        indicator: [0, 1, 0],
                        variant_k: cand.variant_k,
                        prompt: cand.prompt,
                        score: cand.mask.score,
                        mask: rle_encode(cand.mask.mask.view()),
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let (d, h, w) = volume.shape();
    Ok(PseudoRecordFile {
        version: RECORD_FORMAT_VERSION,
        volume_id: volume.id.clone(),
        shape: [d, h, w],
        records: per_slice.into_iter().flatten().collect(),
    })
}
