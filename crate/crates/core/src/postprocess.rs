//! Mask geometry used between window predictions: quality filters, boxes,
//! non-maximum suppression and morphological opening.
//!
//! Logits are binarized at `logit > 0` everywhere in the crate.

use ndarray::{Array2, Array3, ArrayView, ArrayView2, Axis, Dimension};

use crate::imgops::{label_components, Connectivity};
use crate::model::DecoderOutputs;
use crate::prompt::BBox;
use crate::volume::Mask2;

pub const BINARIZE_THRESHOLD: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub iou_min: f32,
    pub stability_min: f32,
    /// Half-width of the logit offset interval used for the stability score.
    pub stability_delta: f32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            iou_min: 0.4,
            stability_min: 0.6,
            stability_delta: 0.1,
        }
    }
}

/// A single 2D mask with its confidence, as used by NMS.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub mask: Mask2,
    pub score: f32,
    pub bbox: BBox,
    pub stability: f32,
}

impl InstanceMask {
    /// `None` when the mask is empty.
    pub fn new(mask: Mask2, score: f32, stability: f32) -> Option<Self> {
        let bbox = tight_bbox(mask.view())?;
        Some(InstanceMask {
            mask,
            score: score.clamp(0.0, 1.0),
            bbox,
            stability,
        })
    }
}

/// A window hypothesis that survived [`filter_predictions`].
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisMask {
    /// Zero-based hypothesis index `j`.
    pub index: usize,
    pub score: f32,
    pub stability: f32,
    /// Binarized masks `[slice, row, col]`.
    pub masks: Array3<bool>,
}

impl HypothesisMask {
    pub fn slice(&self, i: usize) -> ArrayView2<'_, bool> {
        self.masks.index_axis(Axis(0), i)
    }

    pub fn central_slice(&self) -> ArrayView2<'_, bool> {
        self.slice(self.masks.dim().0 / 2)
    }

    pub fn central_instance(&self) -> Option<InstanceMask> {
        InstanceMask::new(self.central_slice().to_owned(), self.score, self.stability)
    }
}

/// `area(logits > tau + delta) / area(logits > tau - delta)`, or 0 when the
/// larger area is empty.
pub fn stability_score<D: Dimension>(logits: ArrayView<f32, D>, delta: f32, tau: f32) -> f32 {
    let (mut inner, mut outer) = (0usize, 0usize);
    for &l in logits.iter() {
        if l > tau + delta {
            inner += 1;
        }
        if l > tau - delta {
            outer += 1;
        }
    }
    if outer == 0 {
        0.0
    } else {
        inner as f32 / outer as f32
    }
}

/// Drops hypotheses whose predicted IoU or stability falls strictly below the
/// thresholds and binarizes the rest. Stability is measured over all slices
/// of the hypothesis jointly.
pub fn filter_predictions(outputs: &DecoderOutputs, config: &FilterConfig) -> Vec<HypothesisMask> {
    let hypotheses = outputs.logits.dim().1;
    (0..hypotheses)
        .filter_map(|j| {
            let score = outputs.iou[j];
            if score < config.iou_min {
                return None;
            }
            let logits = outputs.logits.index_axis(Axis(1), j);
            let stability = stability_score(logits, config.stability_delta, BINARIZE_THRESHOLD);
            if stability < config.stability_min {
                return None;
            }
            Some(HypothesisMask {
                index: j,
                score,
                stability,
                masks: logits.mapv(|l| l > BINARIZE_THRESHOLD),
            })
        })
        .collect()
}

/// Survivor with the highest predicted IoU (lowest index on ties).
pub fn best_hypothesis(survivors: Vec<HypothesisMask>) -> Option<HypothesisMask> {
    survivors.into_iter().fold(None, |best, h| match best {
        Some(b) if b.score >= h.score => Some(b),
        _ => Some(h),
    })
}

/// Tight box around every foreground pixel.
pub fn tight_bbox(mask: ArrayView2<bool>) -> Option<BBox> {
    let mut bbox: Option<BBox> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        bbox = Some(match bbox {
            None => BBox::new(x, y, x, y),
            Some(b) => BBox {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x),
                y1: b.y1.max(y),
            },
        });
    }
    bbox
}

/// Boxes of every 8-connected component, in raster order of first pixel.
pub fn component_bboxes(mask: ArrayView2<bool>) -> Vec<BBox> {
    let (labels, sizes) = label_components(mask, Connectivity::Eight);
    (1..=sizes.len() as u32)
        .filter_map(|id| tight_bbox(labels.mapv(|l| l == id).view()))
        .collect()
}

/// Tight box of the largest 8-connected component; ties go to the component
/// found first in raster order.
pub fn mask_to_bbox(mask: ArrayView2<bool>) -> Option<BBox> {
    let (labels, sizes) = label_components(mask, Connectivity::Eight);
    let (best, _) = sizes
        .iter()
        .enumerate()
        .fold(None::<(usize, usize)>, |acc, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })?;
    let id = best as u32 + 1;
    tight_bbox(labels.mapv(|l| l == id).view())
}

/// Intersection over union of inclusive pixel boxes.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    if ix0 > ix1 || iy0 > iy1 {
        return 0.0;
    }
    let inter = ((ix1 - ix0 + 1) * (iy1 - iy0 + 1)) as f64;
    inter / ((a.area() + b.area()) as f64 - inter)
}

/// Greedy suppression on box IoU in descending score order; stable for equal
/// scores. Returns indices of kept entries in that order.
pub fn nms_indices(boxes: &[BBox], scores: &[f32], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::with_capacity(order.len());
    for i in order {
        if keep.iter().all(|&k| bbox_iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

pub fn mask_nms(masks: Vec<InstanceMask>, iou_thresh: f64) -> Vec<InstanceMask> {
    let boxes: Vec<BBox> = masks.iter().map(|m| m.bbox).collect();
    let scores: Vec<f32> = masks.iter().map(|m| m.score).collect();
    let keep = nms_indices(&boxes, &scores, iou_thresh);
    let mut slots: Vec<Option<InstanceMask>> = masks.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| slots[i].take()).collect()
}

/// 3x3 square erosion; pixels outside the image count as background.
pub fn erode(mask: ArrayView2<bool>) -> Mask2 {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if y == 0 || x == 0 || y + 1 >= h || x + 1 >= w {
            return false;
        }
        (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| mask[[yy, xx]]))
    })
}

/// 3x3 square dilation.
pub fn dilate(mask: ArrayView2<bool>) -> Mask2 {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
        ys.into_iter()
            .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| mask[[yy, xx]]))
    })
}

/// Erosion followed by dilation with the 3x3 square, each applied
/// `iterations` times.
pub fn morphological_open(mask: ArrayView2<bool>, iterations: usize) -> Mask2 {
    let mut m = mask.to_owned();
    for _ in 0..iterations {
        m = erode(m.view());
    }
    for _ in 0..iterations {
        m = dilate(m.view());
    }
    m
}
