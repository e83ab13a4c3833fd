//! Sliding-window propagation of a single-slice prompt through a volume.
//!
//! A seed window centred on the prompted slice is predicted first. Each
//! travel direction then repeatedly takes the end-slice mask of the last
//! window, opens it, and uses the box of its largest component to prompt a
//! window centred on that end slice, until the opened mask is empty or the
//! window would leave the volume. Windows pending at the same step across
//! directions (and instances) are dispatched together in batches.

use ndarray::{Array2, Array3, ArrayView2, Axis as NdAxis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::{label_components, Connectivity};
use crate::model::{DecoderOutputs, SlideSam, NUM_HYPOTHESES};
use crate::postprocess::{
    best_hypothesis, filter_predictions, mask_nms, mask_to_bbox, morphological_open, FilterConfig, HypothesisMask,
    InstanceMask,
};
use crate::prompt::{PointPrompt, Prompt};
use crate::volume::{Axis, InstanceInfo, LabelSource, Mask2, SliceWindow, Volume, VolumeMask};

/// Anything that maps a `(3, H, W)` window and a middle-slice prompt to
/// per-slice hypothesis logits. Implementations must be deterministic.
pub trait WindowPredictor: Sync {
    fn predict_window(&self, pixels: &Array3<f32>, prompt: &Prompt) -> Result<DecoderOutputs>;
}

impl WindowPredictor for SlideSam {
    fn predict_window(&self, pixels: &Array3<f32>, prompt: &Prompt) -> Result<DecoderOutputs> {
        self.predict(pixels, prompt)
    }
}

impl<P: WindowPredictor + Send> WindowPredictor for std::sync::Arc<P> {
    fn predict_window(&self, pixels: &Array3<f32>, prompt: &Prompt) -> Result<DecoderOutputs> {
        (**self).predict_window(pixels, prompt)
    }
}

/// Threshold-and-connectivity predictor. On the middle slice it keeps the
/// bright components touched by the prompt; on the outer slices it keeps the
/// bright components overlapping the middle-slice result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityPredictor {
    pub threshold: f32,
}

impl Default for IntensityPredictor {
    fn default() -> Self {
        IntensityPredictor { threshold: 110.0 }
    }
}

fn components_touching(bright: ArrayView2<bool>, seed: &Mask2) -> Mask2 {
    let (labels, sizes) = label_components(bright, Connectivity::Eight);
    let mut keep = vec![false; sizes.len() + 1];
    for (l, &s) in labels.iter().zip(seed.iter()) {
        if s && *l != 0 {
            keep[*l as usize] = true;
        }
    }
    labels.mapv(|l| l != 0 && keep[l as usize])
}

impl WindowPredictor for IntensityPredictor {
    fn predict_window(&self, pixels: &Array3<f32>, prompt: &Prompt) -> Result<DecoderOutputs> {
        let (_, h, w) = pixels.dim();
        prompt.validate(h, w)?;
        let bright = pixels.mapv(|p| p > self.threshold);
        let seed: Mask2 = match prompt {
            Prompt::Points(points) => Array2::from_shape_fn((h, w), |(y, x)| {
                points.iter().any(|p| p.foreground && p.x == x && p.y == y)
            }),
            Prompt::Box(b) => Array2::from_shape_fn((h, w), |(y, x)| b.contains(x, y)),
            Prompt::Mask(m) => m.index_axis(NdAxis(0), 1).mapv(|v| v > 0.5),
        };
        let central = components_touching(bright.index_axis(NdAxis(0), 1), &seed);
        let mut logits = ndarray::Array4::from_elem((3, NUM_HYPOTHESES, h, w), -10.0f32);
        for s in 0..3 {
            let m = if s == 1 {
                central.clone()
            } else {
                components_touching(bright.index_axis(NdAxis(0), s), &central)
            };
            for j in 0..NUM_HYPOTHESES {
                let mut view = logits.index_axis_mut(NdAxis(0), s);
                let mut view = view.index_axis_mut(NdAxis(0), j);
                ndarray::Zip::from(&mut view).and(&m).for_each(|l, &v| {
                    if v {
                        *l = 10.0;
                    }
                });
            }
        }
        Ok(DecoderOutputs {
            logits,
            iou: vec![0.9; NUM_HYPOTHESES],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn sign(self) -> isize {
        match self {
            Direction::Forward => 1,
            Direction::Backward => -1,
        }
    }

    /// Window slot holding the end slice in this travel direction.
    fn end_slot(self) -> usize {
        match self {
            Direction::Forward => 2,
            Direction::Backward => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    EmptyMask,
    Boundary,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub filter: FilterConfig,
    /// Slices advanced between consecutive windows.
    pub stride: usize,
    /// Windows dispatched together.
    pub max_batch: usize,
    pub open_iterations: usize,
    /// Safety cap on steps per direction; the axis extent when `None`.
    pub max_steps: Option<usize>,
    /// Point-grid spacing for whole-slice mode.
    pub grid_step: usize,
    pub nms_iou: f64,
    /// Seeding rounds in whole-slice mode.
    pub everything_rounds: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            filter: FilterConfig::default(),
            stride: 1,
            max_batch: 4,
            open_iterations: 1,
            max_steps: None,
            grid_step: 16,
            nms_iou: 0.7,
            everything_rounds: 2,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.max_batch == 0 {
            return Err(Error::Config("max_batch must be at least 1".into()));
        }
        if self.grid_step == 0 {
            return Err(Error::Config("grid_step must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-direction propagation state of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationState {
    pub instance: u32,
    pub direction: Direction,
    /// Centre of the most recent window.
    pub frontier_index: usize,
    /// Box prompt for the next window, if any.
    pub active_prompt: Option<Prompt>,
    pub steps: usize,
    pub terminated: Option<TerminationReason>,
}

/// What to do after a window in a given direction.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Next { center: usize, prompt: Prompt },
    Terminated(TerminationReason),
}

/// Derives the next window from the last one: the end-slice mask is opened
/// and the box of its largest component prompts a window centred
/// `stride` slices further along.
pub fn propagate_step(
    hypothesis: &HypothesisMask,
    center: usize,
    direction: Direction,
    dim: usize,
    stride: usize,
    open_iterations: usize,
) -> StepOutcome {
    let next = center as isize + direction.sign() * stride as isize;
    if next < 1 || next as usize + 1 >= dim {
        return StepOutcome::Terminated(TerminationReason::Boundary);
    }
    let opened = morphological_open(hypothesis.slice(direction.end_slot()), open_iterations);
    match mask_to_bbox(opened.view()) {
        None => StepOutcome::Terminated(TerminationReason::EmptyMask),
        Some(b) => StepOutcome::Next {
            center: next as usize,
            prompt: Prompt::Box(b),
        },
    }
}

/// Centred grid points with spacing `grid_step` that no covered mask contains.
pub fn sample_uncovered_points(shape: (usize, usize), covered: &[Mask2], grid_step: usize) -> Vec<PointPrompt> {
    let (h, w) = shape;
    let step = grid_step.max(1);
    let off = step / 2;
    let mut points = Vec::new();
    for y in (off..h).step_by(step) {
        for x in (off..w).step_by(step) {
            if covered.iter().any(|m| m[[y, x]]) {
                continue;
            }
            points.push(PointPrompt { x, y, foreground: true });
        }
    }
    points
}

/// Greedy order-preserving packing into batches of at most `max_batch`.
pub fn batch_windows<T>(pending: Vec<T>, max_batch: usize) -> Vec<Vec<T>> {
    let max_batch = max_batch.max(1);
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(max_batch);
    for item in pending {
        current.push(item);
        if current.len() == max_batch {
            out.push(std::mem::replace(&mut current, Vec::with_capacity(max_batch)));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

struct WindowJob {
    center: usize,
    prompt: Prompt,
}

/// Predicts each window independently; batches run in parallel, so the
/// result never depends on `max_batch`.
fn run_windows<P: WindowPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    axis: Axis,
    jobs: Vec<WindowJob>,
    config: &InferenceConfig,
) -> Result<Vec<Option<HypothesisMask>>> {
    let filter = config.filter;
    let mut results = Vec::with_capacity(jobs.len());
    for batch in batch_windows(jobs, config.max_batch) {
        let out: Vec<Result<Option<HypothesisMask>>> = batch
            .par_iter()
            .map(|job| {
                let window = SliceWindow::from_volume(volume, axis, job.center)?;
                let outputs = predictor.predict_window(&window.pixels, &job.prompt)?;
                Ok(best_hypothesis(filter_predictions(&outputs, &filter)))
            })
            .collect();
        for r in out {
            results.push(r?);
        }
    }
    Ok(results)
}

/// Outcome of a propagation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub mask: VolumeMask,
    /// Final state of every direction of every instance.
    pub states: Vec<PropagationState>,
    pub windows: usize,
    pub diagnostics: Vec<String>,
}

impl SegmentationResult {
    pub fn termination(&self, instance: u32, direction: Direction) -> Option<TerminationReason> {
        self.states
            .iter()
            .find(|s| s.instance == instance && s.direction == direction)
            .and_then(|s| s.terminated)
    }
}

/// Snapshot passed to the progress callback after every propagation step.
#[derive(Debug, Clone, Copy)]
pub struct ProgressUpdate<'m> {
    /// Slices along the axis carrying at least one label.
    pub labeled: usize,
    pub total: usize,
    pub mask: &'m VolumeMask,
}

pub type Progress<'a> = &'a mut dyn FnMut(&ProgressUpdate<'_>);

fn report(progress: &mut dyn FnMut(&ProgressUpdate<'_>), mask: &VolumeMask, axis: Axis, total: usize) {
    progress(&ProgressUpdate {
        labeled: mask.labeled_slice_count(axis),
        total,
        mask,
    });
}

fn paint_window(mask: &mut VolumeMask, axis: Axis, center: usize, h: &HypothesisMask, id: u32) {
    for (slot, idx) in (center - 1..=center + 1).enumerate() {
        mask.paint_slice(axis, idx, h.slice(slot), id);
    }
}

fn check_start(volume: &Volume, axis: Axis, start_index: usize) -> Result<usize> {
    let dim = volume.dim(axis);
    if dim < 3 || start_index == 0 || start_index + 1 >= dim {
        return Err(Error::InvalidInput(format!(
            "start index {start_index} must lie in [1, {}] along axis {axis}",
            dim.saturating_sub(2)
        )));
    }
    Ok(dim)
}

/// Propagates already-predicted seed windows in both directions, all
/// instances in lockstep.
#[allow(clippy::too_many_arguments)]
fn propagate<P: WindowPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    axis: Axis,
    start_index: usize,
    seeds: Vec<(u32, HypothesisMask)>,
    config: &InferenceConfig,
    mask: &mut VolumeMask,
    progress: &mut dyn FnMut(&ProgressUpdate<'_>),
) -> Result<(Vec<PropagationState>, usize)> {
    let dim = volume.dim(axis);
    let max_steps = config.max_steps.unwrap_or(dim);
    let mut states = Vec::new();
    let mut last: Vec<HypothesisMask> = Vec::new();
    for (id, h) in seeds {
        paint_window(mask, axis, start_index, &h, id);
        for direction in [Direction::Backward, Direction::Forward] {
            states.push(PropagationState {
                instance: id,
                direction,
                frontier_index: start_index,
                active_prompt: None,
                steps: 0,
                terminated: None,
            });
            last.push(h.clone());
        }
    }
    report(progress, mask, axis, dim);
    let mut windows = 0;
    loop {
        let mut jobs = Vec::new();
        let mut owners = Vec::new();
        for (k, state) in states.iter_mut().enumerate() {
            if state.terminated.is_some() {
                continue;
            }
            match propagate_step(
                &last[k],
                state.frontier_index,
                state.direction,
                dim,
                config.stride,
                config.open_iterations,
            ) {
                StepOutcome::Terminated(r) => {
                    state.terminated = Some(r);
                    state.active_prompt = None;
                }
                StepOutcome::Next { .. } if state.steps >= max_steps => {
                    state.terminated = Some(TerminationReason::MaxSteps);
                }
                StepOutcome::Next { center, prompt } => {
                    state.active_prompt = Some(prompt.clone());
                    jobs.push(WindowJob { center, prompt });
                    owners.push(k);
                }
            }
        }
        if jobs.is_empty() {
            break;
        }
        let centers: Vec<usize> = jobs.iter().map(|j| j.center).collect();
        windows += jobs.len();
        let results = run_windows(predictor, volume, axis, jobs, config)?;
        for ((k, center), result) in owners.into_iter().zip(centers).zip(results) {
            let state = &mut states[k];
            state.steps += 1;
            state.frontier_index = center;
            match result {
                Some(h) => {
                    paint_window(mask, axis, center, &h, state.instance);
                    last[k] = h;
                }
                None => state.terminated = Some(TerminationReason::EmptyMask),
            }
        }
        report(progress, mask, axis, dim);
    }
    Ok((states, windows))
}

fn register_instance(mask: &mut VolumeMask, id: u32) {
    mask.instances.insert(
        id,
        InstanceInfo {
            name: format!("instance_{id}"),
            source: LabelSource::Predicted,
        },
    );
}

/// Segments one target from a single prompt on slice `start_index`.
pub fn segment_volume<P: WindowPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    axis: Axis,
    start_index: usize,
    prompt: &Prompt,
    config: &InferenceConfig,
    progress: Option<Progress<'_>>,
) -> Result<SegmentationResult> {
    config.validate()?;
    check_start(volume, axis, start_index)?;
    let (h, w) = volume.slice_shape(axis);
    prompt.validate(h, w)?;
    let mut noop = |_: &ProgressUpdate<'_>| {};
    let progress: &mut dyn FnMut(&ProgressUpdate<'_>) = match progress {
        Some(p) => p,
        None => &mut noop,
    };
    let mut mask = VolumeMask::empty(volume.shape());
    let seed = run_windows(
        predictor,
        volume,
        axis,
        vec![WindowJob {
            center: start_index,
            prompt: prompt.clone(),
        }],
        config,
    )?
    .pop()
    .flatten()
    .filter(|h| h.central_slice().iter().any(|&v| v));
    let Some(seed) = seed else {
        let states = [Direction::Backward, Direction::Forward]
            .into_iter()
            .map(|direction| PropagationState {
                instance: 1,
                direction,
                frontier_index: start_index,
                active_prompt: None,
                steps: 0,
                terminated: Some(TerminationReason::EmptyMask),
            })
            .collect();
        return Ok(SegmentationResult {
            mask,
            states,
            windows: 1,
            diagnostics: vec![format!(
                "seed window at {axis}={start_index} produced no mask passing the filters"
            )],
        });
    };
    register_instance(&mut mask, 1);
    let (states, windows) = propagate(predictor, volume, axis, start_index, vec![(1, seed)], config, &mut mask, progress)?;
    Ok(SegmentationResult {
        mask,
        states,
        windows: windows + 1,
        diagnostics: Vec::new(),
    })
}

/// Union of two label volumes: voxels already labelled in `base` keep
/// their id, unlabelled voxels take the label from `extra`.
pub fn merge_masks(base: &VolumeMask, extra: &VolumeMask) -> VolumeMask {
    let mut out = base.clone();
    ndarray::Zip::from(&mut out.labels).and(&extra.labels).for_each(|o, &e| {
        if *o == 0 {
            *o = e;
        }
    });
    for (id, info) in &extra.instances {
        out.instances.entry(*id).or_insert_with(|| info.clone());
    }
    out
}

/// Re-runs propagation from an extra prompt on slice `index` and merges
/// the result into `parent` by logical OR. Progress snapshots show the
/// merged mask.
#[allow(clippy::too_many_arguments)]
pub fn refine_volume<P: WindowPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    parent: &VolumeMask,
    axis: Axis,
    index: usize,
    prompt: &Prompt,
    config: &InferenceConfig,
    progress: Option<Progress<'_>>,
) -> Result<SegmentationResult> {
    parent.check_aligned(volume)?;
    let mut result = match progress {
        Some(outer) => {
            let mut wrapped = |u: &ProgressUpdate<'_>| {
                let merged = merge_masks(parent, u.mask);
                outer(&ProgressUpdate {
                    labeled: merged.labeled_slice_count(axis),
                    total: u.total,
                    mask: &merged,
                });
            };
            segment_volume(predictor, volume, axis, index, prompt, config, Some(&mut wrapped))?
        }
        None => segment_volume(predictor, volume, axis, index, prompt, config, None)?,
    };
    result.mask = merge_masks(parent, &result.mask);
    Ok(result)
}

/// Whole-slice mode: grid points on the start slice seed candidate
/// instances, duplicates are removed by NMS, and every survivor is
/// propagated as its own instance.
pub fn segment_everything<P: WindowPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    axis: Axis,
    start_index: usize,
    config: &InferenceConfig,
    progress: Option<Progress<'_>>,
) -> Result<SegmentationResult> {
    config.validate()?;
    check_start(volume, axis, start_index)?;
    let shape = volume.slice_shape(axis);
    let mut noop = |_: &ProgressUpdate<'_>| {};
    let progress: &mut dyn FnMut(&ProgressUpdate<'_>) = match progress {
        Some(p) => p,
        None => &mut noop,
    };
    let mut accepted: Vec<(InstanceMask, HypothesisMask)> = Vec::new();
    let mut windows = 0;
    for _ in 0..config.everything_rounds.max(1) {
        let covered: Vec<Mask2> = accepted.iter().map(|(m, _)| m.mask.clone()).collect();
        let points = sample_uncovered_points(shape, &covered, config.grid_step);
        if points.is_empty() {
            break;
        }
        let jobs: Vec<WindowJob> = points
            .iter()
            .map(|p| WindowJob {
                center: start_index,
                prompt: Prompt::Points(vec![*p]),
            })
            .collect();
        windows += jobs.len();
        let results = run_windows(predictor, volume, axis, jobs, config)?;
        let mut candidates: Vec<(InstanceMask, HypothesisMask)> = results
            .into_iter()
            .flatten()
            .filter_map(|h| h.central_instance().map(|m| (m, h)))
            .collect();
        let all: Vec<InstanceMask> = accepted
            .iter()
            .map(|(m, _)| m.clone())
            .chain(candidates.iter().map(|(m, _)| m.clone()))
            .collect();
        let kept = mask_nms(all, config.nms_iou);
        let before = accepted.len();
        for m in kept {
            if accepted.iter().any(|(a, _)| *a == m) {
                continue;
            }
            if let Some(pos) = candidates.iter().position(|(c, _)| *c == m) {
                accepted.push(candidates.swap_remove(pos));
            }
        }
        if accepted.len() == before {
            break;
        }
    }
    let mut mask = VolumeMask::empty(volume.shape());
    let seeds: Vec<(u32, HypothesisMask)> = accepted
        .into_iter()
        .enumerate()
        .map(|(i, (_, h))| (i as u32 + 1, h))
        .collect();
    for (id, _) in &seeds {
        register_instance(&mut mask, *id);
    }
    let diagnostics = if seeds.is_empty() {
        vec!["no grid point produced a mask passing the filters".to_string()]
    } else {
        Vec::new()
    };
    let (states, more) = propagate(predictor, volume, axis, start_index, seeds, config, &mut mask, progress)?;
    Ok(SegmentationResult {
        mask,
        states,
        windows: windows + more,
        diagnostics,
    })
}
