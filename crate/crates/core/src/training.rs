//! Hybrid 2D/3D segmentation loss, hypothesis selection, prompt simulation
//! and the optimization loop.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array3, ArrayView2, ArrayView3, Axis as NdAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SlideSam, NUM_HYPOTHESES};
use crate::postprocess::{tight_bbox, BINARIZE_THRESHOLD};
use crate::prompt::{BBox, PointPrompt, Prompt};
use crate::volume::{resize_window, SliceWindow};

pub const DICE_EPS: f64 = 1e-6;
/// Fraction of the box side used as the corner-noise standard deviation.
pub const BOX_NOISE_FRACTION: f64 = 0.1;
/// Largest corner displacement, in pixels, of a simulated box.
pub const BOX_NOISE_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 20.0, dice: 1.0 }
    }
}

impl LossWeights {
    pub fn combine(&self, ce: f64, dice: f64) -> f64 {
        self.ce * ce + self.dice * dice
    }

    pub fn validate(&self) -> Result<()> {
        if self.ce < 0.0 || self.dice < 0.0 || !self.ce.is_finite() || !self.dice.is_finite() {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// AdamW over the model's trainable parameters.
    pub fn build(&self, model: &SlideSam) -> Result<AdamW> {
        self.validate()?;
        let params = ParamsAdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        };
        Ok(AdamW::new(model.params().trainable_vars(), params)?)
    }
}

/// One training window with its ground truth and per-slice indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub pixels: Array3<f32>,
    pub gt: Array3<bool>,
    pub indicator: [u8; 3],
    pub prompt_seed: u64,
}

impl TrainingSample {
    pub fn new(pixels: Array3<f32>, gt: Array3<bool>, indicator: [u8; 3], prompt_seed: u64) -> Result<Self> {
        if pixels.dim() != gt.dim() || pixels.dim().0 != 3 {
            return Err(Error::InvalidSample(format!(
                "pixels {:?} and gt {:?} must both be (3, H, W)",
                pixels.dim(),
                gt.dim()
            )));
        }
        if indicator.iter().all(|&i| i == 0) || indicator.iter().any(|&i| i > 1) {
            return Err(Error::InvalidSample(format!("indicator {indicator:?} must be binary with a 1")));
        }
        if !gt.index_axis(NdAxis(0), 1).iter().any(|&v| v) {
            return Err(Error::InvalidSample("central slice ground truth is empty".into()));
        }
        Ok(TrainingSample {
            pixels,
            gt,
            indicator,
            prompt_seed,
        })
    }

    pub fn from_window(window: &SliceWindow, prompt_seed: u64) -> Result<Self> {
        let gt = window
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidSample("window has no labels".into()))?;
        Self::new(window.pixels.clone(), gt, window.indicator, prompt_seed)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Resamples to a square model input size.
    pub fn resized(&self, size: usize) -> Result<Self> {
        if (self.height(), self.width()) == (size, size) {
            return Ok(self.clone());
        }
        let window = SliceWindow {
            pixels: self.pixels.clone(),
            axis: crate::volume::Axis::Z,
            center_index: 1,
            labels: Some(self.gt.clone()),
            indicator: self.indicator,
            instance: None,
        };
        let r = resize_window(&window, (size, size))?;
        Ok(TrainingSample {
            pixels: r.pixels,
            gt: r.labels.expect("labels preserved"),
            indicator: self.indicator,
            prompt_seed: self.prompt_seed,
        })
    }

    pub fn is_volumetric(&self) -> bool {
        self.indicator == [1, 1, 1]
    }
}

/// One corner-noise draw for a box side of `side` pixels.
pub fn box_noise<R: Rng + ?Sized>(side: f64, rng: &mut R) -> f64 {
    let sigma = BOX_NOISE_FRACTION * side;
    if sigma <= 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    n.sample(rng).clamp(-BOX_NOISE_MAX, BOX_NOISE_MAX)
}

/// Training-time prompt: with equal probability a uniformly drawn
/// foreground point or the tight box with clamped Gaussian corner noise.
pub fn simulate_prompt<R: Rng + ?Sized>(gt: ArrayView2<bool>, rng: &mut R) -> Result<Prompt> {
    let bbox = tight_bbox(gt).ok_or_else(|| Error::InvalidSample("cannot prompt an empty mask".into()))?;
    if rng.gen_bool(0.5) {
        let count = gt.iter().filter(|&&v| v).count();
        let pick = rng.gen_range(0..count);
        let (idx, _) = gt
            .indexed_iter()
            .filter(|(_, &v)| v)
            .nth(pick)
            .expect("pick within foreground count");
        Ok(Prompt::Points(vec![PointPrompt {
            x: idx.1,
            y: idx.0,
            foreground: true,
        }]))
    } else {
        Ok(Prompt::Box(noisy_box(&bbox, gt.dim(), rng)))
    }
}

pub fn noisy_box<R: Rng + ?Sized>(bbox: &BBox, (height, width): (usize, usize), rng: &mut R) -> BBox {
    let w = bbox.width() as f64;
    let h = bbox.height() as f64;
    let x0 = bbox.x0 as f64 + box_noise(w, rng);
    let y0 = bbox.y0 as f64 + box_noise(h, rng);
    let x1 = bbox.x1 as f64 + box_noise(w, rng);
    let y1 = bbox.y1 as f64 + box_noise(h, rng);
    BBox::from_f64_clamped(x0, y0, x1, y1, height, width)
}

/// Per-sample, per-hypothesis loss terms and the differentiable objective.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Mean over the batch of the selected hypothesis' loss.
    pub total: Tensor,
    /// `[sample][hypothesis]` segmentation losses.
    pub seg: Vec<[f64; NUM_HYPOTHESES]>,
    /// `[sample][hypothesis]` IoU-prediction losses.
    pub iou: Vec<[f64; NUM_HYPOTHESES]>,
    /// Selected hypothesis per sample (0-based).
    pub selected: Vec<usize>,
}

/// Per-slice binary cross entropy on logits, mean over pixels: `(.., H, W) -> (..)`.
fn bce_per_slice(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let l = ((logits.relu()? - (logits * gt)?)? + softplus)?;
    Ok(l.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Per-slice soft Dice loss on probabilities: `(.., H, W) -> (..)`.
fn dice_per_slice(probs: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let inter = (probs * gt)?.sum(D::Minus1)?.sum(D::Minus1)?;
    let ps = probs.sum(D::Minus1)?.sum(D::Minus1)?;
    let gs = gt.sum(D::Minus1)?.sum(D::Minus1)?;
    let num = inter.affine(2.0, DICE_EPS)?;
    let den = (ps + gs)?.affine(1.0, DICE_EPS)?;
    Ok((num / den)?.affine(-1.0, 1.0)?)
}

/// Mean over slices with indicator 1 of `values` (`(B, S)`), with slices
/// carrying indicator 0 multiplied out so they receive no gradient.
fn masked_slice_mean(values: &Tensor, indicator: &Tensor) -> Result<Tensor> {
    let count = indicator.sum(D::Minus1)?;
    Ok((values * indicator)?.sum(D::Minus1)?.div(&count)?)
}

/// Segmentation loss per sample for one hypothesis: `logits` `(B, S, H, W)`.
pub fn seg_loss_tensor(logits: &Tensor, gt: &Tensor, indicator: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let ce = bce_per_slice(logits, gt)?;
    let dice = dice_per_slice(&candle_nn::ops::sigmoid(logits)?, gt)?;
    let per_slice = (ce.affine(w.ce, 0.0)? + dice.affine(w.dice, 0.0)?)?;
    masked_slice_mean(&per_slice, indicator)
}

/// Hard IoU between the binarized hypothesis masks (all slices together)
/// and the ground truth, per sample and hypothesis: `(B, J)`.
fn hard_iou(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let pred = logits.gt(BINARIZE_THRESHOLD as f64)?.to_dtype(gt.dtype())?;
    let gt = gt.unsqueeze(2)?.broadcast_as(pred.shape())?;
    let inter = (&pred * &gt)?.flatten_from(3)?.sum(D::Minus1)?.sum(1)?;
    let union = ((&pred + &gt)?.flatten_from(3)?.sum(D::Minus1)?.sum(1)? - &inter)?;
    let inter = inter.to_vec2::<f64>().or_else(|_| inter.to_dtype(DType::F64)?.to_vec2::<f64>())?;
    let union = union.to_vec2::<f64>().or_else(|_| union.to_dtype(DType::F64)?.to_vec2::<f64>())?;
    let vals: Vec<f64> = inter
        .iter()
        .zip(&union)
        .flat_map(|(i, u)| i.iter().zip(u).map(|(&i, &u)| if u > 0.0 { i / u } else { 1.0 }).collect::<Vec<_>>())
        .collect();
    let b = inter.len();
    Ok(Tensor::from_vec(vals, (b, NUM_HYPOTHESES), logits.device())?.to_dtype(logits.dtype())?)
}

/// Full objective. `logits` `(B, S, J, H, W)`, `iou` `(B, J)`, `gt` and
/// `indicator` `(B, S, H, W)` / `(B, S)` in the logits dtype, and
/// `iou_weight` `(B,)` equal to 1 where the IoU term applies.
pub fn hybrid_loss(
    logits: &Tensor,
    iou: &Tensor,
    gt: &Tensor,
    indicator: &Tensor,
    iou_weight: &Tensor,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let (b, _, j, _, _) = logits.dims5()?;
    let mut seg_heads = Vec::with_capacity(j);
    for h in 0..j {
        let lj = logits.narrow(2, h, 1)?.squeeze(2)?;
        seg_heads.push(seg_loss_tensor(&lj, gt, indicator, w)?);
    }
    let seg = Tensor::stack(&seg_heads, 1)?; // (B, J)
    let target = hard_iou(&logits.detach(), &gt.detach())?;
    let iou_l = (iou - target)?.sqr()?.broadcast_mul(&iou_weight.unsqueeze(1)?)?;
    let per_head = (&seg + &iou_l)?;

    let to_rows = |t: &Tensor| -> Result<Vec<[f64; NUM_HYPOTHESES]>> {
        let v = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(v.into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    };
    let seg_rows = to_rows(&seg)?;
    let iou_rows = to_rows(&iou_l)?;
    let mut selected = Vec::with_capacity(b);
    let mut onehot = vec![0f64; b * j];
    for (i, (s, u)) in seg_rows.iter().zip(&iou_rows).enumerate() {
        let totals = [s[0] + u[0], s[1] + u[1], s[2] + u[2]];
        let k = select_head(&totals)?;
        onehot[i * j + k] = 1.0;
        selected.push(k);
    }
    let onehot = Tensor::from_vec(onehot, (b, j), logits.device())?.to_dtype(logits.dtype())?;
    let total = ((per_head * onehot)?.sum_all()? / b as f64)?;
    Ok(LossBreakdown {
        total,
        seg: seg_rows,
        iou: iou_rows,
        selected,
    })
}

/// Index of the smallest loss, ties resolved towards the lowest index.
pub fn select_head(losses: &[f64]) -> Result<usize> {
    if losses.is_empty() {
        return Err(Error::TrainingFault("no hypothesis losses".into()));
    }
    if let Some(v) = losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::TrainingFault(format!("non-finite hypothesis loss {v} in {losses:?}")));
    }
    let mut k = 0;
    for (i, &v) in losses.iter().enumerate() {
        if v < losses[k] {
            k = i;
        }
    }
    Ok(k)
}

fn slice_tensor(values: &[f64], s: usize, h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (1, s, h, w), &candle_core::Device::Cpu)?)
}

fn indicator_tensor(indicator: &[u8]) -> Result<Tensor> {
    let v: Vec<f64> = indicator.iter().map(|&i| i as f64).collect();
    Ok(Tensor::from_vec(v, (1, indicator.len()), &candle_core::Device::Cpu)?)
}

fn indicator_guard(indicator: &[u8]) -> Result<()> {
    if indicator.iter().all(|&i| i == 0) {
        return Err(Error::InvalidSample("indicator selects no slice".into()));
    }
    Ok(())
}

/// Soft Dice loss on `(S, H, W)` probabilities, averaged over slices whose
/// indicator is 1.
pub fn dice_loss(probs: ArrayView3<f64>, gt: ArrayView3<bool>, indicator: &[u8]) -> Result<f64> {
    indicator_guard(indicator)?;
    let (s, h, w) = probs.dim();
    let p = slice_tensor(&probs.iter().copied().collect::<Vec<_>>(), s, h, w)?;
    let g = slice_tensor(&gt.iter().map(|&v| v as u8 as f64).collect::<Vec<_>>(), s, h, w)?;
    let d = masked_slice_mean(&dice_per_slice(&p, &g)?, &indicator_tensor(indicator)?)?;
    Ok(d.squeeze(0)?.to_scalar::<f64>()?)
}

/// Weighted cross-entropy plus Dice for one hypothesis on `(S, H, W)` logits.
pub fn seg_loss(logits: ArrayView3<f64>, gt: ArrayView3<bool>, indicator: &[u8], w: &LossWeights) -> Result<f64> {
    indicator_guard(indicator)?;
    let (s, h, wd) = logits.dim();
    let l = slice_tensor(&logits.iter().copied().collect::<Vec<_>>(), s, h, wd)?;
    let g = slice_tensor(&gt.iter().map(|&v| v as u8 as f64).collect::<Vec<_>>(), s, h, wd)?;
    let v = seg_loss_tensor(&l, &g, &indicator_tensor(indicator)?, w)?;
    Ok(v.squeeze(0)?.to_scalar::<f64>()?)
}

/// Squared error between a predicted IoU and the hard IoU of the
/// hypothesis; zero unless every slice is labelled.
pub fn iou_loss(u: f64, logits: ArrayView3<f64>, gt: ArrayView3<bool>, indicator: &[u8]) -> Result<f64> {
    if indicator.contains(&0) {
        return Ok(0.0);
    }
    let inter = logits
        .iter()
        .zip(gt.iter())
        .filter(|(&l, &g)| l > BINARIZE_THRESHOLD as f64 && g)
        .count() as f64;
    let union = logits
        .iter()
        .zip(gt.iter())
        .filter(|(&l, &g)| l > BINARIZE_THRESHOLD as f64 || g)
        .count() as f64;
    let iou = if union > 0.0 { inter / union } else { 1.0 };
    Ok((u - iou).powi(2))
}

/// Batched inputs for one optimization step.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub images: Tensor,
    pub prompts: Vec<Prompt>,
    pub gt: Tensor,
    pub indicator: Tensor,
    pub iou_weight: Tensor,
}

/// Stacks samples into tensors in the model dtype, simulating one prompt per
/// sample from `rng`. A single-branch model is supervised on the middle
/// slice only.
pub fn prepare_batch<R: Rng + ?Sized>(model: &SlideSam, samples: &[&TrainingSample], rng: &mut R) -> Result<PreparedBatch> {
    let size = model.image_size();
    let branches = model.config().branches;
    let device = model.device().clone();
    let dtype = model.dtype();
    let mut prompts = Vec::with_capacity(samples.len());
    let mut gt = Vec::new();
    let mut ind = Vec::new();
    let mut iw = Vec::new();
    for s in samples {
        if (s.height(), s.width()) != (size, size) {
            return Err(Error::InvalidInput(format!(
                "sample is {}x{}, model expects {size}x{size}",
                s.height(),
                s.width()
            )));
        }
        prompts.push(simulate_prompt(s.gt.index_axis(NdAxis(0), 1), rng)?);
        let slices: Vec<usize> = if branches == 1 { vec![1] } else { vec![0, 1, 2] };
        for &i in &slices {
            gt.extend(s.gt.index_axis(NdAxis(0), i).iter().map(|&v| v as u8 as f32));
            ind.push(s.indicator[i] as f32);
        }
        iw.push(if s.is_volumetric() { 1f32 } else { 0.0 });
    }
    let b = samples.len();
    let images = model.images_tensor(&samples.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
    Ok(PreparedBatch {
        images,
        prompts,
        gt: Tensor::from_vec(gt, (b, branches, size, size), &device)?.to_dtype(dtype)?,
        indicator: Tensor::from_vec(ind, (b, branches), &device)?.to_dtype(dtype)?,
        iou_weight: Tensor::from_vec(iw, b, &device)?.to_dtype(dtype)?,
    })
}

/// Result of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub selected: Vec<usize>,
}

/// Forward pass, per-sample hypothesis selection, backward pass through the
/// selected hypothesis only, and one optimizer update.
pub fn train_step(
    model: &SlideSam,
    optimizer: &mut AdamW,
    batch: &PreparedBatch,
    weights: &LossWeights,
) -> Result<StepStats> {
    let out = model.forward_batch(&batch.images, &batch.prompts, true)?;
    let loss = hybrid_loss(&out.logits, &out.iou, &batch.gt, &batch.indicator, &batch.iou_weight, weights)?;
    let value = loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::TrainingFault(format!(
            "non-finite loss {value}; seg {:?}, iou {:?}",
            loss.seg, loss.iou
        )));
    }
    optimizer.backward_step(&loss.total)?;
    Ok(StepStats {
        loss: value,
        selected: loss.selected,
    })
}

/// Training-loop settings; also the on-disk training config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    /// Emit a metrics record every `log_every` steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 4,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Line-delimited metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean loss over the steps since the previous record.
    pub loss: f64,
    /// How often each hypothesis was selected since the previous record.
    pub head_histogram: [usize; NUM_HYPOTHESES],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub records: Vec<MetricsRecord>,
}

/// Runs `config.steps` optimization steps, drawing batches uniformly at
/// random from `samples` (3D-labelled and pseudo-labelled records mixed).
pub fn train(
    model: &SlideSam,
    samples: &[TrainingSample],
    config: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let size = model.image_size();
    let samples = samples.iter().map(|s| s.resized(size)).collect::<Result<Vec<_>>>()?;
    let mut optimizer = config.optimizer.build(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    let mut hist = [0usize; NUM_HYPOTHESES];
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    for step in 1..=config.steps {
        let batch: Vec<&TrainingSample> = (0..config.batch_size)
            .map(|_| &samples[rng.gen_range(0..samples.len())])
            .collect();
        let mut prompt_rng = ChaCha8Rng::seed_from_u64(
            batch
                .iter()
                .fold(rng.gen::<u64>(), |acc, s| acc.rotate_left(7) ^ s.prompt_seed),
        );
        let prepared = prepare_batch(model, &batch, &mut prompt_rng)?;
        let stats = train_step(model, &mut optimizer, &prepared, &config.loss)?;
        report.losses.push(stats.loss);
        for k in stats.selected {
            hist[k] += 1;
        }
        window_loss += stats.loss;
        window_steps += 1;
        if step % config.log_every == 0 || step == config.steps {
            let record = MetricsRecord {
                step,
                loss: window_loss / window_steps as f64,
                head_histogram: hist,
            };
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
            }
            on_record(&record);
            report.records.push(record);
            hist = [0; NUM_HYPOTHESES];
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    Ok(report)
}
