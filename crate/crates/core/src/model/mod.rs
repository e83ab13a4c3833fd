//! Three-slice promptable segmentation network.

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod params;
pub mod prompt_encoder;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Array4, ArrayView2, Axis as NdAxis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{DecoderTensors, MaskDecoder, NUM_HYPOTHESES};
pub use encoder::{ImageEmbedding, ImageEncoder};
pub use layers::{lora_forward, LoraAdapter};
pub use params::{Param, ParamGroup, ParamStore};
pub use prompt_encoder::{PromptEmbedding, PromptEncoder};

use crate::error::{Error, Result};
use crate::imgops;
use crate::prompt::Prompt;
use crate::volume::SliceWindow;

pub const CHECKPOINT_FORMAT: &str = "slideseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 128,
            patch_size: 8,
            embed_dim: 96,
            depth: 4,
            heads: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

impl EncoderConfig {
    /// Side of the embedding grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.lora_rank < 1 {
            return bad("lora_rank must be at least 1".into());
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return bad("lora_alpha must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if !self.embed_dim.is_multiple_of(8) {
            return bad(format!("embed_dim {} must be a multiple of 8", self.embed_dim));
        }
        if self.depth == 0 {
            return bad("encoder depth must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    /// Channels of the full-resolution stem feeding the mask branches.
    pub high_res_dim: usize,
    /// Number of slice branches: 3 for the full model, 1 for a
    /// single-slice reference.
    pub branches: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder_depth: 2,
            decoder_heads: 4,
            high_res_dim: 16,
            branches: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let c = self.encoder.embed_dim;
        if self.decoder_heads == 0 || !(c / 2).is_multiple_of(self.decoder_heads) {
            return Err(Error::Config(format!(
                "embed_dim/2 = {} not divisible by decoder_heads {}",
                c / 2,
                self.decoder_heads
            )));
        }
        if self.branches != 1 && self.branches != 3 {
            return Err(Error::Config(format!("branches must be 1 or 3, got {}", self.branches)));
        }
        if self.high_res_dim == 0 {
            return Err(Error::Config("high_res_dim must be positive".into()));
        }
        Ok(())
    }

    /// The same architecture with a single slice branch.
    pub fn reference(&self) -> ModelConfig {
        ModelConfig {
            branches: 1,
            ..self.clone()
        }
    }
}

/// Per-window decoder output: logits `[slice, hypothesis, row, col]` and one
/// predicted IoU per hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutputs {
    pub logits: Array4<f32>,
    pub iou: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SlideSam {
    config: ModelConfig,
    params: ParamStore,
    encoder: ImageEncoder,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
    device: Device,
    dtype: DType,
}

impl SlideSam {
    /// Freshly initialized model (f32).
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(config, seed, None, false, dtype)
    }

    /// Builds a model whose parameters are taken from `tensors`; every
    /// parameter must be present with the configured shape.
    pub fn from_tensors(config: &ModelConfig, tensors: &HashMap<String, Tensor>, dtype: DType) -> Result<Self> {
        Self::build(config, 0, Some(tensors), true, dtype)
    }

    fn build(
        config: &ModelConfig,
        seed: u64,
        source: Option<&HashMap<String, Tensor>>,
        strict: bool,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let device = Device::Cpu;
        let mut b = params::ParamBuilder::new(&mut rng, source, strict, device.clone(), dtype);
        let encoder = ImageEncoder::new(&mut b, &config.encoder, config.high_res_dim)?;
        let prompt_encoder = PromptEncoder::new(&mut b, &config.encoder)?;
        let decoder = MaskDecoder::new(
            &mut b,
            config.encoder.embed_dim,
            config.decoder_depth,
            config.decoder_heads,
            config.high_res_dim,
            config.branches,
        )?;
        Ok(SlideSam {
            config: config.clone(),
            params: b.store,
            encoder,
            prompt_encoder,
            decoder,
            device,
            dtype,
        })
    }

    /// Builds a three-branch model from a single-branch reference: the one
    /// slice branch is copied into every branch and everything else is
    /// loaded verbatim. Adapters absent from the reference start as no-ops.
    pub fn init_from_reference(config: &ModelConfig, reference: &HashMap<String, Tensor>, seed: u64) -> Result<Self> {
        const BRANCH0: &str = "decoder.branches.0.";
        if reference.keys().any(|k| k.starts_with("decoder.branches.") && !k.starts_with(BRANCH0)) {
            return Err(Error::IncompatibleWeights("reference has more than one slice branch".into()));
        }
        let mut source = HashMap::new();
        for (name, t) in reference {
            match name.strip_prefix(BRANCH0) {
                Some(rest) => {
                    for i in 0..config.branches {
                        source.insert(format!("decoder.branches.{i}.{rest}"), t.clone());
                    }
                }
                None => {
                    source.insert(name.clone(), t.clone());
                }
            }
        }
        let dtype = reference.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let model = Self::build(config, seed, Some(&source), false, dtype)?;
        let missing: Vec<&String> = model
            .params
            .iter()
            .filter(|(n, p)| p.group != ParamGroup::Adapter && !source.contains_key(*n))
            .map(|(n, _)| n)
            .collect();
        if let Some(name) = missing.first() {
            return Err(Error::IncompatibleWeights(format!("reference lacks parameter {name}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn image_size(&self) -> usize {
        self.config.encoder.image_size
    }

    /// Branch whose output corresponds to the middle slice.
    pub fn central_branch(&self) -> usize {
        self.config.branches / 2
    }

    fn window_tensor(&self, pixels: &Array3<f32>) -> Result<Tensor> {
        let (s, h, w) = pixels.dim();
        let data: Vec<f32> = pixels.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, s, h, w), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Stacks `(3, H, W)` windows into a `(B, 3, H, W)` tensor.
    pub fn images_tensor(&self, windows: &[&Array3<f32>]) -> Result<Tensor> {
        let parts = windows
            .iter()
            .map(|p| self.window_tensor(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn encode_image(&self, window: &SliceWindow) -> Result<ImageEmbedding> {
        let size = self.image_size();
        if window.pixels.dim() != (3, size, size) {
            return Err(Error::InvalidInput(format!(
                "window has shape {:?}, model expects (3, {size}, {size})",
                window.pixels.dim()
            )));
        }
        self.encoder.forward(&self.window_tensor(&window.pixels)?, true)
    }

    pub fn encode_prompt(&self, prompt: &Prompt) -> Result<PromptEmbedding> {
        let size = self.image_size();
        prompt.validate(size, size)?;
        match prompt {
            Prompt::Points(points) => self.prompt_encoder.encode(points, None, None),
            Prompt::Box(b) => self.prompt_encoder.encode(&[], Some(b), None),
            Prompt::Mask(m) => {
                let t = self.window_tensor(m)?.squeeze(0)?;
                self.prompt_encoder.encode(&[], None, Some(&t))
            }
        }
    }

    /// Encodes a batch of prompts, padding sparse tokens to equal length.
    pub fn encode_prompts(&self, prompts: &[Prompt]) -> Result<(Tensor, Tensor)> {
        let embeds = prompts
            .iter()
            .map(|p| self.encode_prompt(p))
            .collect::<Result<Vec<_>>>()?;
        let n = embeds.iter().map(|e| e.token_count()).max().unwrap_or(0);
        let pad = self.prompt_encoder.padding_token();
        let mut sparse = Vec::with_capacity(embeds.len());
        let mut dense = Vec::with_capacity(embeds.len());
        for e in &embeds {
            let mut parts = vec![e.sparse.clone()];
            for _ in e.token_count()..n {
                parts.push(pad.clone());
            }
            sparse.push(Tensor::cat(&parts, 0)?);
            dense.push(e.dense.clone());
        }
        Ok((Tensor::stack(&sparse, 0)?, Tensor::stack(&dense, 0)?))
    }

    pub fn decode_masks(&self, embedding: &ImageEmbedding, sparse: &Tensor, dense: &Tensor) -> Result<DecoderTensors> {
        let pe = self.prompt_encoder.dense_pe()?;
        self.decoder
            .forward(&embedding.features, dense, &pe, sparse, &embedding.high_res)
    }

    /// Differentiable forward pass over a `(B, 3, H, W)` batch with one
    /// prompt per image. `adapters = false` evaluates the frozen base.
    pub fn forward_batch(&self, images: &Tensor, prompts: &[Prompt], adapters: bool) -> Result<DecoderTensors> {
        let (bsz, _, h, w) = images.dims4()?;
        let size = self.image_size();
        if (h, w) != (size, size) {
            return Err(Error::InvalidInput(format!("images are {h}x{w}, model expects {size}x{size}")));
        }
        if bsz != prompts.len() {
            return Err(Error::InvalidInput(format!("{bsz} images but {} prompts", prompts.len())));
        }
        let embedding = self.encoder.forward(images, adapters)?;
        let (sparse, dense) = self.encode_prompts(prompts)?;
        self.decode_masks(&embedding, &sparse, &dense)
    }

    /// Inference on one `(3, H, W)` window of any size; pixels and prompt
    /// are resampled to the model size and logits back to `H x W`.
    pub fn predict(&self, pixels: &Array3<f32>, prompt: &Prompt) -> Result<DecoderOutputs> {
        let (s, h, w) = pixels.dim();
        if s != 3 {
            return Err(Error::InvalidInput(format!("window has {s} slices, expected 3")));
        }
        prompt.validate(h, w)?;
        let size = self.image_size();
        let resized;
        let input = if (h, w) == (size, size) {
            pixels
        } else {
            let mut r = Array3::zeros((3, size, size));
            for i in 0..3 {
                r.index_axis_mut(NdAxis(0), i)
                    .assign(&imgops::resize_bilinear(pixels.index_axis(NdAxis(0), i), size, size));
            }
            resized = r;
            &resized
        };
        let prompt = prompt.rescaled((h, w), (size, size));
        let images = self.window_tensor(input)?;
        let out = self.forward_batch(&images, std::slice::from_ref(&prompt), true)?;
        let logits = tensor_to_array4(&out.logits.squeeze(0)?)?;
        let logits = if (h, w) == (size, size) {
            logits
        } else {
            let (ns, nj, _, _) = logits.dim();
            let mut r = Array4::zeros((ns, nj, h, w));
            for i in 0..ns {
                for j in 0..nj {
                    let src = logits.index_axis(NdAxis(0), i);
                    let src = src.index_axis(NdAxis(0), j);
                    r.index_axis_mut(NdAxis(0), i)
                        .index_axis_mut(NdAxis(0), j)
                        .assign(&imgops::resize_bilinear(src, h, w));
                }
            }
            r
        };
        let iou = out.iou.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Ok(DecoderOutputs { logits, iou })
    }

    pub fn predict_window(&self, window: &SliceWindow, prompt: &Prompt) -> Result<DecoderOutputs> {
        self.predict(&window.pixels, prompt)
    }

    /// Single-slice mode: the slice is repeated into all three channels and
    /// only the middle-slice output is kept.
    pub fn predict_slice(&self, slice: ArrayView2<f32>, prompt: &Prompt) -> Result<DecoderOutputs> {
        let (h, w) = slice.dim();
        let mut pixels = Array3::zeros((3, h, w));
        for i in 0..3 {
            pixels.index_axis_mut(NdAxis(0), i).assign(&slice);
        }
        let out = self.predict(&pixels, prompt)?;
        let c = self.central_branch();
        let logits = out.logits.slice(ndarray::s![c..c + 1, .., .., ..]).to_owned();
        Ok(DecoderOutputs { logits, iou: out.iou })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: BTreeMap<String, Tensor> = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, t)| Ok((n, t.contiguous()?)))
            .collect::<Result<_>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        safetensors::serialize_to_file(tensors.iter(), Some(meta), path)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(())
    }

    /// Reads the configuration header and parameter map of a checkpoint.
    pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, HashMap<String, Tensor>)> {
        let bytes = std::fs::read(path)?;
        let (_, metadata) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::CorruptData(format!("{}: {e}", path.display())))?;
        let meta = metadata
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::IncompatibleWeights("checkpoint has no header".into()))?;
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::IncompatibleWeights("not a slideseg checkpoint".into()));
        }
        let version: u32 = meta
            .get("version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::IncompatibleWeights("missing checkpoint version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleWeights(format!("unsupported checkpoint version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(
            meta.get("config")
                .ok_or_else(|| Error::IncompatibleWeights("missing config".into()))?,
        )?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        Ok((config, tensors))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, tensors) = Self::read_checkpoint(path)?;
        let dtype = tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        Self::from_tensors(&config, &tensors, dtype)
    }
}

/// Copies a 4D tensor into an `f32` ndarray.
pub fn tensor_to_array4(t: &Tensor) -> Result<Array4<f32>> {
    let dims = t.dims4()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array4::from_shape_vec(dims, data).map_err(|e| Error::InvalidInput(e.to_string()))
}
