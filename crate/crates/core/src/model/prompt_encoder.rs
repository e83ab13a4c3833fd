//! Sparse (point/box) and dense (3-slice mask) prompt encoding.
//!
//! Points and box corners become random-Fourier positional encodings of
//! their coordinates normalized to `[0, 1]`, summed with a learned embedding
//! per prompt type. A lone set of points is padded with one "not a point"
//! token, so a single click and a box both yield two sparse tokens.

use candle_core::{Tensor, D};

use super::layers::{Conv2d, LayerNorm};
use super::params::{Init, ParamBuilder, ParamGroup};
use super::EncoderConfig;
use crate::error::Result;
use crate::prompt::{BBox, PointPrompt};

const NEG_POINT: usize = 0;
const POS_POINT: usize = 1;
const BOX_TOP_LEFT: usize = 2;
const BOX_BOTTOM_RIGHT: usize = 3;

/// Sparse tokens `(N, c)` and dense embedding `(c, h, w)` for one prompt.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub sparse: Tensor,
    pub dense: Tensor,
}

impl PromptEmbedding {
    pub fn token_count(&self) -> usize {
        self.sparse.dim(0).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    gaussian: Tensor,
    point_embeddings: Tensor,
    not_a_point: Tensor,
    mask_down: Conv2d,
    mask_norm: LayerNorm,
    mask_proj: Conv2d,
    embed_dim: usize,
    image_size: usize,
    grid: usize,
}

impl PromptEncoder {
    pub(crate) fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let g = ParamGroup::PromptEncoder;
        let gaussian = b.param("prompt_encoder.pe_gaussian", &[2, c / 2], Init::Normal(1.0), g, false)?;
        let point_embeddings = b.param("prompt_encoder.point_embeddings", &[4, c], Init::Normal(1.0), g, true)?;
        let not_a_point = b.param("prompt_encoder.not_a_point", &[1, c], Init::Normal(1.0), g, true)?;
        let hidden = (c / 4).max(1);
        let mask_down = Conv2d::new(b, "prompt_encoder.mask_down", (3, hidden, cfg.patch_size), cfg.patch_size, 0, g)?;
        let mask_norm = LayerNorm::new(b, "prompt_encoder.mask_norm", hidden, 1e-6, g, true)?;
        let mask_proj = Conv2d::new(b, "prompt_encoder.mask_proj", (hidden, c, 1), 1, 0, g)?;
        Ok(PromptEncoder {
            gaussian,
            point_embeddings,
            not_a_point,
            mask_down,
            mask_norm,
            mask_proj,
            embed_dim: c,
            image_size: cfg.image_size,
            grid: cfg.grid(),
        })
    }

    /// Positional encoding of `(n, 2)` coordinates already in `[0, 1]`.
    fn encode_coords(&self, coords: &Tensor) -> Result<Tensor> {
        let centered = coords.affine(2.0, -1.0)?;
        let proj = (centered.matmul(&self.gaussian)? * (2.0 * std::f64::consts::PI))?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], D::Minus1)?)
    }

    /// Dense positional encoding `(h * w, c)` of the embedding grid cells.
    pub fn dense_pe(&self) -> Result<Tensor> {
        let g = self.grid;
        let mut coords = Vec::with_capacity(g * g * 2);
        for y in 0..g {
            for x in 0..g {
                coords.push((x as f64 + 0.5) / g as f64);
                coords.push((y as f64 + 0.5) / g as f64);
            }
        }
        let t = Tensor::from_vec(coords, (g * g, 2), self.gaussian.device())?.to_dtype(self.gaussian.dtype())?;
        self.encode_coords(&t)
    }

    fn type_embedding(&self, kind: usize) -> Result<Tensor> {
        Ok(self.point_embeddings.narrow(0, kind, 1)?)
    }

    /// Encodes points, an optional box and an optional `(3, H, W)` mask prompt.
    pub fn encode(&self, points: &[PointPrompt], bbox: Option<&BBox>, mask: Option<&Tensor>) -> Result<PromptEmbedding> {
        let device = self.gaussian.device();
        let dtype = self.gaussian.dtype();
        let size = self.image_size as f64;
        let mut tokens: Vec<Tensor> = Vec::new();
        if !points.is_empty() {
            let coords: Vec<f64> = points
                .iter()
                .flat_map(|p| [(p.x as f64 + 0.5) / size, (p.y as f64 + 0.5) / size])
                .collect();
            let coords = Tensor::from_vec(coords, (points.len(), 2), device)?.to_dtype(dtype)?;
            let pe = self.encode_coords(&coords)?;
            for (i, p) in points.iter().enumerate() {
                let kind = if p.foreground { POS_POINT } else { NEG_POINT };
                tokens.push((pe.narrow(0, i, 1)? + self.type_embedding(kind)?)?);
            }
            if bbox.is_none() {
                tokens.push(self.not_a_point.clone());
            }
        }
        if let Some(b) = bbox {
            let coords = vec![
                b.x0 as f64 / size,
                b.y0 as f64 / size,
                (b.x1 + 1) as f64 / size,
                (b.y1 + 1) as f64 / size,
            ];
            let coords = Tensor::from_vec(coords, (2, 2), device)?.to_dtype(dtype)?;
            let pe = self.encode_coords(&coords)?;
            tokens.push((pe.narrow(0, 0, 1)? + self.type_embedding(BOX_TOP_LEFT)?)?);
            tokens.push((pe.narrow(0, 1, 1)? + self.type_embedding(BOX_BOTTOM_RIGHT)?)?);
        }
        let sparse = if tokens.is_empty() {
            Tensor::zeros((0, self.embed_dim), dtype, device)?
        } else {
            Tensor::cat(&tokens, 0)?
        };
        let dense = match mask {
            Some(m) => {
                let x = m.unsqueeze(0)?;
                let h = self.mask_down.forward(&x)?;
                let h = self.mask_norm.forward_channels(&h)?.gelu_erf()?;
                self.mask_proj.forward(&h)?.squeeze(0)?
            }
            None => Tensor::zeros((self.embed_dim, self.grid, self.grid), dtype, device)?,
        };
        Ok(PromptEmbedding { sparse, dense })
    }

    /// Padding token appended when batching prompts of unequal length.
    pub fn padding_token(&self) -> &Tensor {
        &self.not_a_point
    }
}
