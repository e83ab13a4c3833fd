//! Patch-embedding transformer encoder. The transformer blocks and neck are
//! frozen; the patch embedding, positional embedding, high-resolution stem and
//! the low-rank adapters on the query/value projections train.

use candle_core::Tensor;

use super::layers::{multi_head_attention, Activation, Conv2d, LayerNorm, Linear, Mlp};
use super::params::{Init, ParamBuilder, ParamGroup};
use super::EncoderConfig;
use crate::error::Result;

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl Block {
    fn new(b: &mut ParamBuilder, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let g = ParamGroup::Backbone;
        let mut q = Linear::vit(b, &format!("{name}.attn.q"), c, c, g, false)?;
        let k = Linear::vit(b, &format!("{name}.attn.k"), c, c, g, false)?;
        let mut v = Linear::vit(b, &format!("{name}.attn.v"), c, c, g, false)?;
        let proj = Linear::vit(b, &format!("{name}.attn.proj"), c, c, g, false)?;
        q.attach_lora(b, &format!("{name}.attn.q"), cfg.lora_rank, cfg.lora_alpha)?;
        v.attach_lora(b, &format!("{name}.attn.v"), cfg.lora_rank, cfg.lora_alpha)?;
        let mlp = Mlp::from_layers(
            vec![
                Linear::vit(b, &format!("{name}.mlp.0"), c, 4 * c, g, false)?,
                Linear::vit(b, &format!("{name}.mlp.1"), 4 * c, c, g, false)?,
            ],
            Activation::Gelu,
        );
        Ok(Block {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), c, 1e-6, g, false)?,
            q,
            k,
            v,
            proj,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), c, 1e-6, g, false)?,
            mlp,
            heads: cfg.heads,
        })
    }

    fn forward(&self, x: &Tensor, adapters: bool) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let q = self.q.forward(&h, adapters)?;
        let k = self.k.forward(&h, adapters)?;
        let v = self.v.forward(&h, adapters)?;
        let attn = multi_head_attention(&q, &k, &v, self.heads)?;
        let x = (x + self.proj.forward(&attn, adapters)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Encoder outputs for a batch: the `(B, c, h, w)` image embedding and the
/// `(B, c_hr, H, W)` full-resolution stem features used by the mask branches.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    pub features: Tensor,
    pub high_res: Tensor,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch_embed: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    neck: Linear,
    neck_norm: LayerNorm,
    high_res: Conv2d,
    grid: usize,
}

impl ImageEncoder {
    pub(crate) fn new(b: &mut ParamBuilder, cfg: &EncoderConfig, high_res_dim: usize) -> Result<Self> {
        let c = cfg.embed_dim;
        let p = cfg.patch_size;
        let grid = cfg.grid();
        let patch_embed = Conv2d::new(b, "encoder.patch_embed", (3, c, p), p, 0, ParamGroup::PatchEmbed)?;
        let pos_embed = b.param(
            "encoder.pos_embed",
            &[1, grid * grid, c],
            Init::Normal(0.02),
            ParamGroup::PatchEmbed,
            true,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(b, &format!("encoder.blocks.{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let neck = Linear::vit(b, "encoder.neck", c, c, ParamGroup::Backbone, false)?;
        let neck_norm = LayerNorm::new(b, "encoder.neck_norm", c, 1e-6, ParamGroup::Backbone, false)?;
        let high_res = Conv2d::new(b, "encoder.high_res", (3, high_res_dim, 3), 1, 1, ParamGroup::PatchEmbed)?;
        Ok(ImageEncoder {
            patch_embed,
            pos_embed,
            blocks,
            neck,
            neck_norm,
            high_res,
            grid,
        })
    }

    /// `images` are `(B, 3, H, W)` pixel values in `[0, 255]`.
    pub fn forward(&self, images: &Tensor, adapters: bool) -> Result<ImageEmbedding> {
        let x = ((images / 255.0)? - 0.5)?.affine(4.0, 0.0)?;
        let (bsz, _, _, _) = x.dims4()?;
        let patches = self.patch_embed.forward(&x)?;
        let c = patches.dim(1)?;
        let n = self.grid * self.grid;
        let mut tokens = patches
            .reshape((bsz, c, n))?
            .transpose(1, 2)?
            .broadcast_add(&self.pos_embed)?;
        for block in &self.blocks {
            tokens = block.forward(&tokens, adapters)?;
        }
        let tokens = self.neck_norm.forward(&self.neck.forward(&tokens, false)?)?;
        let features = tokens
            .transpose(1, 2)?
            .reshape((bsz, c, self.grid, self.grid))?;
        let high_res = self.high_res.forward(&x)?.gelu_erf()?;
        Ok(ImageEmbedding { features, high_res })
    }
}
