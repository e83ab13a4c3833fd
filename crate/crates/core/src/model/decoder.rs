//! Two-way transformer mask decoder with one upscaling branch per slice.
//!
//! Output tokens (one IoU token and one token per hypothesis) attend to the
//! prompt tokens and the image embedding. Each slice branch upsamples the
//! attended image features to full resolution and mixes in the
//! high-resolution stem features; mask logits are the dot product of a
//! branch feature map with the hypernetwork output of a mask token.

use candle_core::Tensor;

use super::layers::{multi_head_attention, resize_bilinear, Activation, Conv2d, LayerNorm, Linear, Mlp, UpConv2x};
use super::params::{Init, ParamBuilder, ParamGroup};
use crate::error::Result;

/// Number of mask hypotheses per window.
pub const NUM_HYPOTHESES: usize = 3;

const G: ParamGroup = ParamGroup::Decoder;

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(b: &mut ParamBuilder, name: &str, dim: usize, inner: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::uniform(b, &format!("{name}.q"), dim, inner, G)?,
            k: Linear::uniform(b, &format!("{name}.k"), dim, inner, G)?,
            v: Linear::uniform(b, &format!("{name}.v"), dim, inner, G)?,
            out: Linear::uniform(b, &format!("{name}.out"), inner, dim, G)?,
            heads,
        })
    }

    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(q, false)?;
        let k = self.k.forward(k, false)?;
        let v = self.v.forward(v, false)?;
        let o = multi_head_attention(&q, &k, &v, self.heads)?;
        self.out.forward(&o, false)
    }
}

#[derive(Debug, Clone)]
struct TwoWayLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayLayer {
    fn new(b: &mut ParamBuilder, name: &str, c: usize, heads: usize, skip_first_pe: bool) -> Result<Self> {
        let inner = c / 2;
        Ok(TwoWayLayer {
            self_attn: Attention::new(b, &format!("{name}.self_attn"), c, c, heads)?,
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), c, 1e-5, G, true)?,
            token_to_image: Attention::new(b, &format!("{name}.token_to_image"), c, inner, heads)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), c, 1e-5, G, true)?,
            mlp: Mlp::uniform(b, &format!("{name}.mlp"), &[c, 2 * c, c], Activation::Relu, G)?,
            norm3: LayerNorm::new(b, &format!("{name}.norm3"), c, 1e-5, G, true)?,
            image_to_token: Attention::new(b, &format!("{name}.image_to_token"), c, inner, heads)?,
            norm4: LayerNorm::new(b, &format!("{name}.norm4"), c, 1e-5, G, true)?,
            skip_first_pe,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let queries = (&queries + self.token_to_image.forward(&q, &k, keys)?)?;
        let queries = self.norm2.forward(&queries)?;

        let queries = (&queries + self.mlp.forward(&queries)?)?;
        let queries = self.norm3.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let keys = (keys + self.image_to_token.forward(&k, &q, &queries)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

/// Upscaling path for one slice: two transposed convolutions to a quarter of
/// the input resolution, bilinear resize to full size, then a fused
/// projection of the high-resolution stem features.
#[derive(Debug, Clone)]
struct SliceBranch {
    up1: UpConv2x,
    norm: LayerNorm,
    up2: UpConv2x,
    high_res: Conv2d,
}

impl SliceBranch {
    fn new(b: &mut ParamBuilder, name: &str, c: usize, high_res_dim: usize) -> Result<Self> {
        let c4 = c / 4;
        let c8 = c / 8;
        Ok(SliceBranch {
            up1: UpConv2x::new(b, &format!("{name}.up1"), c, c4, G)?,
            norm: LayerNorm::new(b, &format!("{name}.norm"), c4, 1e-6, G, true)?,
            up2: UpConv2x::new(b, &format!("{name}.up2"), c4, c8, G)?,
            high_res: Conv2d::new(b, &format!("{name}.high_res"), (high_res_dim, c8, 1), 1, 0, G)?,
        })
    }

    fn forward(&self, src: &Tensor, high_res: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = high_res.dims4()?;
        let x = self.up1.forward(src)?;
        let x = self.norm.forward_channels(&x)?.gelu_erf()?;
        let x = self.up2.forward(&x)?.gelu_erf()?;
        let x = resize_bilinear(&x, h, w)?;
        Ok((x + self.high_res.forward(high_res)?)?.gelu_erf()?)
    }
}

/// Decoder outputs as tensors: logits `(B, S, J, H, W)` and IoU `(B, J)`.
#[derive(Debug, Clone)]
pub struct DecoderTensors {
    pub logits: Tensor,
    pub iou: Tensor,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    iou_token: Tensor,
    mask_tokens: Tensor,
    layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    final_norm: LayerNorm,
    branches: Vec<SliceBranch>,
    hypernets: Vec<Mlp>,
    iou_head: Mlp,
}

impl MaskDecoder {
    pub(crate) fn new(
        b: &mut ParamBuilder,
        c: usize,
        depth: usize,
        heads: usize,
        high_res_dim: usize,
        branches: usize,
    ) -> Result<Self> {
        let iou_token = b.param("decoder.iou_token", &[1, c], Init::Normal(1.0), G, true)?;
        let mask_tokens = b.param("decoder.mask_tokens", &[NUM_HYPOTHESES, c], Init::Normal(1.0), G, true)?;
        let layers = (0..depth)
            .map(|i| TwoWayLayer::new(b, &format!("decoder.layers.{i}"), c, heads, i == 0))
            .collect::<Result<Vec<_>>>()?;
        let final_attn = Attention::new(b, "decoder.final_attn", c, c / 2, heads)?;
        let final_norm = LayerNorm::new(b, "decoder.final_norm", c, 1e-5, G, true)?;
        let branches = (0..branches)
            .map(|i| SliceBranch::new(b, &format!("decoder.branches.{i}"), c, high_res_dim))
            .collect::<Result<Vec<_>>>()?;
        let hypernets = (0..NUM_HYPOTHESES)
            .map(|j| Mlp::uniform(b, &format!("decoder.hypernets.{j}"), &[c, c, c, c / 8], Activation::Relu, G))
            .collect::<Result<Vec<_>>>()?;
        let iou_head = Mlp::uniform(b, "decoder.iou_head", &[c, c, c, NUM_HYPOTHESES], Activation::Relu, G)?;
        Ok(MaskDecoder {
            iou_token,
            mask_tokens,
            layers,
            final_attn,
            final_norm,
            branches,
            hypernets,
            iou_head,
        })
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// `features` and `dense` are `(B, c, h, w)`, `image_pe` is `(h*w, c)`,
    /// `sparse` is `(B, N, c)` and `high_res` is `(B, c_hr, H, W)`.
    pub fn forward(
        &self,
        features: &Tensor,
        dense: &Tensor,
        image_pe: &Tensor,
        sparse: &Tensor,
        high_res: &Tensor,
    ) -> Result<DecoderTensors> {
        let (bsz, c, h, w) = features.dims4()?;
        let (_, _, out_h, out_w) = high_res.dims4()?;
        let output_tokens = Tensor::cat(&[&self.iou_token, &self.mask_tokens], 0)?
            .unsqueeze(0)?
            .broadcast_as((bsz, 1 + NUM_HYPOTHESES, c))?;
        let tokens = Tensor::cat(&[&output_tokens, sparse], 1)?.contiguous()?;

        let src = (features + dense)?;
        let mut keys = src.reshape((bsz, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let key_pe = image_pe.unsqueeze(0)?;
        let mut queries = tokens.clone();
        for layer in &self.layers {
            let (q, k) = layer.forward(&queries, &keys, &tokens, &key_pe)?;
            queries = q;
            keys = k;
        }
        let q = (&queries + &tokens)?;
        let k = keys.broadcast_add(&key_pe)?;
        let queries = (&queries + self.final_attn.forward(&q, &k, &keys)?)?;
        let queries = self.final_norm.forward(&queries)?;

        let iou_out = queries.narrow(1, 0, 1)?.squeeze(1)?;
        let hyper = (0..NUM_HYPOTHESES)
            .map(|j| {
                let token = queries.narrow(1, 1 + j, 1)?.squeeze(1)?;
                self.hypernets[j].forward(&token)
            })
            .collect::<Result<Vec<_>>>()?;
        let hyper = Tensor::stack(&hyper, 1)?; // (B, J, c/8)

        let src = keys.transpose(1, 2)?.reshape((bsz, c, h, w))?;
        let mut slices = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let f = branch.forward(&src, high_res)?;
            let c8 = f.dim(1)?;
            let f = f.reshape((bsz, c8, out_h * out_w))?;
            let m = hyper.matmul(&f)?.reshape((bsz, NUM_HYPOTHESES, out_h, out_w))?;
            slices.push(m);
        }
        let logits = Tensor::stack(&slices, 1)?;
        let iou = candle_nn::ops::sigmoid(&self.iou_head.forward(&iou_out)?)?;
        Ok(DecoderTensors { logits, iou })
    }
}
