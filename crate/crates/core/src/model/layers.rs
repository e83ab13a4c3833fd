use candle_core::{DType, Device, Tensor, D};

use super::params::{Init, ParamBuilder, ParamGroup};
use crate::error::{Error, Result};
use crate::imgops;

/// Low-rank update `scale * B (A x)` attached to a frozen projection.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `rank x d_in`
    pub a: Tensor,
    /// `d_out x rank`
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let (rank, _) = a.dims2()?;
        let (_, rb) = b.dims2()?;
        if rank == 0 || rb != rank {
            return Err(Error::Config(format!(
                "adapter factors {:?} and {:?} do not share a positive rank",
                a.dims(),
                b.dims()
            )));
        }
        Ok(LoraAdapter {
            a,
            b,
            scale: alpha / rank as f64,
        })
    }
}

/// `y = W x + scale * B (A x)` for row-major batches `x: n x d_in`.
pub fn lora_forward(base_weight: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = base_weight.dims2()?;
    let (rank, a_in) = adapter.a.dims2()?;
    let (b_out, b_rank) = adapter.b.dims2()?;
    let x_in = x.dim(D::Minus1)?;
    if a_in != d_in || b_out != d_out || b_rank != rank || x_in != d_in {
        return Err(Error::Config(format!(
            "shape mismatch: W {:?}, A {:?}, B {:?}, x {:?}",
            base_weight.dims(),
            adapter.a.dims(),
            adapter.b.dims(),
            x.dims()
        )));
    }
    let base = x.matmul(&base_weight.t()?)?;
    let low = x.matmul(&adapter.a.t()?)?.matmul(&adapter.b.t()?)?;
    Ok((base + (low * adapter.scale)?)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    /// Frozen-backbone style projection: N(0, 0.02) weights, zero bias.
    pub(crate) fn vit(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, group: ParamGroup, trainable: bool) -> Result<Self> {
        let weight = b.param(&format!("{name}.weight"), &[d_out, d_in], Init::Normal(0.02), group, trainable)?;
        let bias = b.param(&format!("{name}.bias"), &[d_out], Init::Zeros, group, trainable)?;
        Ok(Linear { weight, bias: Some(bias), lora: None })
    }

    /// Uniform `+-1/sqrt(d_in)` initialization for weights and bias.
    pub(crate) fn uniform(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, group: ParamGroup) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = b.param(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform(bound), group, true)?;
        let bias = b.param(&format!("{name}.bias"), &[d_out], Init::Uniform(bound), group, true)?;
        Ok(Linear { weight, bias: Some(bias), lora: None })
    }

    pub(crate) fn attach_lora(&mut self, b: &mut ParamBuilder, name: &str, rank: usize, alpha: f64) -> Result<()> {
        let (d_out, d_in) = self.weight.dims2()?;
        let a = b.param(
            &format!("{name}.lora_a"),
            &[rank, d_in],
            Init::Uniform(1.0 / (d_in as f64).sqrt()),
            ParamGroup::Adapter,
            true,
        )?;
        let bb = b.param(&format!("{name}.lora_b"), &[d_out, rank], Init::Zeros, ParamGroup::Adapter, true)?;
        self.lora = Some(LoraAdapter::new(a, bb, alpha)?);
        Ok(())
    }

    /// Applies the projection over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor, use_adapter: bool) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, d_in))?;
        let mut y = match (&self.lora, use_adapter) {
            (Some(adapter), true) => lora_forward(&self.weight, adapter, &flat)?,
            _ => flat.matmul(&self.weight.t()?)?,
        };
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(bias)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(b: &mut ParamBuilder, name: &str, dim: usize, eps: f64, group: ParamGroup, trainable: bool) -> Result<Self> {
        let weight = b.param(&format!("{name}.weight"), &[dim], Init::Ones, group, trainable)?;
        let bias = b.param(&format!("{name}.bias"), &[dim], Init::Zeros, group, trainable)?;
        Ok(LayerNorm { weight, bias, eps })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    /// Normalizes over the channel dimension of a `(B, C, H, W)` map.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.gelu_erf()?,
            Activation::Relu => x.relu()?,
        })
    }
}

/// Stack of linear layers with an activation between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub(crate) fn uniform(b: &mut ParamBuilder, name: &str, dims: &[usize], act: Activation, group: ParamGroup) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::uniform(b, &format!("{name}.{i}"), w[0], w[1], group))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, act })
    }

    pub(crate) fn from_layers(layers: Vec<Linear>, act: Activation) -> Self {
        Mlp { layers, act }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, false)?;
            if i < last {
                h = self.act.apply(&h)?;
            }
        }
        Ok(h)
    }
}

/// Softmax over the last dimension built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Multi-head scaled dot-product attention on `(B, N, D)` inputs.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, nq, d) = q.dims3()?;
    let nk = k.dim(1)?;
    let dh = d / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> {
        Ok(t.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (qh, kh, vh) = (split(q, nq)?, split(k, nk)?, split(v, nk)?);
    let scores = (qh.matmul(&kh.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&vh)?;
    Ok(out.transpose(1, 2)?.reshape((b, nq, d))?)
}

/// 2D convolution weight + bias applied with candle's conv kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub(crate) fn new(
        b: &mut ParamBuilder,
        name: &str,
        (c_in, c_out, k): (usize, usize, usize),
        stride: usize,
        padding: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = b.param(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::Uniform(bound), group, true)?;
        let bias = b.param(&format!("{name}.bias"), &[c_out], Init::Uniform(bound), group, true)?;
        Ok(Conv2d { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Transposed 2x2 convolution with stride 2 (doubles spatial size).
#[derive(Debug, Clone)]
pub struct UpConv2x {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv2x {
    pub(crate) fn new(b: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, group: ParamGroup) -> Result<Self> {
        let bound = 1.0 / ((c_out * 4) as f64).sqrt();
        let weight = b.param(&format!("{name}.weight"), &[c_in, c_out, 2, 2], Init::Uniform(bound), group, true)?;
        let bias = b.param(&format!("{name}.bias"), &[c_out], Init::Uniform(bound), group, true)?;
        Ok(UpConv2x { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// `out x in` half-pixel linear interpolation matrix.
pub fn interpolation_matrix(src: usize, dst: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; dst * src];
    for d in 0..dst {
        let (lo, hi, f) = imgops::linear_axis_taps(d, src, dst);
        m[d * src + lo] += 1.0 - f;
        m[d * src + hi] += f;
    }
    Ok(Tensor::from_vec(m, (dst, src), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of a `(B, C, h, w)` map to `(B, C, H, W)` via two
/// interpolation matmuls; the identity size is returned untouched.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ry = interpolation_matrix(h, out_h, x.device(), x.dtype())?;
    let rx = interpolation_matrix(w, out_w, x.device(), x.dtype())?;
    let flat = x.reshape((b * c, h, w))?;
    let rows = ry.broadcast_matmul(&flat)?;
    let out = rows.broadcast_matmul(&rx.t()?)?;
    Ok(out.reshape((b, c, out_h, out_w))?)
}
