//! Shared building blocks: store-backed layer constructors, channel-wise
//! layer norm for NCHW maps, MLPs, multi-head attention, and bilinear
//! upsampling expressed as separable matmuls (so it stays differentiable).

use candle_core::{DType, Result, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, LayerNorm, Linear, Module};

use super::params::{Init, ParamStore};

pub fn linear(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
    init: Init,
) -> Result<Linear> {
    let w = store
        .var(&format!("{name}.weight"), &[out_dim, in_dim], init)
        .map_err(candle_core::Error::wrap)?;
    let b = if bias {
        Some(
            store
                .var(&format!("{name}.bias"), &[out_dim], Init::Zeros)
                .map_err(candle_core::Error::wrap)?,
        )
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

/// Plain projection matrix applied as `x @ w` (no transpose, no bias).
pub fn matrix(store: &mut ParamStore, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
    store
        .var(name, &[rows, cols], Init::UniformFan(rows))
        .map_err(candle_core::Error::wrap)
}

pub fn conv2d(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    cfg: Conv2dConfig,
) -> Result<Conv2d> {
    let fan_in = in_ch * kernel * kernel;
    let w = store
        .var(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::UniformFan(fan_in),
        )
        .map_err(candle_core::Error::wrap)?;
    let b = store
        .var(&format!("{name}.bias"), &[out_ch], Init::Zeros)
        .map_err(candle_core::Error::wrap)?;
    Ok(Conv2d::new(w, Some(b), cfg))
}

pub fn conv_transpose2d(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
) -> Result<ConvTranspose2d> {
    let w = store
        .var(
            &format!("{name}.weight"),
            &[in_ch, out_ch, kernel, kernel],
            Init::UniformFan(in_ch * kernel * kernel),
        )
        .map_err(candle_core::Error::wrap)?;
    let b = store
        .var(&format!("{name}.bias"), &[out_ch], Init::Zeros)
        .map_err(candle_core::Error::wrap)?;
    let cfg = ConvTranspose2dConfig {
        stride,
        ..Default::default()
    };
    Ok(ConvTranspose2d::new(w, Some(b), cfg))
}

pub fn layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
    let w = store
        .var(&format!("{name}.weight"), &[dim], Init::Const(1.0))
        .map_err(candle_core::Error::wrap)?;
    let b = store
        .var(&format!("{name}.bias"), &[dim], Init::Zeros)
        .map_err(candle_core::Error::wrap)?;
    Ok(LayerNorm::new(w, b, 1e-6))
}

/// Layer normalization over the channel dimension of an NCHW map.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let weight = store
            .var(&format!("{name}.weight"), &[channels], Init::Const(1.0))
            .map_err(candle_core::Error::wrap)?;
        let bias = store
            .var(&format!("{name}.bias"), &[channels], Init::Zeros)
            .map_err(candle_core::Error::wrap)?;
        Ok(Self {
            weight,
            bias,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let c = self.weight.dims1()?;
        normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Two-layer MLP with Gelu.
#[derive(Debug, Clone)]
pub struct MlpBlock {
    lin1: Linear,
    lin2: Linear,
}

impl MlpBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            lin1: linear(store, &format!("{name}.lin1"), dim, hidden, true, Init::UniformFan(dim))?,
            lin2: linear(store, &format!("{name}.lin2"), hidden, dim, true, Init::UniformFan(hidden))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&self.lin1.forward(x)?.gelu_erf()?)
    }
}

/// `layers`-deep MLP with Gelu between layers (the decoder's hypernetwork
/// and quality-head shape).
#[derive(Debug, Clone)]
pub struct DeepMlp {
    layers: Vec<Linear>,
}

impl DeepMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        layers: usize,
    ) -> Result<Self> {
        let mut built = Vec::new();
        for i in 0..layers {
            let (ci, co) = (
                if i == 0 { dim } else { hidden },
                if i + 1 == layers { out } else { hidden },
            );
            built.push(linear(
                store,
                &format!("{name}.l{i}"),
                ci,
                co,
                true,
                Init::UniformFan(ci),
            )?);
        }
        Ok(Self { layers: built })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 != self.layers.len() {
                x = x.gelu_erf()?;
            }
        }
        Ok(x)
    }
}

/// Multi-head attention with optional internal downsampling (the decoder's
/// cross-attention uses half-width internals).
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        downsample: usize,
    ) -> Result<Self> {
        let inner = dim / downsample;
        Ok(Self {
            q: linear(store, &format!("{name}.q"), dim, inner, true, Init::UniformFan(dim))?,
            k: linear(store, &format!("{name}.k"), dim, inner, true, Init::UniformFan(dim))?,
            v: linear(store, &format!("{name}.v"), dim, inner, true, Init::UniformFan(dim))?,
            out: linear(store, &format!("{name}.out"), inner, dim, true, Init::UniformFan(inner))?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        x.reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Standard scaled dot-product attention over (B, N, D) inputs.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let qh = self.split_heads(&self.q.forward(q)?)?;
        let kh = self.split_heads(&self.k.forward(k)?)?;
        let vh = self.split_heads(&self.v.forward(v)?)?;
        let head_dim = qh.dim(D::Minus1)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let attn = (qh.matmul(&kh.transpose(2, 3)?)? * scale)?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn.matmul(&vh)?;
        let (b, h, n, hd) = out.dims4()?;
        let merged = out.transpose(1, 2)?.reshape((b, n, h * hd))?;
        self.out.forward(&merged)
    }
}

/// Interpolation matrix mapping a length-`li` axis to length `lo`
/// (align_corners = false).
pub fn bilinear_matrix(li: usize, lo: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = vec![0f64; lo * li];
    let scale = li as f64 / lo as f64;
    for o in 0..lo {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (li - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(li - 1);
        let w1 = s - i0 as f64;
        data[o * li + i0] += 1.0 - w1;
        data[o * li + i1] += w1;
    }
    Tensor::from_vec(data, (lo, li), device)?.to_dtype(dtype)
}

/// Separable bilinear upsampling of an NCHW map using precomputed matrices
/// `mh` (H_out, H_in) and `mw` (W_out, W_in).
pub fn bilinear_upsample(x: &Tensor, mh: &Tensor, mw: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b * c, h, w))?;
    let up_h = mh.unsqueeze(0)?.broadcast_matmul(&flat)?;
    let up = up_h.broadcast_matmul(&mw.t()?.unsqueeze(0)?)?;
    let (ho, wo) = (mh.dim(0)?, mw.dim(0)?);
    up.reshape((b, c, ho, wo))
}
