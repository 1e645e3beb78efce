//! SAM-style ViT image encoder with a parallel adapter on every block's
//! feed-forward layer.
//!
//! The backbone (patch embedding, blocks, positional embedding) and the neck
//! live in the frozen `backbone` / `neck` parameter groups; adapters live in
//! the trainable `adapter` group and start at zero so the encoder's function
//! at step 0 equals the adapter-free encoder.

use candle_core::{Result, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, LayerNorm, Linear, Module};

use super::layers::{conv2d, layer_norm, linear, LayerNorm2d};
use super::params::{Init, ParamStore};
use crate::config::ModelConfig;

/// Patch-grid token features: (B, G·G, d).
#[derive(Debug, Clone)]
pub struct PatchGridFeatures {
    pub tokens: Tensor,
    pub grid_side: usize,
}

#[derive(Debug)]
struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let head_dim = d / self.heads;
        let qkv = self.qkv.forward(x)?; // (b, n, 3d)
        let qkv = qkv
            .reshape((b, n, 3, self.heads, head_dim))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let attn = (q.matmul(&k.transpose(2, 3)?)? * (1.0 / (head_dim as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn.matmul(&v)?; // (b, heads, n, hd)
        let merged = out.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&merged)
    }
}

/// Bottleneck adapter: down-project (ratio r), Gelu, up-project. The up
/// projection is zero-initialized.
#[derive(Debug)]
pub struct Adapter {
    down: Linear,
    up: Linear,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        let inner = dim / ratio;
        Ok(Self {
            down: linear(store, &format!("{name}.down"), dim, inner, true, Init::UniformFan(dim))?,
            up: linear(store, &format!("{name}.up"), inner, dim, true, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.up.forward(&self.down.forward(x)?.gelu_erf()?)
    }
}

#[derive(Debug)]
struct Block {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp_lin1: Linear,
    mlp_lin2: Linear,
}

#[derive(Debug)]
pub struct VitEncoder {
    patch_embed: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    adapters: Vec<Adapter>,
    neck_conv1: Conv2d,
    neck_ln1: LayerNorm2d,
    neck_conv2: Conv2d,
    neck_ln2: LayerNorm2d,
    input_size: usize,
    patch_size: usize,
    d_vit: usize,
    d_model: usize,
}

impl VitEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let g = cfg.grid_side();
        let patch_embed = conv2d(
            store,
            "backbone.patch_embed",
            3,
            cfg.d_vit,
            cfg.patch_size,
            Conv2dConfig {
                stride: cfg.patch_size,
                ..Default::default()
            },
        )?;
        let pos_embed = store
            .var(
                "backbone.pos_embed",
                &[1, g * g, cfg.d_vit],
                Init::TruncNormal(0.02),
            )
            .map_err(candle_core::Error::wrap)?;
        let mut blocks = Vec::new();
        let mut adapters = Vec::new();
        for i in 0..cfg.depth {
            let p = format!("backbone.blocks.{i}");
            blocks.push(Block {
                norm1: layer_norm(store, &format!("{p}.norm1"), cfg.d_vit)?,
                attn: SelfAttention {
                    qkv: linear(
                        store,
                        &format!("{p}.attn.qkv"),
                        cfg.d_vit,
                        3 * cfg.d_vit,
                        true,
                        Init::UniformFan(cfg.d_vit),
                    )?,
                    proj: linear(
                        store,
                        &format!("{p}.attn.proj"),
                        cfg.d_vit,
                        cfg.d_vit,
                        true,
                        Init::UniformFan(cfg.d_vit),
                    )?,
                    heads: cfg.heads,
                },
                norm2: layer_norm(store, &format!("{p}.norm2"), cfg.d_vit)?,
                mlp_lin1: linear(
                    store,
                    &format!("{p}.mlp.lin1"),
                    cfg.d_vit,
                    cfg.mlp_ratio * cfg.d_vit,
                    true,
                    Init::UniformFan(cfg.d_vit),
                )?,
                mlp_lin2: linear(
                    store,
                    &format!("{p}.mlp.lin2"),
                    cfg.mlp_ratio * cfg.d_vit,
                    cfg.d_vit,
                    true,
                    Init::UniformFan(cfg.mlp_ratio * cfg.d_vit),
                )?,
            });
            adapters.push(Adapter::new(
                store,
                &format!("adapter.blocks.{i}"),
                cfg.d_vit,
                cfg.adapter_ratio,
            )?);
        }
        Ok(Self {
            patch_embed,
            pos_embed,
            blocks,
            adapters,
            neck_conv1: conv2d(store, "neck.conv1", cfg.d_vit, cfg.d_model, 1, Conv2dConfig::default())?,
            neck_ln1: LayerNorm2d::new(store, "neck.ln1", cfg.d_model)?,
            neck_conv2: conv2d(
                store,
                "neck.conv2",
                cfg.d_model,
                cfg.d_model,
                3,
                Conv2dConfig {
                    padding: 1,
                    ..Default::default()
                },
            )?,
            neck_ln2: LayerNorm2d::new(store, "neck.ln2", cfg.d_model)?,
            input_size: cfg.input_size,
            patch_size: cfg.patch_size,
            d_vit: cfg.d_vit,
            d_model: cfg.d_model,
        })
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Tokenize an image: patch embedding plus positional encoding. The
    /// spatial size must match the configured input exactly.
    pub fn patchify(&self, image: &Tensor) -> Result<PatchGridFeatures> {
        let (b, c, h, w) = image.dims4()?;
        if c != 3 || h != self.input_size || w != self.input_size {
            candle_core::bail!(
                "patchify expects 3x{0}x{0} input, got {c}x{h}x{w}",
                self.input_size
            );
        }
        let g = self.grid_side();
        let emb = self.patch_embed.forward(image)?; // (b, d, g, g)
        let tokens = emb
            .reshape((b, self.d_vit, g * g))?
            .transpose(1, 2)?
            .contiguous()?;
        let tokens = tokens.broadcast_add(&self.pos_embed)?;
        Ok(PatchGridFeatures {
            tokens,
            grid_side: g,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// One transformer block; the adapter runs parallel to the feed-forward
    /// layer when enabled.
    pub fn block(&self, i: usize, tokens: &Tensor, adapters_on: bool) -> Result<Tensor> {
        let blk = &self.blocks[i];
        let h = (tokens + blk.attn.forward(&blk.norm1.forward(tokens)?)?)?;
        let z = blk.norm2.forward(&h)?;
        let ffn = blk.mlp_lin2.forward(&blk.mlp_lin1.forward(&z)?.gelu_erf()?)?;
        let mut out = (&h + ffn)?;
        if adapters_on {
            out = (out + self.adapters[i].forward(&z)?)?;
        }
        Ok(out)
    }

    /// Adapter-parallel feed-forward on raw token input (for gradient and
    /// identity checks): `ffn(x) + up(gelu(down(x)))`.
    pub fn adapter_ffn(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let blk = &self.blocks[i];
        let ffn = blk.mlp_lin2.forward(&blk.mlp_lin1.forward(x)?.gelu_erf()?)?;
        (&ffn + self.adapters[i].forward(x)?)
    }

    /// SAM-style neck: (B, N, d_vit) tokens → (B, d_model, G, G).
    pub fn neck(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, n, d) = tokens.dims3()?;
        let g = (n as f64).sqrt() as usize;
        let grid = tokens
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, d, g, g))?;
        let f = self.neck_ln1.forward(&self.neck_conv1.forward(&grid)?)?;
        self.neck_ln2.forward(&self.neck_conv2.forward(&f)?)
    }

    /// Plain forward (no cross-branch interaction): returns the post-neck
    /// embedding and token taps at the requested blocks.
    pub fn encode(
        &self,
        image: &Tensor,
        tap_blocks: &[usize],
        adapters_on: bool,
    ) -> Result<(Tensor, Vec<(usize, PatchGridFeatures)>)> {
        for &b in tap_blocks {
            if b >= self.depth() {
                candle_core::bail!("interaction site block {b} out of range (depth {})", self.depth());
            }
        }
        let mut tokens = self.patchify(image)?.tokens;
        let mut taps = Vec::new();
        for i in 0..self.depth() {
            tokens = self.block(i, &tokens, adapters_on)?;
            if tap_blocks.contains(&i) {
                taps.push((
                    i,
                    PatchGridFeatures {
                        tokens: tokens.clone(),
                        grid_side: self.grid_side(),
                    },
                ));
            }
        }
        Ok((self.neck(&tokens)?, taps))
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn toy_vit(seed: u64) -> (VitEncoder, ParamStore, ModelConfig) {
        let cfg = ModelConfig::toy();
        let dev = Device::Cpu;
        let mut store = ParamStore::new(&dev, DType::F32, seed);
        let vit = VitEncoder::new(&mut store, &cfg).unwrap();
        (vit, store, cfg)
    }

    #[test]
    fn patchify_grid_arithmetic() {
        let (vit, _s, _cfg) = toy_vit(0);
        let x = Tensor::rand(0f32, 1f32, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let p = vit.patchify(&x).unwrap();
        assert_eq!(p.grid_side, 8);
        assert_eq!(p.tokens.dims3().unwrap(), (2, 64, 64));
    }

    #[test]
    fn wrong_size_rejected_without_resizing() {
        let (vit, _s, _cfg) = toy_vit(1);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 128, 128), &Device::Cpu).unwrap();
        assert!(vit.patchify(&x).is_err());
    }

    #[test]
    fn constant_image_with_zero_pos_embed_gives_identical_tokens() {
        let (vit, store, _cfg) = toy_vit(2);
        let pe = store.get("backbone.pos_embed").unwrap();
        pe.set(&Tensor::zeros(pe.as_tensor().dims(), DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        let x = Tensor::full(0.5f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let tokens = vit.patchify(&x).unwrap().tokens;
        let rows = tokens.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        for row in &rows[1..] {
            for (a, b) in row.iter().zip(&rows[0]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_init_adapter_keeps_block_output() {
        let (vit, _s, _cfg) = toy_vit(3);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let (with, _) = vit.encode(&x, &[], true).unwrap();
        let (without, _) = vit.encode(&x, &[], false).unwrap();
        let d = (with - without)
            .unwrap()
            .abs()
            .unwrap()
            .max_keepdim(0)
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0, "zero-init adapters must be exact identities");
    }

    #[test]
    fn adapter_bottleneck_dimension() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(&dev, DType::F32, 4);
        let _a = Adapter::new(&mut store, "adapter.t", 64, 4).unwrap();
        let down = store.get("adapter.t.down.weight").unwrap();
        assert_eq!(down.as_tensor().dims(), &[16, 64]); // 4x channel decrease
        let up = store.get("adapter.t.up.weight").unwrap();
        assert_eq!(up.as_tensor().dims(), &[64, 16]);
    }

    #[test]
    fn taps_at_configured_sites_only() {
        let (vit, _s, _cfg) = toy_vit(5);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let (_f, taps) = vit.encode(&x, &[1, 3], true).unwrap();
        assert_eq!(taps.len(), 2);
        assert_eq!(taps[0].0, 1);
        assert_eq!(taps[1].0, 3);
        assert!(vit.encode(&x, &[9], true).is_err());
    }

    #[test]
    fn neck_output_shape() {
        let (vit, _s, cfg) = toy_vit(6);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let (f, _) = vit.encode(&x, &[], true).unwrap();
        assert_eq!(f.dims4().unwrap(), (1, cfg.d_model, 8, 8));
    }
}
