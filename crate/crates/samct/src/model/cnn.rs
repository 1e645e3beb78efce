//! U-shaped CNN image encoder.
//!
//! Four encoding blocks halve resolution and double channels down to
//! F_16 (16·d_c, H/16), four decoding blocks mirror them through skip
//! connections, producing F_32 … F_256, and a 1×1 projection (owned by the
//! `fusion` parameter group) maps F_256 to the 32-channel full-resolution
//! embedding consumed by the mask decoder.

use candle_core::{Result, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Module};

use super::layers::{conv2d, LayerNorm2d};
use super::params::{Init, ParamStore};

/// The CNN branch's multi-scale pyramid plus the fused full-resolution map.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    /// 16·d_c × H/16 × W/16
    pub f_16: Tensor,
    /// 8·d_c × H/8 × W/8
    pub f_32: Tensor,
    /// 4·d_c × H/4 × W/4
    pub f_64: Tensor,
    /// 2·d_c × H/2 × W/2
    pub f_128: Tensor,
    /// d_c × H × W
    pub f_256: Tensor,
    /// 32 × H × W
    pub full_res32: Tensor,
}

#[derive(Debug)]
enum Stem {
    /// Parallel 3×3 / 5×5 convolutions fused by channel attention — a
    /// self-contained stand-in for a hybrid adaptive attention stem.
    Hybrid {
        b3: Conv2d,
        ln3: LayerNorm2d,
        b5: Conv2d,
        ln5: LayerNorm2d,
        se_fc1: Conv2d,
        se_fc2: Conv2d,
        fuse: Conv2d,
        ln: LayerNorm2d,
    },
    Plain {
        conv1: Conv2d,
        ln1: LayerNorm2d,
        conv2: Conv2d,
        ln2: LayerNorm2d,
    },
}

#[derive(Debug)]
struct EncodeBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    ln: LayerNorm2d,
}

#[derive(Debug)]
struct DecodeBlock {
    up_weight: Tensor,
    up_bias: Tensor,
    conv1: Conv2d,
    conv2: Conv2d,
    ln: LayerNorm2d,
}

#[derive(Debug)]
pub struct CnnEncoder {
    stem: Stem,
    enc: Vec<EncodeBlock>,
    dec: Vec<DecodeBlock>,
    to32: Conv2d,
    d_c: usize,
}

fn pad(padding: usize) -> Conv2dConfig {
    Conv2dConfig {
        padding,
        ..Default::default()
    }
}

impl CnnEncoder {
    pub fn new(store: &mut ParamStore, d_c: usize, hybrid_stem: bool) -> Result<Self> {
        let stem = if hybrid_stem {
            let mid = (2 * d_c / 4).max(2);
            Stem::Hybrid {
                b3: conv2d(store, "cnn.stem.b3", 3, d_c, 3, pad(1))?,
                ln3: LayerNorm2d::new(store, "cnn.stem.ln3", d_c)?,
                b5: conv2d(store, "cnn.stem.b5", 3, d_c, 5, pad(2))?,
                ln5: LayerNorm2d::new(store, "cnn.stem.ln5", d_c)?,
                se_fc1: conv2d(store, "cnn.stem.se_fc1", 2 * d_c, mid, 1, pad(0))?,
                se_fc2: conv2d(store, "cnn.stem.se_fc2", mid, 2 * d_c, 1, pad(0))?,
                fuse: conv2d(store, "cnn.stem.fuse", 2 * d_c, d_c, 1, pad(0))?,
                ln: LayerNorm2d::new(store, "cnn.stem.ln", d_c)?,
            }
        } else {
            Stem::Plain {
                conv1: conv2d(store, "cnn.stem.conv1", 3, d_c, 3, pad(1))?,
                ln1: LayerNorm2d::new(store, "cnn.stem.ln1", d_c)?,
                conv2: conv2d(store, "cnn.stem.conv2", d_c, d_c, 3, pad(1))?,
                ln2: LayerNorm2d::new(store, "cnn.stem.ln2", d_c)?,
            }
        };
        let mut enc = Vec::new();
        for i in 1..=4usize {
            let c_in = d_c << (i - 1);
            enc.push(EncodeBlock {
                conv1: conv2d(store, &format!("cnn.enc{i}.conv1"), c_in, 2 * c_in, 3, pad(1))?,
                conv2: conv2d(store, &format!("cnn.enc{i}.conv2"), 2 * c_in, 2 * c_in, 3, pad(1))?,
                ln: LayerNorm2d::new(store, &format!("cnn.enc{i}.ln"), 2 * c_in)?,
            });
        }
        let mut dec = Vec::new();
        for i in 1..=4usize {
            let c_in = d_c << (5 - i); // 16d_c, 8d_c, 4d_c, 2d_c
            let c_out = c_in / 2;
            let up_weight = store
                .var(
                    &format!("cnn.dec{i}.up.weight"),
                    &[c_in, c_out, 2, 2],
                    Init::UniformFan(c_in * 4),
                )
                .map_err(candle_core::Error::wrap)?;
            let up_bias = store
                .var(&format!("cnn.dec{i}.up.bias"), &[c_out], Init::Zeros)
                .map_err(candle_core::Error::wrap)?;
            dec.push(DecodeBlock {
                up_weight,
                up_bias,
                conv1: conv2d(store, &format!("cnn.dec{i}.conv1"), c_in, c_out, 3, pad(1))?,
                conv2: conv2d(store, &format!("cnn.dec{i}.conv2"), c_out, c_out, 3, pad(1))?,
                ln: LayerNorm2d::new(store, &format!("cnn.dec{i}.ln"), c_out)?,
            });
        }
        // Projection into the decoder's fusion path; grouped under `fusion`.
        let to32 = conv2d(store, "fusion.to32", d_c, 32, 1, pad(0))?;
        Ok(Self {
            stem,
            enc,
            dec,
            to32,
            d_c,
        })
    }

    /// Resolution-preserving stem: 3×H×W → d_c×H×W.
    pub fn stem(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            candle_core::bail!("stem expects 3 input channels, got {c}");
        }
        if h % 16 != 0 || w % 16 != 0 {
            candle_core::bail!("stem expects spatial dims divisible by 16, got {h}x{w}");
        }
        match &self.stem {
            Stem::Hybrid {
                b3,
                ln3,
                b5,
                ln5,
                se_fc1,
                se_fc2,
                fuse,
                ln,
            } => {
                let f3 = ln3.forward(&b3.forward(x)?)?.gelu_erf()?;
                let f5 = ln5.forward(&b5.forward(x)?)?.gelu_erf()?;
                let cat = Tensor::cat(&[&f3, &f5], 1)?;
                let pooled = cat.mean_keepdim(2)?.mean_keepdim(3)?;
                let gate = candle_nn::ops::sigmoid(
                    &se_fc2.forward(&se_fc1.forward(&pooled)?.gelu_erf()?)?,
                )?;
                let gated = cat.broadcast_mul(&gate)?;
                ln.forward(&fuse.forward(&gated)?)?.gelu_erf()
            }
            Stem::Plain {
                conv1,
                ln1,
                conv2,
                ln2,
            } => {
                let f = ln1.forward(&conv1.forward(x)?)?.gelu_erf()?;
                ln2.forward(&conv2.forward(&f)?)?.gelu_erf()
            }
        }
    }

    /// Encoding block `i` (1-based): C×h×w → 2C×h/2×w/2.
    pub fn encode_block(&self, i: usize, f: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = f.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("encode block {i}: odd spatial dims {h}x{w}");
        }
        let expect_c = self.d_c << (i - 1);
        if c != expect_c {
            candle_core::bail!("encode block {i}: expected {expect_c} channels, got {c}");
        }
        let block = &self.enc[i - 1];
        let pooled = f.max_pool2d(2)?;
        let f = block.conv1.forward(&pooled)?;
        let f = block.conv2.forward(&f)?;
        block.ln.forward(&f)?.gelu_erf()
    }

    /// Decoding block `i` (1-based): (C×h×w, skip C/2×2h×2w) → C/2×2h×2w.
    /// Concatenation with the skip happens before the two convolutions.
    pub fn decode_block(&self, i: usize, f: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let block = &self.dec[i - 1];
        let (_, _, h, w) = f.dims4()?;
        let (_, sc, sh, sw) = skip.dims4()?;
        if (sh, sw) != (2 * h, 2 * w) {
            candle_core::bail!(
                "decode block {i}: skip {sh}x{sw} is not double of {h}x{w}"
            );
        }
        let up = f.conv_transpose2d(&block.up_weight, 0, 0, 2, 1)?;
        let up = up.broadcast_add(&block.up_bias.reshape((1, sc, 1, 1))?)?;
        let cat = Tensor::cat(&[&up, skip], 1)?;
        let f = block.conv1.forward(&cat)?;
        let f = block.conv2.forward(&f)?;
        block.ln.forward(&f)?.gelu_erf()
    }

    /// Encoder half only: stem plus the four encode blocks.
    /// Returns `[stem, enc1, enc2, enc3, enc4]`.
    pub fn encode_stages(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut maps = vec![self.stem(x)?];
        for i in 1..=4 {
            let next = self.encode_block(i, maps.last().unwrap())?;
            maps.push(next);
        }
        Ok(maps)
    }

    /// Decoder half from (possibly interaction-augmented) encoder maps.
    pub fn decode_stages(&self, maps: &[Tensor]) -> Result<MultiScaleFeatures> {
        let f_16 = maps[4].clone();
        let f_32 = self.decode_block(1, &f_16, &maps[3])?;
        let f_64 = self.decode_block(2, &f_32, &maps[2])?;
        let f_128 = self.decode_block(3, &f_64, &maps[1])?;
        let f_256 = self.decode_block(4, &f_128, &maps[0])?;
        let full_res32 = self.to32.forward(&f_256)?;
        Ok(MultiScaleFeatures {
            f_16,
            f_32,
            f_64,
            f_128,
            f_256,
            full_res32,
        })
    }

    /// Full U pass.
    pub fn encode(&self, x: &Tensor) -> Result<MultiScaleFeatures> {
        let maps = self.encode_stages(x)?;
        self.decode_stages(&maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn encoder(d_c: usize, hybrid: bool, seed: u64) -> (CnnEncoder, ParamStore) {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(&dev, DType::F32, seed);
        let enc = CnnEncoder::new(&mut store, d_c, hybrid).unwrap();
        (enc, store)
    }

    /// Shape oracle from the doubling/halving rules.
    fn expected_shapes(d_c: usize, h: usize, w: usize) -> [(usize, usize, usize); 6] {
        [
            (16 * d_c, h / 16, w / 16),
            (8 * d_c, h / 8, w / 8),
            (4 * d_c, h / 4, w / 4),
            (2 * d_c, h / 2, w / 2),
            (d_c, h, w),
            (32, h, w),
        ]
    }

    #[test]
    fn scale_relations_hold_on_toy_input() {
        let (enc, _store) = encoder(8, true, 0);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let out = enc.encode(&x).unwrap();
        let got = [
            out.f_16.dims4().unwrap(),
            out.f_32.dims4().unwrap(),
            out.f_64.dims4().unwrap(),
            out.f_128.dims4().unwrap(),
            out.f_256.dims4().unwrap(),
            out.full_res32.dims4().unwrap(),
        ];
        for (g, e) in got.iter().zip(expected_shapes(8, 64, 64)) {
            assert_eq!((g.1, g.2, g.3), e);
        }
        assert_eq!(out.f_16.dims4().unwrap().1, 128, "F_16 is 128x4x4 for d_c=8");
    }

    #[test]
    fn full_res_is_32_channels_regardless_of_dc() {
        for d_c in [4, 8] {
            let (enc, _store) = encoder(d_c, false, 1);
            let x = Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu).unwrap();
            let out = enc.encode(&x).unwrap();
            assert_eq!(out.full_res32.dims4().unwrap().1, 32);
        }
    }

    #[test]
    fn encode_block_doubles_channels_halves_space() {
        let (enc, _store) = encoder(16, false, 2);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let f = enc.stem(&x).unwrap();
        let e1 = enc.encode_block(1, &f).unwrap();
        assert_eq!(e1.dims4().unwrap(), (1, 32, 32, 32));
    }

    #[test]
    fn odd_spatial_dims_rejected() {
        let (enc, _store) = encoder(8, false, 3);
        let f = Tensor::rand(0f32, 1f32, (1, 8, 5, 5), &Device::Cpu).unwrap();
        assert!(enc.encode_block(1, &f).is_err());
    }

    #[test]
    fn non_divisible_input_rejected() {
        let (enc, _store) = encoder(8, true, 4);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 24, 24), &Device::Cpu).unwrap();
        assert!(enc.stem(&x).is_err());
    }

    #[test]
    fn mismatched_skip_rejected() {
        let (enc, _store) = encoder(8, false, 5);
        let f = Tensor::rand(0f32, 1f32, (1, 128, 4, 4), &Device::Cpu).unwrap();
        let bad_skip = Tensor::rand(0f32, 1f32, (1, 64, 16, 16), &Device::Cpu).unwrap();
        assert!(enc.decode_block(1, &f, &bad_skip).is_err());
    }

    #[test]
    fn max_pool_of_constant_map_is_constant() {
        let x = Tensor::full(2.5f32, (1, 4, 8, 8), &Device::Cpu).unwrap();
        let y = x.max_pool2d(2).unwrap();
        for v in y.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(v, 2.5);
        }
    }

    #[test]
    fn transpose_conv_of_zeros_is_zero_before_bias() {
        let (enc, _store) = encoder(8, false, 6);
        let zeros = Tensor::zeros((1, 128, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let up = zeros
            .conv_transpose2d(&enc.dec[0].up_weight, 0, 0, 2, 1)
            .unwrap();
        for v in up.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn stem_is_spatially_constant_in_interior_for_constant_input() {
        for hybrid in [true, false] {
            let (enc, _store) = encoder(8, hybrid, 7);
            let x = Tensor::full(0.75f32, (1, 3, 32, 32), &Device::Cpu).unwrap();
            let f = enc.stem(&x).unwrap().squeeze(0).unwrap();
            let data = f.to_vec3::<f32>().unwrap();
            for c in &data {
                let center = c[16][16];
                for row in c.iter().take(29).skip(3) {
                    for &val in row.iter().take(29).skip(3) {
                        assert!((val - center).abs() < 1e-5, "{val} vs {center}");
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_reach_every_cnn_parameter() {
        let (enc, store) = encoder(4, true, 8);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let out = enc.encode(&x).unwrap();
        // generic loss touching the decoder output path
        let a = out.full_res32.sqr().unwrap().sum_all().unwrap();
        let b = out.f_16.sqr().unwrap().sum_all().unwrap();
        let loss = (&a + &b).unwrap();
        let grads = loss.backward().unwrap();
        for name in store.names() {
            let var = store.get(name).unwrap();
            let grad = grads.get(var.as_tensor());
            assert!(grad.is_some(), "no gradient for {name}");
            let norm: f32 = grad
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar()
                .unwrap();
            assert!(norm > 0.0, "zero gradient for {name}");
        }
    }
}
