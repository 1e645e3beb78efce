//! Manual prompt encoder (frozen): random-Fourier positional encoding plus
//! learned role embeddings for points and box corners, the not-a-point
//! placeholder, and the dense no-mask embedding.

use candle_core::{Result, Tensor, D};

use super::params::{Init, ParamStore};
use crate::prompts::{Box2, Point, PointKind, PromptInputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseRole {
    PositivePoint,
    NegativePoint,
    BoxCornerA,
    BoxCornerB,
    NotAPoint,
}

impl SparseRole {
    fn is_positive(&self) -> bool {
        matches!(
            self,
            SparseRole::PositivePoint | SparseRole::BoxCornerA | SparseRole::BoxCornerB
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptOrigin {
    Manual,
    Synthesized,
    TaskIndicator,
}

/// Sparse prompt embeddings with role tags plus an optional dense embedding.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    sparse: Vec<(SparseRole, Tensor)>,
    pub dense: Option<Tensor>,
    pub origin: PromptOrigin,
}

impl PromptBundle {
    /// Role invariants: never mix not-a-point with positive roles; box
    /// corners come in pairs.
    pub fn new(
        sparse: Vec<(SparseRole, Tensor)>,
        dense: Option<Tensor>,
        origin: PromptOrigin,
    ) -> Result<Self> {
        let has_nap = sparse.iter().any(|(r, _)| *r == SparseRole::NotAPoint);
        let has_pos = sparse.iter().any(|(r, _)| r.is_positive());
        if has_nap && has_pos {
            candle_core::bail!("prompt bundle mixes not-a-point with positive roles");
        }
        let a = sparse
            .iter()
            .filter(|(r, _)| *r == SparseRole::BoxCornerA)
            .count();
        let b = sparse
            .iter()
            .filter(|(r, _)| *r == SparseRole::BoxCornerB)
            .count();
        if a != b {
            candle_core::bail!("box corners must come in pairs ({a} vs {b})");
        }
        Ok(Self {
            sparse,
            dense,
            origin,
        })
    }

    pub fn roles(&self) -> Vec<SparseRole> {
        self.sparse.iter().map(|(r, _)| *r).collect()
    }

    pub fn len(&self) -> usize {
        self.sparse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sparse.is_empty()
    }

    /// Stack sparse embeddings into (T, d), padding with `pad` (the
    /// not-a-point embedding) up to `pad_to` tokens.
    pub fn to_tokens(&self, pad_to: usize, pad: &Tensor) -> Result<Tensor> {
        if self.sparse.is_empty() {
            candle_core::bail!("empty prompt bundle");
        }
        if self.sparse.len() > pad_to {
            candle_core::bail!("bundle has {} tokens, pad_to {pad_to}", self.sparse.len());
        }
        let mut rows: Vec<Tensor> = self.sparse.iter().map(|(_, t)| t.clone()).collect();
        while rows.len() < pad_to {
            rows.push(pad.clone());
        }
        Tensor::stack(&rows, 0)
    }
}

#[derive(Debug)]
pub struct PromptEncoder {
    pe_gauss: Tensor,
    pos_point: Tensor,
    neg_point: Tensor,
    corner_a: Tensor,
    corner_b: Tensor,
    not_a_point: Tensor,
    no_mask: Tensor,
    d_model: usize,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, d_model: usize) -> Result<Self> {
        let half = d_model / 2;
        Ok(Self {
            // positional encoding matrix is a fixed random buffer
            pe_gauss: store
                .buffer("prompt_encoder.pe_gauss", &[2, half], Init::Normal(1.0))
                .map_err(candle_core::Error::wrap)?,
            pos_point: store
                .var("prompt_encoder.point_embed.pos", &[d_model], Init::TruncNormal(0.02))
                .map_err(candle_core::Error::wrap)?,
            neg_point: store
                .var("prompt_encoder.point_embed.neg", &[d_model], Init::TruncNormal(0.02))
                .map_err(candle_core::Error::wrap)?,
            corner_a: store
                .var("prompt_encoder.point_embed.corner_a", &[d_model], Init::TruncNormal(0.02))
                .map_err(candle_core::Error::wrap)?,
            corner_b: store
                .var("prompt_encoder.point_embed.corner_b", &[d_model], Init::TruncNormal(0.02))
                .map_err(candle_core::Error::wrap)?,
            not_a_point: store
                .var("prompt_encoder.not_a_point", &[d_model], Init::TruncNormal(0.02))
                .map_err(candle_core::Error::wrap)?,
            no_mask: store
                .var("prompt_encoder.no_mask", &[d_model], Init::TruncNormal(0.02))
                .map_err(candle_core::Error::wrap)?,
            d_model,
        })
    }

    /// Fourier-feature encoding of normalized coordinates in [0, 1]².
    fn pe(&self, coords: &Tensor) -> Result<Tensor> {
        let centered = coords.affine(2.0, -1.0)?;
        let f = centered.broadcast_matmul(&self.pe_gauss)?;
        let f = (f * (2.0 * std::f64::consts::PI))?;
        Tensor::cat(&[f.sin()?, f.cos()?], D::Minus1)
    }

    /// Positional encoding of one pixel coordinate (+0.5 pixel-center
    /// convention).
    pub fn pe_point(&self, p: Point, image_size: usize) -> Result<Tensor> {
        let s = image_size as f64;
        let coords = Tensor::from_vec(
            vec![(p.x as f64 + 0.5) / s, (p.y as f64 + 0.5) / s],
            (1, 2),
            self.pe_gauss.device(),
        )?
        .to_dtype(self.pe_gauss.dtype())?;
        Ok(self.pe(&coords)?.squeeze(0)?)
    }

    fn check_bounds(&self, p: Point, image_size: usize) -> Result<()> {
        let max = image_size as f32 - 1.0;
        if p.x < 0.0 || p.y < 0.0 || p.x > max || p.y > max {
            candle_core::bail!(
                "point ({}, {}) outside image bounds 0..{max}",
                p.x,
                p.y
            );
        }
        Ok(())
    }

    /// Point prompt: positional encoding plus the label's role vector.
    pub fn encode_point(
        &self,
        p: Point,
        kind: PointKind,
        image_size: usize,
    ) -> Result<(SparseRole, Tensor)> {
        self.check_bounds(p, image_size)?;
        let pe = self.pe_point(p, image_size)?;
        match kind {
            PointKind::Positive => Ok((SparseRole::PositivePoint, (pe + &self.pos_point)?)),
            PointKind::Negative => Ok((SparseRole::NegativePoint, (pe + &self.neg_point)?)),
        }
    }

    /// Box prompt: two corner tokens with their role vectors.
    pub fn encode_box(&self, b: Box2, image_size: usize) -> Result<Vec<(SparseRole, Tensor)>> {
        b.validate().map_err(candle_core::Error::wrap)?;
        self.check_bounds(Point { x: b.x0, y: b.y0 }, image_size)?;
        self.check_bounds(Point { x: b.x1, y: b.y1 }, image_size)?;
        let a = (self.pe_point(Point { x: b.x0, y: b.y0 }, image_size)? + &self.corner_a)?;
        let bb = (self.pe_point(Point { x: b.x1, y: b.y1 }, image_size)? + &self.corner_b)?;
        Ok(vec![
            (SparseRole::BoxCornerA, a),
            (SparseRole::BoxCornerB, bb),
        ])
    }

    /// Encode geometric prompts into a bundle with the dense no-mask
    /// embedding attached.
    pub fn encode_prompts(
        &self,
        inputs: &PromptInputs,
        image_size: usize,
        grid_side: usize,
    ) -> Result<PromptBundle> {
        let mut sparse = Vec::new();
        for (p, kind) in &inputs.points {
            sparse.push(self.encode_point(*p, *kind, image_size)?);
        }
        for b in &inputs.boxes {
            sparse.extend(self.encode_box(*b, image_size)?);
        }
        PromptBundle::new(
            sparse,
            Some(self.dense_no_mask(grid_side)?),
            PromptOrigin::Manual,
        )
    }

    /// Dense embedding used when no mask prompt is given: the learned
    /// no-mask vector broadcast over the grid.
    pub fn dense_no_mask(&self, grid_side: usize) -> Result<Tensor> {
        self.no_mask
            .reshape((1, self.d_model, 1, 1))?
            .broadcast_as((1, self.d_model, grid_side, grid_side))?
            .contiguous()
    }

    /// Positional encoding of the image grid for decoder cross-attention:
    /// (1, d_model, G, G).
    pub fn image_pe(&self, grid_side: usize) -> Result<Tensor> {
        let g = grid_side;
        let mut coords = Vec::with_capacity(g * g * 2);
        for y in 0..g {
            for x in 0..g {
                coords.push((x as f64 + 0.5) / g as f64);
                coords.push((y as f64 + 0.5) / g as f64);
            }
        }
        let coords = Tensor::from_vec(coords, (g * g, 2), self.pe_gauss.device())?
            .to_dtype(self.pe_gauss.dtype())?;
        let pe = self.pe(&coords)?; // (g², d)
        Ok(pe
            .reshape((g, g, self.d_model))?
            .permute((2, 0, 1))?
            .contiguous()?
            .unsqueeze(0)?)
    }

    pub fn not_a_point(&self) -> &Tensor {
        &self.not_a_point
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn encoder(seed: u64) -> (PromptEncoder, ParamStore) {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(&dev, DType::F64, seed);
        let enc = PromptEncoder::new(&mut store, 16).unwrap();
        (enc, store)
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn same_point_same_embedding() {
        let (enc, _s) = encoder(0);
        let p = Point { x: 10.0, y: 20.0 };
        let (_, a) = enc.encode_point(p, PointKind::Positive, 64).unwrap();
        let (_, b) = enc.encode_point(p, PointKind::Positive, 64).unwrap();
        assert_eq!(max_abs(&(a - b).unwrap()), 0.0);
    }

    #[test]
    fn label_difference_is_exactly_the_label_vectors() {
        let (enc, store) = encoder(1);
        let p = Point { x: 7.0, y: 3.0 };
        let (_, pos) = enc.encode_point(p, PointKind::Positive, 64).unwrap();
        let (_, neg) = enc.encode_point(p, PointKind::Negative, 64).unwrap();
        let diff = (pos - neg).unwrap();
        let pos_v = store.get("prompt_encoder.point_embed.pos").unwrap();
        let neg_v = store.get("prompt_encoder.point_embed.neg").unwrap();
        let expect = (pos_v.as_tensor() - neg_v.as_tensor()).unwrap();
        assert!(max_abs(&(diff - expect).unwrap()) < 1e-15);
    }

    #[test]
    fn center_of_image_normalizes_to_half() {
        let (enc, _s) = encoder(2);
        // continuous center of a 256² image: pixel coordinate 127.5
        let pe_center = enc
            .pe_point(Point { x: 127.5, y: 127.5 }, 256)
            .unwrap();
        // oracle: normalized (0.5, 0.5) → centered (0, 0) → sin 0, cos 1
        let v = pe_center.to_vec1::<f64>().unwrap();
        let half = v.len() / 2;
        for s in &v[..half] {
            assert!(s.abs() < 1e-12);
        }
        for c in &v[half..] {
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_rejected() {
        let (enc, _s) = encoder(3);
        assert!(enc
            .encode_point(Point { x: -1.0, y: 0.0 }, PointKind::Positive, 64)
            .is_err());
        assert!(enc
            .encode_point(Point { x: 0.0, y: 64.0 }, PointKind::Positive, 64)
            .is_err());
    }

    #[test]
    fn degenerate_box_rejected() {
        let (enc, _s) = encoder(4);
        let one_pixel = Box2 {
            x0: 5.0,
            y0: 5.0,
            x1: 5.0,
            y1: 5.0,
        };
        assert!(enc.encode_box(one_pixel, 64).is_err());
        let inverted = Box2 {
            x0: 9.0,
            y0: 2.0,
            x1: 3.0,
            y1: 8.0,
        };
        assert!(enc.encode_box(inverted, 64).is_err());
    }

    #[test]
    fn full_image_box_encodes_extreme_corners() {
        let (enc, _s) = encoder(5);
        let b = Box2 {
            x0: 0.0,
            y0: 0.0,
            x1: 63.0,
            y1: 63.0,
        };
        let toks = enc.encode_box(b, 64).unwrap();
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0].0, SparseRole::BoxCornerA);
        assert_eq!(toks[1].0, SparseRole::BoxCornerB);
        // corner embedding = pe(corner) + role vector, so it differs from the
        // other corner's embedding
        assert!(max_abs(&(&toks[0].1 - &toks[1].1).unwrap()) > 1e-9);
    }

    #[test]
    fn bundle_role_invariants() {
        let (enc, _s) = encoder(6);
        let nap = (SparseRole::NotAPoint, enc.not_a_point().clone());
        let pos = enc
            .encode_point(Point { x: 1.0, y: 1.0 }, PointKind::Positive, 64)
            .unwrap();
        assert!(PromptBundle::new(vec![nap.clone(), pos.clone()], None, PromptOrigin::Manual).is_err());
        let neg = enc
            .encode_point(Point { x: 2.0, y: 2.0 }, PointKind::Negative, 64)
            .unwrap();
        assert!(PromptBundle::new(vec![nap, neg], None, PromptOrigin::TaskIndicator).is_ok());
        // unpaired box corner
        let b = enc
            .encode_box(
                Box2 {
                    x0: 1.0,
                    y0: 1.0,
                    x1: 5.0,
                    y1: 5.0,
                },
                64,
            )
            .unwrap();
        assert!(PromptBundle::new(vec![b[0].clone()], None, PromptOrigin::Manual).is_err());
    }

    #[test]
    fn padding_fills_with_not_a_point() {
        let (enc, _s) = encoder(7);
        let neg = enc
            .encode_point(Point { x: 2.0, y: 2.0 }, PointKind::Negative, 64)
            .unwrap();
        let bundle = PromptBundle::new(vec![neg], None, PromptOrigin::Manual).unwrap();
        let toks = bundle.to_tokens(4, enc.not_a_point()).unwrap();
        assert_eq!(toks.dims(), &[4, 16]);
        let last = toks.get(3).unwrap();
        assert!(max_abs(&(last - enc.not_a_point()).unwrap()) < 1e-15);
        // empty bundle rejected
        let empty = PromptBundle::new(vec![], None, PromptOrigin::Manual).unwrap();
        assert!(empty.to_tokens(4, enc.not_a_point()).is_err());
    }
}
