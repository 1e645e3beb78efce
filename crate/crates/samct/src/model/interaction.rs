//! Cross-branch interaction between the ViT and CNN encoders.
//!
//! Each ViT patch is aligned with a k×k window of the CNN map. The
//! CNN-to-Transformer flow runs cross-attention with the patch as query and
//! its window as keys/values, adding the projected result back onto the
//! patch. The Transformer-to-CNN flow gates each CNN window by a bounded
//! coarse-to-fine attention multiplier in (0.5, 1.5). Both flows read the
//! pre-update inputs, so the site's semantics are simultaneous.

use candle_core::{Result, Tensor, D};

use super::layers::matrix;
use super::params::{Init, ParamStore};

/// Alignment between a CNN map and the patch grid: window side `k` with the
/// row-major patch-to-window mapping implied by block reshaping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowAlignment {
    pub k: usize,
    pub grid_side: usize,
    pub d_w: usize,
    pub d_p: usize,
}

/// Compute the alignment; the CNN side must be an exact integer multiple of
/// the patch-grid side.
pub fn align(f_cnn: &Tensor, f_trans: &Tensor, site_name: &str) -> Result<WindowAlignment> {
    let (_, d_w, h, w) = f_cnn.dims4()?;
    let (_, n, d_p) = f_trans.dims3()?;
    let g = (n as f64).sqrt() as usize;
    if g * g != n {
        candle_core::bail!("{site_name}: token count {n} is not a square grid");
    }
    if h != w {
        candle_core::bail!("{site_name}: CNN map must be square, got {h}x{w}");
    }
    if h % g != 0 || h < g {
        candle_core::bail!(
            "{site_name}: CNN side {h} does not align with patch grid {g} (non-integer window)"
        );
    }
    Ok(WindowAlignment {
        k: h / g,
        grid_side: g,
        d_w,
        d_p,
    })
}

/// Rearrange an NCHW CNN map into per-patch windows: (B, G², k², C).
pub fn windows(f_cnn: &Tensor, a: &WindowAlignment) -> Result<Tensor> {
    let (b, c, _, _) = f_cnn.dims4()?;
    let (g, k) = (a.grid_side, a.k);
    f_cnn
        .reshape((b, c, g, k, g, k))?
        .permute((0, 2, 4, 3, 5, 1))?
        .contiguous()?
        .reshape((b, g * g, k * k, c))
}

/// Scatter per-patch windows back to an NCHW map (inverse of `windows`).
pub fn unwindow(w: &Tensor, a: &WindowAlignment) -> Result<Tensor> {
    let (b, _, _, c) = w.dims4()?;
    let (g, k) = (a.grid_side, a.k);
    w.reshape((b, g, g, k, k, c))?
        .permute((0, 5, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, c, g * k, g * k))
}

/// One interaction site's parameters. Each site owns an independent set.
#[derive(Debug)]
pub struct InteractionModule {
    e_q: Tensor,
    e_k: Tensor,
    e_v: Tensor,
    /// Output projection for the attended window summary; zero-initialized
    /// so the residual update starts as the identity.
    proj: Tensor,
    e_w: Tensor,
    gate_a: Tensor,
    gate_b: Tensor,
    site_name: String,
}

impl InteractionModule {
    pub fn new(store: &mut ParamStore, index: usize, d_p: usize, d_w: usize) -> Result<Self> {
        let p = format!("interaction.site{index}");
        Ok(Self {
            e_q: matrix(store, &format!("{p}.e_q"), d_p, d_p)?,
            e_k: matrix(store, &format!("{p}.e_k"), d_w, d_p)?,
            e_v: matrix(store, &format!("{p}.e_v"), d_w, d_p)?,
            proj: store
                .var(&format!("{p}.proj"), &[d_p, d_p], Init::Zeros)
                .map_err(candle_core::Error::wrap)?,
            e_w: matrix(store, &format!("{p}.e_w"), d_w, d_p)?,
            gate_a: store
                .var(&format!("{p}.gate_a"), &[1], Init::Zeros)
                .map_err(candle_core::Error::wrap)?,
            gate_b: store
                .var(&format!("{p}.gate_b"), &[1], Init::Zeros)
                .map_err(candle_core::Error::wrap)?,
            site_name: p,
        })
    }

    /// CNN→Transformer flow: per-patch cross-attention over the window,
    /// softmax over the k² positions, residual update through the zero-init
    /// projection. Returns the updated (B, N, d_p) tokens.
    pub fn cnn_to_transformer(&self, f_trans: &Tensor, win: &Tensor) -> Result<Tensor> {
        let d_p = f_trans.dim(D::Minus1)?;
        let q = f_trans.broadcast_matmul(&self.e_q)?.unsqueeze(2)?; // (B,N,1,d_p)
        let keys = win.broadcast_matmul(&self.e_k)?; // (B,N,k²,d_p)
        let vals = win.broadcast_matmul(&self.e_v)?;
        let logits = (q.matmul(&keys.transpose(2, 3)?)? * (1.0 / (d_p as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?; // (B,N,1,k²)
        let f_c = attn.matmul(&vals)?.squeeze(2)?; // (B,N,d_p)
        f_trans + f_c.broadcast_matmul(&self.proj)?
    }

    /// Raw attended window summary F_c (pre-residual), for oracle tests.
    pub fn window_summary(&self, f_trans: &Tensor, win: &Tensor) -> Result<Tensor> {
        let d_p = f_trans.dim(D::Minus1)?;
        let q = f_trans.broadcast_matmul(&self.e_q)?.unsqueeze(2)?;
        let keys = win.broadcast_matmul(&self.e_k)?;
        let vals = win.broadcast_matmul(&self.e_v)?;
        let logits = (q.matmul(&keys.transpose(2, 3)?)? * (1.0 / (d_p as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        attn.matmul(&vals)?.squeeze(2)
    }

    /// Fine attention multipliers A*_w ∈ (0.5, 1.5): softmax correlation per
    /// window, shifted by the uniform level k⁻², squashed and offset.
    pub fn fine_multiplier(&self, f_trans: &Tensor, win: &Tensor) -> Result<Tensor> {
        let d_p = f_trans.dim(D::Minus1)?;
        let k2 = win.dim(2)?;
        let keys = win.broadcast_matmul(&self.e_w)?; // (B,N,k²,d_p)
        let logits =
            (f_trans.unsqueeze(2)?.matmul(&keys.transpose(2, 3)?)? * (1.0 / (d_p as f64).sqrt()))?;
        let a_w = candle_nn::ops::softmax(&logits, D::Minus1)?.squeeze(2)?; // (B,N,k²)
        let shifted = a_w.affine(1.0, -1.0 / k2 as f64)?;
        candle_nn::ops::sigmoid(&shifted)?.affine(1.0, 0.5)
    }

    /// Coarse per-patch multiplier A*_p ∈ (0.5, 1.5): channel-wise max and
    /// average pooling of the tokens, averaged, through a learned scalar
    /// affine and the same shifted sigmoid. Gate scale starts at zero so the
    /// coarse map is exactly 1 at initialization.
    pub fn coarse_multiplier(&self, f_trans: &Tensor) -> Result<Tensor> {
        let mx = f_trans.max(D::Minus1)?; // (B,N)
        let avg = f_trans.mean(D::Minus1)?;
        let pooled = ((mx + avg)? * 0.5)?;
        let z = pooled
            .broadcast_mul(&self.gate_a)?
            .broadcast_add(&self.gate_b)?;
        candle_nn::ops::sigmoid(&z)?.affine(1.0, 0.5)
    }

    /// Transformer→CNN flow: multiply each CNN window elementwise by
    /// A*_w × A*_p (the coarse value broadcast over the window). Returns the
    /// augmented windows (B, N, k², C).
    pub fn transformer_to_cnn(&self, f_trans: &Tensor, win: &Tensor) -> Result<Tensor> {
        let fine = self.fine_multiplier(f_trans, win)?; // (B,N,k²)
        let coarse = self.coarse_multiplier(f_trans)?; // (B,N)
        let mult = fine.broadcast_mul(&coarse.unsqueeze(2)?)?; // (B,N,k²)
        win.broadcast_mul(&mult.unsqueeze(3)?)
    }

    /// Both flows with simultaneous semantics: each consumes the pre-update
    /// other branch. Returns (augmented CNN map, updated tokens).
    pub fn interact(&self, f_cnn: &Tensor, f_trans: &Tensor) -> Result<(Tensor, Tensor)> {
        let a = align(f_cnn, f_trans, &self.site_name)?;
        let win = windows(f_cnn, &a)?;
        let new_tokens = self.cnn_to_transformer(f_trans, &win)?;
        let new_windows = self.transformer_to_cnn(f_trans, &win)?;
        Ok((unwindow(&new_windows, &a)?, new_tokens))
    }
}
