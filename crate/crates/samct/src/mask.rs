//! Binary 2D masks and the exact Euclidean distance transform.

use crate::error::{Result, SamctError};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask2D {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(SamctError::Data(format!(
                "mask buffer {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// Foreground pixels as (y, x) in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.iter_where(true)
    }

    pub fn background(&self) -> Vec<(usize, usize)> {
        self.iter_where(false)
    }

    fn iter_where(&self, value: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) == value {
                    out.push((y, x));
                }
            }
        }
        out
    }

    /// Tight bounding box (x0, y0, x1, y1) over foreground, inclusive.
    pub fn tight_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    /// Pixels of the mask that touch background 4-adjacently; pixels on the
    /// image border count as touching background.
    pub fn surface(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0 || x == 0 || y == self.h - 1 || x == self.w - 1;
                let bg_neighbor = (y > 0 && !self.get(y - 1, x))
                    || (y + 1 < self.h && !self.get(y + 1, x))
                    || (x > 0 && !self.get(y, x - 1))
                    || (x + 1 < self.w && !self.get(y, x + 1));
                if edge || bg_neighbor {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

const INF: f64 = 1e20;

/// 1D squared-distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = INF;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every grid cell to the nearest
/// `true` cell. Cells with no `true` anywhere get `INF`-like values.
pub fn squared_distance_transform(h: usize, w: usize, truth: &[bool]) -> Vec<f64> {
    assert_eq!(truth.len(), h * w);
    let mut grid: Vec<f64> = truth.iter().map(|&t| if t { 0.0 } else { INF }).collect();
    // columns
    let mut col = vec![0.0f64; h];
    let mut out_col = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        dt_1d(&col, &mut out_col);
        for y in 0..h {
            grid[y * w + x] = out_col[y];
        }
    }
    // rows
    let mut out_row = vec![0.0f64; w];
    for y in 0..h {
        dt_1d(&grid[y * w..(y + 1) * w].to_vec(), &mut out_row);
        grid[y * w..(y + 1) * w].copy_from_slice(&out_row);
    }
    grid
}

/// Distance of every foreground pixel to the nearest background pixel, with
/// everything outside the image counting as background. Used to pick the
/// most interior point of a mask.
pub fn interior_distance(mask: &Mask2D) -> Vec<f64> {
    let (h, w) = (mask.h + 2, mask.w + 2);
    let mut padded = vec![true; h * w];
    for y in 0..mask.h {
        for x in 0..mask.w {
            padded[(y + 1) * w + (x + 1)] = !mask.get(y, x);
        }
    }
    let dt = squared_distance_transform(h, w, &padded);
    let mut out = vec![0.0f64; mask.h * mask.w];
    for y in 0..mask.h {
        for x in 0..mask.w {
            out[y * mask.w + x] = dt[(y + 1) * w + (x + 1)].sqrt();
        }
    }
    out
}
