//! Segmentation metrics: Dice, IoU, and HD95.
//!
//! Conventions for degenerate pairs: empty prediction vs empty ground truth
//! scores dice = iou = 100 and hd95 = 0; empty vs non-empty scores
//! dice = iou = 0 and hd95 = the image diagonal. HD is reported as HD95, the
//! 95th-percentile symmetric surface distance.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Result, SamctError};
use crate::mask::{squared_distance_transform, Mask2D};

/// Metrics for a single predicted/ground-truth mask pair. Dice and IoU are
/// percentages; hd95 is in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskMetrics {
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
}

fn image_diagonal(h: usize, w: usize) -> f64 {
    (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt()
}

/// Nearest-rank 95th percentile of an unsorted distance set.
fn percentile_95(mut values: Vec<f64>) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let rank = ((0.95 * values.len() as f64).ceil() as usize).max(1);
    values[rank - 1]
}

/// Dice / IoU / HD95 for one mask pair.
pub fn mask_metrics(pred: &Mask2D, gt: &Mask2D) -> Result<MaskMetrics> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(SamctError::Data(format!(
            "mask shape mismatch: {}x{} vs {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let p = pred.count();
    let g = gt.count();
    if p == 0 && g == 0 {
        return Ok(MaskMetrics {
            dice: 100.0,
            iou: 100.0,
            hd95: 0.0,
        });
    }
    if p == 0 || g == 0 {
        return Ok(MaskMetrics {
            dice: 0.0,
            iou: 0.0,
            hd95: image_diagonal(pred.h, pred.w),
        });
    }
    let inter = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(&a, &b)| a && b)
        .count();
    let dice = 100.0 * 2.0 * inter as f64 / (p + g) as f64;
    let iou = 100.0 * inter as f64 / (p + g - inter) as f64;

    // Symmetric 95th-percentile surface distance via exact distance
    // transforms of the two surfaces.
    let surf_p = pred.surface();
    let surf_g = gt.surface();
    let mut on_p = vec![false; pred.h * pred.w];
    for &(y, x) in &surf_p {
        on_p[y * pred.w + x] = true;
    }
    let mut on_g = vec![false; gt.h * gt.w];
    for &(y, x) in &surf_g {
        on_g[y * gt.w + x] = true;
    }
    let dt_to_g = squared_distance_transform(pred.h, pred.w, &on_g);
    let dt_to_p = squared_distance_transform(pred.h, pred.w, &on_p);
    let mut dists = Vec::with_capacity(surf_p.len() + surf_g.len());
    for &(y, x) in &surf_p {
        dists.push(dt_to_g[y * pred.w + x].sqrt());
    }
    for &(y, x) in &surf_g {
        dists.push(dt_to_p[y * pred.w + x].sqrt());
    }
    let hd95 = percentile_95(dists);
    Ok(MaskMetrics { dice, iou, hd95 })
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct MetricMeans {
    pub dice: f64,
    pub hd: f64,
    pub iou: f64,
    pub n: usize,
}

/// Aggregated evaluation report: overall means plus a per-object breakdown.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricReport {
    pub overall: MetricMeans,
    pub per_object: BTreeMap<String, MetricMeans>,
}

#[derive(Debug, Default)]
pub struct MetricAccumulator {
    sums: BTreeMap<String, (f64, f64, f64, usize)>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, object_id: &str, m: MaskMetrics) {
        let e = self
            .sums
            .entry(object_id.to_string())
            .or_insert((0.0, 0.0, 0.0, 0));
        e.0 += m.dice;
        e.1 += m.hd95;
        e.2 += m.iou;
        e.3 += 1;
    }

    pub fn report(&self) -> MetricReport {
        let mut per_object = BTreeMap::new();
        let (mut d, mut h, mut i, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (obj, &(sd, sh, si, sn)) in &self.sums {
            per_object.insert(
                obj.clone(),
                MetricMeans {
                    dice: sd / sn as f64,
                    hd: sh / sn as f64,
                    iou: si / sn as f64,
                    n: sn,
                },
            );
            d += sd;
            h += sh;
            i += si;
            n += sn;
        }
        let overall = if n == 0 {
            MetricMeans::default()
        } else {
            MetricMeans {
                dice: d / n as f64,
                hd: h / n as f64,
                iou: i / n as f64,
                n,
            }
        };
        MetricReport {
            overall,
            per_object,
        }
    }
}
