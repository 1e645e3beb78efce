//! Prompt synthesis from ground-truth masks: positive/negative points,
//! shifted and tight boxes, the training prompt recipe, and per-object
//! background subsampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Result, SamctError};
use crate::ingest::SampleRecord;
use crate::mask::{interior_distance, Mask2D};

/// Pixel coordinates, x right / y down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

/// Axis-aligned box with ordered corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2 {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl Box2 {
    pub fn validate(&self) -> Result<()> {
        if !(self.x0 < self.x1 && self.y0 < self.y1) {
            return Err(SamctError::Data(format!(
                "box corners not ordered: ({}, {}, {}, {})",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Positive,
    Negative,
}

/// Geometric prompts for one sample, ready for the manual prompt encoder.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptInputs {
    pub points: Vec<(Point, PointKind)>,
    pub boxes: Vec<Box2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveMode {
    Random,
    Center,
}

/// Draw a positive point: uniformly over foreground, or the most interior
/// foreground pixel (deterministic) for center mode.
pub fn sample_positive_point(
    mask: &Mask2D,
    mode: PositiveMode,
    rng: &mut ChaCha12Rng,
) -> Result<Point> {
    let fg = mask.foreground();
    if fg.is_empty() {
        return Err(SamctError::Data("positive point: empty mask".into()));
    }
    let (y, x) = match mode {
        PositiveMode::Random => fg[rng.random_range(0..fg.len())],
        PositiveMode::Center => {
            let dist = interior_distance(mask);
            // row-major argmax; ties break to the first pixel
            *fg.iter()
                .max_by(|a, b| {
                    let da = dist[a.0 * mask.w + a.1];
                    let db = dist[b.0 * mask.w + b.1];
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
        }
    };
    Ok(Point { x: x as f32, y: y as f32 })
}

/// Uniformly drawn background pixel.
pub fn sample_negative_point(mask: &Mask2D, rng: &mut ChaCha12Rng) -> Result<Point> {
    let bg = mask.background();
    if bg.is_empty() {
        return Err(SamctError::Data("negative point: mask has no background".into()));
    }
    let (y, x) = bg[rng.random_range(0..bg.len())];
    Ok(Point { x: x as f32, y: y as f32 })
}

/// Tight bounding box of the mask foreground, inclusive pixel corners
/// (a full-image mask yields (0, 0, W-1, H-1)).
pub fn tight_bbox(mask: &Mask2D) -> Result<Box2> {
    let (x0, y0, x1, y1) = mask
        .tight_bbox()
        .ok_or_else(|| SamctError::Data("bounding box: empty mask".into()))?;
    Ok(Box2 {
        x0: x0 as f32,
        y0: y0 as f32,
        x1: x1 as f32,
        y1: y1 as f32,
    })
}

/// Tight box with each edge independently offset by up to `shift_fraction`
/// of the box width/height, clamped to the image and kept ordered.
pub fn shifted_bbox(mask: &Mask2D, shift_fraction: f64, rng: &mut ChaCha12Rng) -> Result<Box2> {
    let tight = tight_bbox(mask)?;
    let bw = (tight.x1 - tight.x0 + 1.0) as f64;
    let bh = (tight.y1 - tight.y0 + 1.0) as f64;
    let mut draw = |dim: f64| {
        if shift_fraction == 0.0 {
            0.0f32
        } else {
            rng.random_range(-shift_fraction * dim..=shift_fraction * dim) as f32
        }
    };
    let mut x0 = (tight.x0 + draw(bw)).clamp(0.0, mask.w as f32 - 1.0);
    let mut x1 = (tight.x1 + draw(bw)).clamp(0.0, mask.w as f32 - 1.0);
    let mut y0 = (tight.y0 + draw(bh)).clamp(0.0, mask.h as f32 - 1.0);
    let mut y1 = (tight.y1 + draw(bh)).clamp(0.0, mask.h as f32 - 1.0);
    if x0 > x1 {
        std::mem::swap(&mut x0, &mut x1);
    }
    if y0 > y1 {
        std::mem::swap(&mut y0, &mut y1);
    }
    Ok(Box2 { x0, y0, x1, y1 })
}

/// Training prompt recipe: with foreground, one random positive point, one
/// random negative point, and one shifted box; without foreground, two
/// random negative points.
pub fn build_training_prompts(
    mask: &Mask2D,
    has_foreground: bool,
    shift_fraction: f64,
    rng: &mut ChaCha12Rng,
) -> Result<PromptInputs> {
    let mut inputs = PromptInputs::default();
    if has_foreground {
        inputs
            .points
            .push((sample_positive_point(mask, PositiveMode::Random, rng)?, PointKind::Positive));
        inputs
            .points
            .push((sample_negative_point(mask, rng)?, PointKind::Negative));
        inputs.boxes.push(shifted_bbox(mask, shift_fraction, rng)?);
    } else {
        inputs
            .points
            .push((sample_negative_point(mask, rng)?, PointKind::Negative));
        inputs
            .points
            .push((sample_negative_point(mask, rng)?, PointKind::Negative));
    }
    Ok(inputs)
}

/// Per object, keep `min(ceil(fraction * n), cap)` of the full-background
/// records; foreground records pass through untouched. Order is preserved.
pub fn subsample_background(
    records: &[SampleRecord],
    fraction: f64,
    cap: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<SampleRecord> {
    use std::collections::{BTreeMap, HashSet};
    let mut by_object: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if !r.has_foreground {
            by_object.entry(r.object_id.as_str()).or_default().push(i);
        }
    }
    let mut keep: HashSet<usize> = (0..records.len())
        .filter(|&i| records[i].has_foreground)
        .collect();
    for (_, mut indices) in by_object {
        let n = indices.len();
        let quota = ((fraction * n as f64).ceil() as usize).min(cap).min(n);
        indices.shuffle(rng);
        keep.extend(indices.into_iter().take(quota));
    }
    records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Split;
    use crate::seed::derive_rng;

    fn mask_from(rows: &[&str]) -> Mask2D {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        Mask2D::new(h, w, data).unwrap()
    }

    #[test]
    fn singleton_mask_yields_that_pixel_in_both_modes() {
        let m = mask_from(&["....", "..#.", "....", "...."]);
        let mut rng = derive_rng(0, "t", &[]);
        let p = sample_positive_point(&m, PositiveMode::Random, &mut rng).unwrap();
        assert_eq!((p.x, p.y), (2.0, 1.0));
        let c = sample_positive_point(&m, PositiveMode::Center, &mut rng).unwrap();
        assert_eq!((c.x, c.y), (2.0, 1.0));
    }

    #[test]
    fn center_of_solid_square_is_geometric_center() {
        let m = mask_from(&[
            ".......", ".#####.", ".#####.", ".#####.", ".#####.", ".#####.", ".......",
        ]);
        let mut rng = derive_rng(0, "t", &[]);
        let c = sample_positive_point(&m, PositiveMode::Center, &mut rng).unwrap();
        assert_eq!((c.x, c.y), (3.0, 3.0));
    }

    #[test]
    fn empty_mask_rejected() {
        let m = Mask2D::zeros(4, 4);
        let mut rng = derive_rng(0, "t", &[]);
        assert!(sample_positive_point(&m, PositiveMode::Random, &mut rng).is_err());
        assert!(shifted_bbox(&m, 0.05, &mut rng).is_err());
    }

    #[test]
    fn full_mask_has_no_negative_point() {
        let m = Mask2D::new(3, 3, vec![true; 9]).unwrap();
        let mut rng = derive_rng(0, "t", &[]);
        assert!(sample_negative_point(&m, &mut rng).is_err());
    }

    #[test]
    fn random_positive_points_are_members_and_uniform() {
        // 5x5 block of 25 foreground pixels in a 10x10 image
        let mut m = Mask2D::zeros(10, 10);
        for y in 2..7 {
            for x in 3..8 {
                m.set(y, x, true);
            }
        }
        let mut rng = derive_rng(7, "uniformity", &[]);
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let p = sample_positive_point(&m, PositiveMode::Random, &mut rng).unwrap();
            assert!(m.get(p.y as usize, p.x as usize), "point outside mask");
            *counts.entry((p.y as usize, p.x as usize)).or_insert(0usize) += 1;
        }
        // chi-square against uniform over 25 cells; dof 24, p=0.001 cutoff 51.18
        let expected = draws as f64 / 25.0;
        let chi2: f64 = m
            .foreground()
            .iter()
            .map(|k| {
                let o = *counts.get(k).unwrap_or(&0) as f64;
                (o - expected).powi(2) / expected
            })
            .sum();
        assert!(chi2 < 51.18, "chi2 = {chi2}");
    }

    #[test]
    fn negative_points_never_hit_foreground() {
        let mut m = Mask2D::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                if (x + y) % 2 == 0 {
                    m.set(y, x, true);
                }
            }
        }
        let mut rng = derive_rng(3, "neg", &[]);
        for _ in 0..10_000 {
            let p = sample_negative_point(&m, &mut rng).unwrap();
            assert!(!m.get(p.y as usize, p.x as usize));
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = mask_from(&["##..", "##..", "....", "...."]);
        let a = build_training_prompts(&m, true, 0.05, &mut derive_rng(9, "p", &[4])).unwrap();
        let b = build_training_prompts(&m, true, 0.05, &mut derive_rng(9, "p", &[4])).unwrap();
        assert_eq!(a, b);
    }

    /// Scan-line tight-box oracle, independent of `Mask2D::tight_bbox`.
    fn tight_box_oracle(m: &Mask2D) -> (f32, f32, f32, f32) {
        let (mut x0, mut y0, mut x1, mut y1) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
        for y in 0..m.h {
            for x in 0..m.w {
                if m.get(y, x) {
                    x0 = x0.min(x as f32);
                    y0 = y0.min(y as f32);
                    x1 = x1.max(x as f32);
                    y1 = y1.max(y as f32);
                }
            }
        }
        (x0, y0, x1, y1)
    }

    #[test]
    fn zero_shift_returns_exact_tight_box() {
        let m = mask_from(&["........", "..###...", "..###...", "........"]);
        let mut rng = derive_rng(0, "box", &[]);
        let b = shifted_bbox(&m, 0.0, &mut rng).unwrap();
        let (x0, y0, x1, y1) = tight_box_oracle(&m);
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (x0, y0, x1, y1));
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (2.0, 1.0, 4.0, 2.0));
    }

    #[test]
    fn full_image_mask_tight_box_spans_image() {
        let m = Mask2D::new(6, 9, vec![true; 54]).unwrap();
        let b = tight_bbox(&m).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (0.0, 0.0, 8.0, 5.0));
    }

    #[test]
    fn shifted_edges_stay_within_fraction_of_tight() {
        let m = mask_from(&[
            "................",
            "....########....",
            "....########....",
            "....########....",
            "....########....",
            "....########....",
            "................",
        ]);
        let (x0, y0, x1, y1) = tight_box_oracle(&m);
        let (bw, bh) = ((x1 - x0 + 1.0) as f64, (y1 - y0 + 1.0) as f64);
        let s = 0.05;
        let mut rng = derive_rng(21, "box", &[]);
        for _ in 0..1000 {
            let b = shifted_bbox(&m, s, &mut rng).unwrap();
            b.validate().unwrap();
            assert!((b.x0 as f64 - x0 as f64).abs() <= s * bw + 1e-6);
            assert!((b.x1 as f64 - x1 as f64).abs() <= s * bw + 1e-6);
            assert!((b.y0 as f64 - y0 as f64).abs() <= s * bh + 1e-6);
            assert!((b.y1 as f64 - y1 as f64).abs() <= s * bh + 1e-6);
            assert!(b.x0 >= 0.0 && b.y0 >= 0.0);
            assert!(b.x1 <= m.w as f32 - 1.0 && b.y1 <= m.h as f32 - 1.0);
        }
    }

    #[test]
    fn training_prompt_recipe_counts() {
        let m = mask_from(&["##..", "....", "....", "...."]);
        let mut rng = derive_rng(5, "p", &[]);
        let fg = build_training_prompts(&m, true, 0.05, &mut rng).unwrap();
        assert_eq!(fg.points.len(), 2);
        assert_eq!(fg.boxes.len(), 1);
        assert_eq!(fg.points[0].1, PointKind::Positive);
        assert_eq!(fg.points[1].1, PointKind::Negative);

        let empty = Mask2D::zeros(4, 4);
        let bg = build_training_prompts(&empty, false, 0.05, &mut rng).unwrap();
        assert_eq!(bg.points.len(), 2);
        assert!(bg.points.iter().all(|(_, k)| *k == PointKind::Negative));
        assert!(bg.boxes.is_empty());
    }

    fn record(i: usize, obj: &str, fg: bool) -> SampleRecord {
        SampleRecord {
            image_path: format!("i{i}.png"),
            mask_path: fg.then(|| format!("m{i}.png")),
            object_id: obj.into(),
            has_foreground: fg,
            split: Split::Train,
        }
    }

    #[test]
    fn background_subsample_rules() {
        let mut records: Vec<SampleRecord> = (0..50).map(|i| record(i, "A1", false)).collect();
        records.extend((50..60).map(|i| record(i, "A1", true)));
        let mut rng = derive_rng(1, "bg", &[]);
        let out = subsample_background(&records, 0.10, 1000, &mut rng);
        assert_eq!(out.iter().filter(|r| !r.has_foreground).count(), 5);
        assert_eq!(out.iter().filter(|r| r.has_foreground).count(), 10);

        // cap applies
        let many: Vec<SampleRecord> = (0..20_000).map(|i| record(i, "A2", false)).collect();
        let out = subsample_background(&many, 0.10, 1000, &mut rng);
        assert_eq!(out.len(), 1000);

        // nothing to subsample
        let fg_only: Vec<SampleRecord> = (0..7).map(|i| record(i, "A3", true)).collect();
        let out = subsample_background(&fg_only, 0.10, 1000, &mut rng);
        assert_eq!(out.len(), 7);
    }
}
