//! CT ingestion: density windowing, slicing, mask screening, split
//! assignment, and the directory-level pipeline producing rasters plus a
//! manifest.

pub mod manifest;
pub mod volume;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use manifest::{Manifest, SampleRecord, Split};
pub use volume::{read_volume, write_npy, Volume3};

use crate::error::{Result, SamctError};
use crate::seed::derive_rng;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Bone,
    Tissue,
    Lung,
    Hemorrhage,
    Custom,
}

/// Hounsfield density window: values are clamped to [lower, upper] and
/// rescaled linearly to 8 bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityWindow {
    pub lower: f32,
    pub upper: f32,
    pub kind: WindowKind,
}

impl DensityWindow {
    pub fn bone() -> Self {
        Self { lower: -400.0, upper: 1100.0, kind: WindowKind::Bone }
    }
    pub fn tissue() -> Self {
        Self { lower: -200.0, upper: 300.0, kind: WindowKind::Tissue }
    }
    pub fn lung() -> Self {
        Self { lower: -1300.0, upper: 300.0, kind: WindowKind::Lung }
    }
    pub fn hemorrhage() -> Self {
        Self { lower: -20.0, upper: 100.0, kind: WindowKind::Hemorrhage }
    }
    /// Identity window for data that is already display-ranged.
    pub fn identity() -> Self {
        Self { lower: 0.0, upper: 255.0, kind: WindowKind::Custom }
    }

    pub fn custom(lower: f32, upper: f32) -> Result<Self> {
        let w = Self { lower, upper, kind: WindowKind::Custom };
        w.validate()?;
        Ok(w)
    }

    /// Parse `bone|tissue|lung|hemorrhage` or a custom `L,U` pair.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bone" => Ok(Self::bone()),
            "tissue" => Ok(Self::tissue()),
            "lung" => Ok(Self::lung()),
            "hemorrhage" => Ok(Self::hemorrhage()),
            other => {
                let parts: Vec<&str> = other.split(',').collect();
                if parts.len() != 2 {
                    return Err(SamctError::Config(format!(
                        "window: '{other}' is neither a preset nor 'L,U'"
                    )));
                }
                let lo: f32 = parts[0].trim().parse().map_err(|_| {
                    SamctError::Config(format!("window: bad lower bound '{}'", parts[0]))
                })?;
                let hi: f32 = parts[1].trim().parse().map_err(|_| {
                    SamctError::Config(format!("window: bad upper bound '{}'", parts[1]))
                })?;
                Self::custom(lo, hi)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) {
            return Err(SamctError::Config(format!(
                "window: degenerate bounds ({}, {})",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            WindowKind::Bone => "bone",
            WindowKind::Tissue => "tissue",
            WindowKind::Lung => "lung",
            WindowKind::Hemorrhage => "hemorrhage",
            WindowKind::Custom => "custom",
        }
    }
}

/// Clamp to the window and rescale linearly to [0, 255], rounding half up.
pub fn window_and_rescale(values: &[f32], window: &DensityWindow) -> Result<Vec<u8>> {
    window.validate()?;
    let span = (window.upper - window.lower) as f64;
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(SamctError::Data(format!("non-finite HU value {v}")));
            }
            let clamped = v.clamp(window.lower, window.upper) as f64;
            let scaled = (clamped - window.lower as f64) * 255.0 / span;
            Ok((scaled + 0.5).floor() as u8)
        })
        .collect()
}

/// Slicing plane for volume-to-2D conversion. Volumes are (z, y, x); the
/// coronal plane is axis 1 by convention, overridable via `Plane::Axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
    Axis(usize),
}

impl Plane {
    pub fn axis(&self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
            Plane::Axis(a) => *a,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => match other.parse::<usize>() {
                Ok(a) if a < 3 => Ok(Plane::Axis(a)),
                _ => Err(SamctError::Config(format!(
                    "plane: '{other}' is not axial|coronal|sagittal|0|1|2"
                ))),
            },
        }
    }
}

/// A 2D slice with its spatial provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
    pub index: usize,
}

/// Cut a volume into ordered 2D slices along the chosen plane.
pub fn slice_volume(vol: &Volume3, plane: Plane) -> Result<Vec<Slice2D>> {
    let axis = plane.axis();
    if axis > 2 {
        return Err(SamctError::Config(format!("plane: axis {axis} out of range")));
    }
    if vol.data.is_empty() {
        return Err(SamctError::Data("empty volume".into()));
    }
    let [d0, d1, d2] = vol.shape;
    let (n, h, w) = match axis {
        0 => (d0, d1, d2),
        1 => (d1, d0, d2),
        _ => (d2, d0, d1),
    };
    let mut slices = Vec::with_capacity(n);
    for i in 0..n {
        let mut data = Vec::with_capacity(h * w);
        for a in 0..h {
            for b in 0..w {
                let v = match axis {
                    0 => vol.get(i, a, b),
                    1 => vol.get(a, i, b),
                    _ => vol.get(a, b, i),
                };
                data.push(v);
            }
        }
        slices.push(Slice2D { h, w, data, index: i });
    }
    Ok(slices)
}

/// Restack slices into a volume along the same plane (inverse of
/// `slice_volume`; used by tests and kept next to it for symmetry).
pub fn restack(slices: &[Slice2D], plane: Plane) -> Result<Volume3> {
    let axis = plane.axis();
    let n = slices.len();
    if n == 0 {
        return Err(SamctError::Data("no slices to restack".into()));
    }
    let (h, w) = (slices[0].h, slices[0].w);
    let shape = match axis {
        0 => [n, h, w],
        1 => [h, n, w],
        _ => [h, w, n],
    };
    let mut data = vec![0f32; n * h * w];
    for (i, s) in slices.iter().enumerate() {
        for a in 0..h {
            for b in 0..w {
                let idx = match axis {
                    0 => (i * h + a) * w + b,
                    1 => (a * n + i) * w + b,
                    _ => (a * w + b) * n + i,
                };
                data[idx] = s.data[a * w + b];
            }
        }
    }
    Volume3::new(shape, data)
}

/// Label-granularity screening rules: each coarse object ID maps to the fine
/// IDs that replace it whenever any of them is present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScreenPolicy {
    pub replace: BTreeMap<String, Vec<String>>,
}

impl ScreenPolicy {
    pub fn validate(&self) -> Result<()> {
        let fine: HashSet<&String> = self.replace.values().flatten().collect();
        for coarse in self.replace.keys() {
            if fine.contains(coarse) {
                return Err(SamctError::Config(format!(
                    "screen policy: '{coarse}' is both dropped (coarse) and kept (fine)"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| SamctError::io(path.to_path_buf(), e))?;
        let policy: Self = serde_json::from_str(&text)
            .map_err(|e| SamctError::Config(format!("{}: {e}", path.display())))?;
        policy.validate()?;
        Ok(policy)
    }
}

/// Drop coarse-label records when fine replacements exist anywhere in the
/// record set, and deduplicate (image, object) pairs keeping the first.
pub fn screen_masks(records: Vec<SampleRecord>, policy: &ScreenPolicy) -> Result<Vec<SampleRecord>> {
    policy.validate()?;
    let present: HashSet<&str> = records.iter().map(|r| r.object_id.as_str()).collect();
    let dropped: HashSet<&String> = policy
        .replace
        .iter()
        .filter(|(_, fine)| fine.iter().any(|f| present.contains(f.as_str())))
        .map(|(coarse, _)| coarse)
        .collect();
    let mut seen = HashSet::new();
    Ok(records
        .into_iter()
        .filter(|r| !dropped.contains(&r.object_id))
        .filter(|r| seen.insert((r.image_path.clone(), r.object_id.clone())))
        .collect())
}

/// Deterministic floor-partition split assignment for `n` items: val and
/// test get `floor(n * ratio)` items each, the remainder goes to train.
pub fn assign_splits(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (rt, rv, rs) = ratios;
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(SamctError::Config(format!(
            "ratios: ({rt}, {rv}, {rs}) do not sum to 1"
        )));
    }
    if rt < 0.0 || rv < 0.0 || rs < 0.0 {
        return Err(SamctError::Config("ratios: must be non-negative".into()));
    }
    if n == 0 {
        return Err(SamctError::Data(
            "split: fewer records than splits requested (no records)".into(),
        ));
    }
    let n_val = (n as f64 * rv).floor() as usize;
    let n_test = (n as f64 * rs).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "split", &[]));
    let mut out = vec![Split::Train; n];
    for &i in order.iter().take(n_val) {
        out[i] = Split::Val;
    }
    for &i in order.iter().skip(n_val).take(n_test) {
        out[i] = Split::Test;
    }
    Ok(out)
}

/// Assign splits to records and assemble a manifest.
pub fn split_dataset(
    mut records: Vec<SampleRecord>,
    ratios: (f64, f64, f64),
    seed: u64,
    provenance: &str,
    windows: BTreeMap<String, DensityWindow>,
) -> Result<Manifest> {
    let splits = assign_splits(records.len(), ratios, seed)?;
    for (r, s) in records.iter_mut().zip(splits) {
        r.split = s;
    }
    let mut m = Manifest::new(provenance, seed);
    m.windows = windows;
    m.records = records;
    m.validate()?;
    Ok(m)
}

/// Per-label entry of `objects.json` in a volume dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    /// Preset name or "L,U"; falls back to the CLI-wide window.
    #[serde(default)]
    pub window: Option<String>,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub input: PathBuf,
    pub output: PathBuf,
    pub window: DensityWindow,
    pub plane: Plane,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub screen_policy: Option<ScreenPolicy>,
    pub provenance: String,
}

fn write_gray_png(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| SamctError::io(dir.to_path_buf(), e))?;
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, data.to_vec())
        .ok_or_else(|| SamctError::Data("raster buffer mismatch".into()))?;
    img.save(path)
        .map_err(|e| SamctError::Data(format!("{}: {e}", path.display())))
}

/// Ingest a dataset directory into rasters plus a manifest.
///
/// Two layouts are supported:
/// - volumes: `volumes/*.{nii,nii.gz,npy}` with matching `labels/*` integer
///   volumes and an `objects.json` mapping label values to object IDs;
/// - already-2D data: `images/*.png` with `masks/<object_id>/*.png`, passed
///   through without windowing.
pub fn run_ingest(opts: &IngestOptions) -> Result<Manifest> {
    let volumes_dir = opts.input.join("volumes");
    let images_dir = opts.input.join("images");
    let mut records = Vec::new();
    let mut windows = BTreeMap::new();

    if volumes_dir.is_dir() {
        ingest_volumes(opts, &volumes_dir, &mut records, &mut windows)?;
    } else if images_dir.is_dir() {
        ingest_rasters(opts, &images_dir, &mut records, &mut windows)?;
    } else {
        return Err(SamctError::Data(format!(
            "{}: expected a volumes/ or images/ subdirectory",
            opts.input.display()
        )));
    }

    let policy = opts.screen_policy.clone().unwrap_or_default();
    let records = screen_masks(records, &policy)?;
    let mut manifest = split_dataset(records, opts.ratios, opts.seed, &opts.provenance, windows)?;
    manifest.root = opts.output.clone();
    let path = opts.output.join("manifest.jsonl");
    manifest.save(&path)?;
    Ok(manifest)
}

fn ingest_volumes(
    opts: &IngestOptions,
    volumes_dir: &Path,
    records: &mut Vec<SampleRecord>,
    windows: &mut BTreeMap<String, DensityWindow>,
) -> Result<()> {
    let objects_path = opts.input.join("objects.json");
    let text = std::fs::read_to_string(&objects_path)
        .map_err(|e| SamctError::io(objects_path.clone(), e))?;
    let objects: BTreeMap<String, ObjectSpec> = serde_json::from_str(&text)
        .map_err(|e| SamctError::Config(format!("{}: {e}", objects_path.display())))?;
    let mut label_map: BTreeMap<i64, (String, DensityWindow)> = BTreeMap::new();
    for (label, spec) in &objects {
        let value: i64 = label.parse().map_err(|_| {
            SamctError::Config(format!("objects.json: label '{label}' is not an integer"))
        })?;
        let window = match &spec.window {
            Some(w) => DensityWindow::parse(w)?,
            None => opts.window,
        };
        label_map.insert(value, (spec.id.clone(), window));
        windows.insert(spec.id.clone(), window);
    }

    let mut volume_files: Vec<PathBuf> = std::fs::read_dir(volumes_dir)
        .map_err(|e| SamctError::io(volumes_dir.to_path_buf(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    volume_files.sort();
    if volume_files.is_empty() {
        return Err(SamctError::Data(format!(
            "{}: no volume files",
            volumes_dir.display()
        )));
    }

    for vol_path in &volume_files {
        let stem = volume_stem(vol_path);
        let label_path = find_matching(&opts.input.join("labels"), &stem)?;
        let vol = read_volume(vol_path)?;
        let labels = read_volume(&label_path)?;
        if vol.shape != labels.shape {
            return Err(SamctError::Data(format!(
                "{}: label shape {:?} does not match volume {:?}",
                label_path.display(),
                labels.shape,
                vol.shape
            )));
        }
        let hu_slices = slice_volume(&vol, opts.plane)?;
        let label_slices = slice_volume(&labels, opts.plane)?;
        for (hu, lab) in hu_slices.iter().zip(&label_slices) {
            for (label_value, (object_id, window)) in &label_map {
                let image_rel = format!("images/{stem}_{:04}_{}.png", hu.index, window.name());
                let image_abs = opts.output.join(&image_rel);
                if !image_abs.exists() {
                    let bytes = window_and_rescale(&hu.data, window)?;
                    write_gray_png(&image_abs, hu.w, hu.h, &bytes)?;
                }
                let mask: Vec<bool> = lab
                    .data
                    .iter()
                    .map(|&v| (v as i64) == *label_value)
                    .collect();
                let has_fg = mask.iter().any(|&b| b);
                let mask_rel = if has_fg {
                    let rel = format!("masks/{object_id}/{stem}_{:04}.png", hu.index);
                    let bytes: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
                    write_gray_png(&opts.output.join(&rel), hu.w, hu.h, &bytes)?;
                    Some(rel)
                } else {
                    None
                };
                records.push(SampleRecord {
                    image_path: image_rel,
                    mask_path: mask_rel,
                    object_id: object_id.clone(),
                    has_foreground: has_fg,
                    split: Split::Train,
                });
            }
        }
    }
    Ok(())
}

fn ingest_rasters(
    opts: &IngestOptions,
    images_dir: &Path,
    records: &mut Vec<SampleRecord>,
    windows: &mut BTreeMap<String, DensityWindow>,
) -> Result<()> {
    let masks_dir = opts.input.join("masks");
    let mut object_dirs: Vec<PathBuf> = std::fs::read_dir(&masks_dir)
        .map_err(|e| SamctError::io(masks_dir.clone(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    object_dirs.sort();
    let mut image_files: Vec<PathBuf> = std::fs::read_dir(images_dir)
        .map_err(|e| SamctError::io(images_dir.to_path_buf(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    image_files.sort();
    if image_files.is_empty() {
        return Err(SamctError::Data(format!(
            "{}: no png images",
            images_dir.display()
        )));
    }
    for img_path in &image_files {
        let file_name = img_path.file_name().unwrap().to_string_lossy().to_string();
        let image_rel = format!("images/{file_name}");
        std::fs::create_dir_all(opts.output.join("images"))
            .map_err(|e| SamctError::io(opts.output.clone(), e))?;
        std::fs::copy(img_path, opts.output.join(&image_rel))
            .map_err(|e| SamctError::io(img_path.to_path_buf(), e))?;
        for obj_dir in &object_dirs {
            let object_id = obj_dir.file_name().unwrap().to_string_lossy().to_string();
            // 2D-native data is assumed already display-ranged.
            windows.insert(object_id.clone(), DensityWindow::identity());
            let mask_src = obj_dir.join(&file_name);
            let (mask_rel, has_fg) = if mask_src.exists() {
                let img = image::open(&mask_src)
                    .map_err(|e| SamctError::Data(format!("{}: {e}", mask_src.display())))?
                    .into_luma8();
                let has_fg = img.pixels().any(|p| p.0[0] > 0);
                if has_fg {
                    let rel = format!("masks/{object_id}/{file_name}");
                    std::fs::create_dir_all(opts.output.join("masks").join(&object_id))
                        .map_err(|e| SamctError::io(opts.output.clone(), e))?;
                    std::fs::copy(&mask_src, opts.output.join(&rel))
                        .map_err(|e| SamctError::io(mask_src.clone(), e))?;
                    (Some(rel), true)
                } else {
                    (None, false)
                }
            } else {
                (None, false)
            };
            records.push(SampleRecord {
                image_path: image_rel.clone(),
                mask_path: mask_rel,
                object_id,
                has_foreground: has_fg,
                split: Split::Train,
            });
        }
    }
    Ok(())
}

fn volume_stem(path: &Path) -> String {
    let name = path.file_name().unwrap().to_string_lossy();
    name.trim_end_matches(".nii.gz")
        .trim_end_matches(".nii")
        .trim_end_matches(".npy")
        .to_string()
}

fn find_matching(dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["npy", "nii", "nii.gz"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(SamctError::Data(format!(
        "{}: no label volume for '{stem}'",
        dir.display()
    )))
}
