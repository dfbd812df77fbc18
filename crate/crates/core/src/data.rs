//! CT volume ingestion, slice corpora on disk, and batch assembly.
//!
//! On disk a corpus is a pair of directories of 8-bit PNGs:
//!
//! ```text
//! images/image_<subject>_<slice>.png
//! masks/mask_<subject>_<slice>.png
//! ```
//!
//! Masks are written as 0/255 and binarized at 127 when read back.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma};
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold applied to 8-bit mask PNGs.
pub const MASK_THRESHOLD: u8 = 127;
/// Smallest rectangle side drawn by the synthetic generator.
pub const MIN_RECT_SIDE: usize = 4;

/// A 3D intensity volume in subject-native units, indexed `[row, col, slice]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub subject_id: String,
}

impl Volume {
    pub fn new(voxels: Array3<f32>, subject_id: impl Into<String>) -> Result<Self> {
        if voxels.dim().2 == 0 {
            return Err(Error::InvalidArgument("volume has no slices".into()));
        }
        Ok(Self {
            voxels,
            subject_id: subject_id.into(),
        })
    }

    /// `(H, W, D)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }
}

/// One 2D grayscale slice with an optional binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceSample {
    pub image: Array2<u8>,
    /// Values in {0, 1}.
    pub mask: Option<Array2<u8>>,
    pub subject_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn id(&self) -> String {
        format!("{}_{}", self.subject_id, self.slice_index)
    }

    pub fn image_file_name(&self) -> String {
        format!("image_{}_{}.png", self.subject_id, self.slice_index)
    }

    pub fn mask_file_name(&self) -> String {
        format!("mask_{}_{}.png", self.subject_id, self.slice_index)
    }
}

/// Strips `.nii` / `.nii.gz` from a file name.
pub fn subject_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .to_string()
}

/// Reads a NIfTI-1 volume. A missing file yields `Ok(None)` after a warning so
/// that batch preprocessing can skip the subject; an unreadable file is an error.
pub fn load_volume(path: &Path) -> Result<Option<Volume>> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

    if !path.exists() {
        log::warn!("volume {} not found; skipping subject", path.display());
        return Ok(None);
    }
    let nifti_err = |message: String| Error::Nifti {
        path: path.to_path_buf(),
        message,
    };
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| nifti_err(e.to_string()))?;
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| nifti_err(e.to_string()))?;
    let arr = match arr.ndim() {
        2 => arr.insert_axis(ndarray::Axis(2)),
        3 => arr,
        // 4D with a singleton time axis is common in exported label maps.
        4 if arr.shape()[3] == 1 => arr.index_axis_move(ndarray::Axis(3), 0),
        n => return Err(nifti_err(format!("expected a 3D volume, found {n} dimensions"))),
    };
    let voxels = arr
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| nifti_err(e.to_string()))?;
    Volume::new(voxels, subject_from_path(path)).map(Some)
}

/// Writes a volume as an uncompressed (or gzip, by extension) NIfTI-1 file.
pub fn save_volume(voxels: &Array3<f32>, path: &Path) -> Result<()> {
    nifti::writer::WriterOptions::new(path)
        .write_nifti(voxels)
        .map_err(|e| Error::Nifti {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// `round_half_up(v · 255 / max)` clamped to `[0, 255]`; all-zero volumes map to 0.
fn scale_to_u8(v: f32, multiplier: f64) -> u8 {
    let scaled = (v as f64 * multiplier + 0.5).floor();
    scaled.clamp(0.0, 255.0) as u8
}

/// Intensity multiplier `255 / max`, or 0 when the volume has no positive voxel.
pub fn intensity_multiplier(vol: &Volume) -> f64 {
    let max = vol.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max > 0.0 && max.is_finite() {
        255.0 / max as f64
    } else {
        log::warn!(
            "volume {} has no positive voxel; emitting all-zero slices",
            vol.subject_id
        );
        0.0
    }
}

/// Splits a volume along its last axis into 8-bit slices.
pub fn volume_to_slices(vol: &Volume) -> Vec<SliceSample> {
    let multiplier = intensity_multiplier(vol);
    let (_, _, depth) = vol.shape();
    (0..depth)
        .map(|k| SliceSample {
            image: vol.voxels.slice(s![.., .., k]).mapv(|v| scale_to_u8(v, multiplier)),
            mask: None,
            subject_id: vol.subject_id.clone(),
            slice_index: k,
        })
        .collect()
}

/// Binary masks (label > 0) for each slice of a label volume.
pub fn label_volume_to_masks(labels: &Volume) -> Vec<Array2<u8>> {
    let (_, _, depth) = labels.shape();
    (0..depth)
        .map(|k| labels.voxels.slice(s![.., .., k]).mapv(|v| u8::from(v > 0.0)))
        .collect()
}

fn to_gray(a: &Array2<u8>) -> GrayImage {
    let (h, w) = a.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([a[[y as usize, x as usize]]]))
}

fn from_gray(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0])
}

fn read_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(from_gray(&img.to_luma8()))
}

fn write_png(a: &Array2<u8>, path: &Path) -> Result<()> {
    to_gray(a).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes samples in the `images/` + `masks/` layout. Returns written image paths.
pub fn write_slice_corpus(samples: &[SliceSample], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut written = Vec::with_capacity(samples.len());
    for s in samples {
        let p = images.join(s.image_file_name());
        write_png(&s.image, &p)?;
        written.push(p);
        if let Some(mask) = &s.mask {
            fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
            write_png(&mask.mapv(|v| if v > 0 { 255 } else { 0 }), &masks.join(s.mask_file_name()))?;
        }
    }
    Ok(written)
}

/// Parses `<prefix>_<subject>_<slice>.png`; the subject may itself contain underscores.
pub fn parse_slice_name(file_name: &str, prefix: &str) -> Option<(String, usize)> {
    let stem = file_name.strip_suffix(".png")?;
    let rest = stem.strip_prefix(prefix)?.strip_prefix('_')?;
    let (subject, slice) = rest.rsplit_once('_')?;
    if subject.is_empty() {
        return None;
    }
    Some((subject.to_string(), slice.parse().ok()?))
}

fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    !name.starts_with('.') && (name.ends_with(".nii") || name.ends_with(".nii.gz"))
}

fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_nifti(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Counts produced by [`preprocess_volumes`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PrepSummary {
    pub subjects: usize,
    pub skipped: usize,
    pub slices: usize,
    pub masks: usize,
}

/// Slices every volume in `image_dir` (with the same-named label volume from
/// `label_dir`, if given) and writes the PNG corpus to `out_dir`. Subjects are
/// subsampled by `fraction`; a subject whose label volume is missing is skipped.
pub fn preprocess_split(
    image_dir: &Path,
    label_dir: Option<&Path>,
    out_dir: &Path,
    fraction: f64,
    seed: u64,
) -> Result<PrepSummary> {
    validate_fraction(fraction)?;
    let paths = list_volumes(image_dir)?;
    let subjects: Vec<String> = paths.iter().map(|p| subject_from_path(p)).collect();
    let keep = select_subjects(&subjects, fraction, seed);
    let mut summary = PrepSummary::default();
    fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;
    for path in paths.iter().filter(|p| keep.contains(&subject_from_path(p))) {
        let Some(vol) = load_volume(path)? else {
            summary.skipped += 1;
            continue;
        };
        let mut slices = volume_to_slices(&vol);
        if let Some(dir) = label_dir {
            let Some(labels) = load_volume(&dir.join(path.file_name().expect("listed files have names")))? else {
                summary.skipped += 1;
                continue;
            };
            if labels.shape() != vol.shape() {
                return Err(Error::Shape(format!(
                    "label volume for {} is {:?}, image is {:?}",
                    vol.subject_id,
                    labels.shape(),
                    vol.shape()
                )));
            }
            for (s, m) in slices.iter_mut().zip(label_volume_to_masks(&labels)) {
                s.mask = Some(m);
            }
            summary.masks += slices.len();
        }
        summary.slices += write_slice_corpus(&slices, out_dir)?.len();
        summary.subjects += 1;
    }
    Ok(summary)
}

/// Converts a directory of NIfTI volumes into PNG slice corpora.
///
/// A Decathlon-style tree (`imagesTr/`, `labelsTr/`, `imagesTs/`, optional
/// `labelsTs/`) becomes `out/train` and `out/test`. Otherwise every volume in
/// `in_dir` is sliced into `out/`, with masks from `in_dir/labels/` when
/// that directory exists.
pub fn preprocess_volumes(in_dir: &Path, out_dir: &Path, fraction: f64, seed: u64) -> Result<PrepSummary> {
    let optional = |name: &str| Some(in_dir.join(name)).filter(|p| p.is_dir());
    let mut total = PrepSummary::default();
    let mut add = |s: PrepSummary| {
        total.subjects += s.subjects;
        total.skipped += s.skipped;
        total.slices += s.slices;
        total.masks += s.masks;
    };
    if let Some(tr) = optional("imagesTr") {
        add(preprocess_split(&tr, optional("labelsTr").as_deref(), &out_dir.join("train"), fraction, seed)?);
        if let Some(ts) = optional("imagesTs") {
            add(preprocess_split(&ts, optional("labelsTs").as_deref(), &out_dir.join("test"), 1.0, seed)?);
        }
    } else {
        add(preprocess_split(in_dir, optional("labels").as_deref(), out_dir, fraction, seed)?);
    }
    if total.slices == 0 {
        return Err(Error::EmptyDataset(format!("no NIfTI volumes produced slices under {}", in_dir.display())));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// What to load from a slice corpus on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Corpus root. If `<source_dir>/<split>` exists it is used, otherwise the root itself.
    pub source_dir: PathBuf,
    pub split: Split,
    /// Fraction of subjects kept, in (0, 1].
    pub fraction: f64,
    pub seed: u64,
    /// `(H, W)` after resizing.
    pub image_size: (usize, usize),
    /// Require a mask for every image.
    pub labeled: bool,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        validate_fraction(self.fraction)?;
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size must be positive, got {:?}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn root(&self) -> PathBuf {
        let split_dir = self.source_dir.join(self.split.dir_name());
        if split_dir.join("images").is_dir() {
            split_dir
        } else {
            self.source_dir.clone()
        }
    }
}

/// `(H, W)` of the first image (by file name) in a corpus.
pub fn probe_image_size(source_dir: &Path, split: Split) -> Result<(usize, usize)> {
    let spec = DatasetSpec {
        source_dir: source_dir.to_path_buf(),
        split,
        fraction: 1.0,
        seed: 0,
        image_size: (1, 1),
        labeled: false,
    };
    let image_dir = spec.root().join("images");
    let mut names: Vec<PathBuf> = fs::read_dir(&image_dir)
        .map_err(|e| Error::io(&image_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| parse_slice_name(&n.to_string_lossy(), "image"))
                .is_some()
        })
        .collect();
    names.sort();
    let first = names
        .first()
        .ok_or_else(|| Error::EmptyDataset(format!("no slices found in {}", image_dir.display())))?;
    Ok(read_png(first)?.dim())
}

pub fn validate_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("fraction must lie in (0, 1], got {fraction}")))
    }
}

/// Ordered collection of slices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SliceSample>,
}

impl Dataset {
    pub fn new(samples: Vec<SliceSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.mask.is_some())
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for s in &self.samples {
            if seen.last() != Some(&s.subject_id) && !seen.contains(&s.subject_id) {
                seen.push(s.subject_id.clone());
            }
        }
        seen
    }

    /// Image size `(H, W)` of the first sample.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.image.dim())
    }

    /// Keeps whole subjects. See [`select_subjects`].
    pub fn subset_fraction(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        validate_fraction(fraction)?;
        let keep = select_subjects(&self.subjects(), fraction, seed);
        Ok(self.filter_subjects(|s| keep.contains(s)))
    }

    /// Holds out `val_fraction` of the subjects (at least one when there are
    /// two or more subjects). Returns `(train, val)`.
    pub fn split_validation(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in [0, 1), got {val_fraction}"
            )));
        }
        let subjects = self.subjects();
        if val_fraction == 0.0 || subjects.len() < 2 {
            return Ok((self.clone(), Dataset::default()));
        }
        let n_val = ((subjects.len() as f64 * val_fraction).round() as usize).clamp(1, subjects.len() - 1);
        let mut order = subjects.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5A17_DA7A));
        let val: Vec<String> = order[..n_val].to_vec();
        Ok((
            self.filter_subjects(|s| !val.contains(s)),
            self.filter_subjects(|s| val.contains(s)),
        ))
    }

    fn filter_subjects(&self, keep: impl Fn(&String) -> bool) -> Dataset {
        Dataset::new(
            self.samples
                .iter()
                .filter(|s| keep(&s.subject_id))
                .cloned()
                .collect(),
        )
    }

    /// Images as `(B, 3, H, W)` in [0, 1] (grayscale replicated to three
    /// channels) and masks as `(B, 1, H, W)` when every selected sample has one.
    pub fn batch(&self, indices: &[usize], device: &Device) -> Result<(Tensor, Option<Tensor>)> {
        let Some(&first) = indices.first() else {
            return Err(Error::EmptyDataset("empty batch".into()));
        };
        let (h, w) = self.samples[first].image.dim();
        let b = indices.len();
        let mut img = Vec::with_capacity(b * 3 * h * w);
        let mut msk = Vec::with_capacity(b * h * w);
        let mut all_masks = true;
        for &i in indices {
            let s = &self.samples[i];
            if s.image.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "sample {} is {:?}, batch expects {:?}",
                    s.id(),
                    s.image.dim(),
                    (h, w)
                )));
            }
            let plane: Vec<f32> = s.image.iter().map(|&v| v as f32 / 255.0).collect();
            for _ in 0..3 {
                img.extend_from_slice(&plane);
            }
            match &s.mask {
                Some(m) => msk.extend(m.iter().map(|&v| v as f32)),
                None => all_masks = false,
            }
        }
        let images = Tensor::from_vec(img, (b, 3, h, w), device)?;
        let masks = if all_masks {
            Some(Tensor::from_vec(msk, (b, 1, h, w), device)?)
        } else {
            None
        };
        Ok((images, masks))
    }
}

/// Seeded choice of `max(1, round(fraction · n))` subjects: the subject list
/// is shuffled with ChaCha8 and the head of the permutation is kept.
pub fn select_subjects(subjects: &[String], fraction: f64, seed: u64) -> Vec<String> {
    if fraction >= 1.0 {
        return subjects.to_vec();
    }
    let n_keep = ((subjects.len() as f64 * fraction).round() as usize).clamp(1, subjects.len().max(1));
    let mut order = subjects.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(n_keep);
    order
}

/// Batch index order for one epoch: a seeded permutation split into chunks.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Sequential (unshuffled) batches.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

fn resize(a: &Array2<u8>, size: (usize, usize), filter: FilterType) -> Array2<u8> {
    if a.dim() == size {
        return a.clone();
    }
    let img = image::imageops::resize(&to_gray(a), size.1 as u32, size.0 as u32, filter);
    from_gray(&img)
}

/// Loads a PNG slice corpus. Subjects are sorted by id and slices by index;
/// the fraction is applied per subject.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = spec.root();
    let image_dir = root.join("images");
    let mask_dir = root.join("masks");
    let entries = fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut by_subject: BTreeMap<String, Vec<(usize, PathBuf)>> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&image_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some((subject, slice)) = parse_slice_name(&name, "image") else {
            log::debug!("ignoring {name}: not image_<subject>_<slice>.png");
            continue;
        };
        by_subject.entry(subject).or_default().push((slice, entry.path()));
    }
    if by_subject.is_empty() {
        return Err(Error::EmptyDataset(format!("no slices found in {}", image_dir.display())));
    }

    let subjects: Vec<String> = by_subject.keys().cloned().collect();
    let keep = select_subjects(&subjects, spec.fraction, spec.seed);

    let mut samples = Vec::new();
    for subject in subjects.iter().filter(|s| keep.contains(s)) {
        let mut slices = by_subject[subject].clone();
        slices.sort_by_key(|(i, _)| *i);
        for (slice_index, image_path) in slices {
            let mask_path = mask_dir.join(format!("mask_{subject}_{slice_index}.png"));
            let mask = if mask_path.exists() {
                let raw = read_png(&mask_path)?;
                let binary = raw.mapv(|v| u8::from(v > MASK_THRESHOLD));
                Some(resize(&binary, spec.image_size, FilterType::Nearest))
            } else if spec.labeled {
                return Err(Error::OrphanImage(image_path));
            } else {
                None
            };
            let image = resize(&read_png(&image_path)?, spec.image_size, FilterType::Triangle);
            samples.push(SliceSample {
                image,
                mask,
                subject_id: subject.clone(),
                slice_index,
            });
        }
    }
    Ok(Dataset::new(samples))
}

/// Axis-aligned rectangle `[top, top + height) × [left, left + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }
}

/// Desk-scale corpus: one bright rectangle on a dark noisy background per image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// The rectangle drawn into each sample, in sample order.
    pub rects: Vec<Rect>,
}

impl SyntheticCorpus {
    pub fn generate(n: usize, size: (usize, usize), seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("synthetic dataset needs n >= 1".into()));
        }
        let (h, w) = size;
        if h < MIN_RECT_SIDE || w < MIN_RECT_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image size {h}x{w} is smaller than the minimum rectangle {MIN_RECT_SIDE}x{MIN_RECT_SIDE}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(n);
        let mut rects = Vec::with_capacity(n);
        for i in 0..n {
            let rh = rng.gen_range(MIN_RECT_SIDE..=(h / 2).max(MIN_RECT_SIDE));
            let rw = rng.gen_range(MIN_RECT_SIDE..=(w / 2).max(MIN_RECT_SIDE));
            let rect = Rect {
                top: rng.gen_range(0..=h - rh),
                left: rng.gen_range(0..=w - rw),
                height: rh,
                width: rw,
            };
            let fg: u8 = rng.gen_range(140..=230);
            let mut image = Array2::<u8>::zeros((h, w));
            let mut mask = Array2::<u8>::zeros((h, w));
            for ((r, c), px) in image.indexed_iter_mut() {
                let noise: u8 = rng.gen_range(0..60);
                if rect.contains(r, c) {
                    *px = fg.saturating_sub(noise / 2);
                    mask[[r, c]] = 1;
                } else {
                    *px = 10 + noise;
                }
            }
            samples.push(SliceSample {
                image,
                mask: Some(mask),
                subject_id: format!("syn{i:04}"),
                slice_index: 0,
            });
            rects.push(rect);
        }
        Ok(Self {
            dataset: Dataset::new(samples),
            rects,
        })
    }
}

/// Synthetic labeled dataset; each sample is its own subject.
pub fn make_synthetic_dataset(n: usize, size: (usize, usize), seed: u64) -> Result<Dataset> {
    Ok(SyntheticCorpus::generate(n, size, seed)?.dataset)
}
