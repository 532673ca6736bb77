//! Dataset handling: label encoding, oversampling, stratified splits, image
//! decoding and resizing, batching, and a synthetic lesion generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ShapeDisplay, Tensor};
use crate::ModelRng;

/// Where a sample's pixels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    /// Decoded `[h, w, c]` image with values in `[0, 1]`.
    Memory(Arc<Tensor<f32>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<(ImageSource, usize)>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for &(_, label) in &self.samples {
            counts[label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|&(_, l)| l).collect()
    }

    fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_names.len()];
        for (i, &(_, label)) in self.samples.iter().enumerate() {
            by_class[label].push(i);
        }
        by_class
    }
}

/// Sorted, de-duplicated class names and the name → index map.
pub fn encode_labels<S: AsRef<str>>(
    names: &[S],
) -> Result<(Vec<String>, BTreeMap<String, usize>)> {
    if names.is_empty() {
        return Err(Error::Input("no labels to encode".into()));
    }
    let mut classes: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
    classes.sort();
    classes.dedup();
    let index = classes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    Ok((classes, index))
}

/// Duplicates randomly chosen samples of each minority class until every
/// class matches the largest one. Original samples keep their order and the
/// draws are appended class by class.
pub fn oversample(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let by_class = ds.indices_by_class();
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!(
            "class `{}` has no samples to oversample",
            ds.class_names[c]
        )));
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut out = ds.clone();
    for members in &by_class {
        for _ in members.len()..target {
            let pick = members[rng.random_range(0..members.len())];
            out.samples.push(ds.samples[pick].clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let spec = SplitSpec { train, val, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("split.train", self.train), ("split.val", self.val), ("split.test", self.test)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, format!("{v} not in (0, 1)")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`.
/// Remainder ties go to the earlier bucket.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class seeded shuffle followed by largest-remainder apportionment.
/// Each split lists its samples class by class.
pub fn stratified_split(
    ds: &LabeledDataset,
    spec: SplitSpec,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let by_class = ds.indices_by_class();
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Input(format!(
                "class `{}` has {} samples; a three-way split needs at least 3",
                ds.class_names[c],
                members.len()
            )));
        }
    }
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut members in by_class {
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), &spec.fractions());
        let mut rest = members.as_slice();
        for (part, n) in parts.iter_mut().zip(counts) {
            let (head, tail) = rest.split_at(n);
            part.extend_from_slice(head);
            rest = tail;
        }
    }
    let [train, val, test] = parts;
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

/// Decodes a PNG or JPEG into `[h, w, channels]` with values `/255`.
/// `channels` is 1 (luma) or 3 (RGB, grayscale replicated).
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        1 => img.into_luma8().into_raw(),
        3 => img.into_rgb8().into_raw(),
        c => return Err(Error::config("input_c", format!("images need 1 or 3 channels, got {c}"))),
    };
    let data = raw.into_iter().map(|v| f32::from(v) / 255.0).collect();
    Tensor::new(vec![h, w, channels], data)
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Source coordinate pair and weight for one output index, half-pixel centers.
fn sample_axis(out: usize, len_in: usize, len_out: usize) -> (usize, usize, f32) {
    let scale = len_in as f64 / len_out as f64;
    let src = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(len_in - 1);
    (lo, hi, (src - lo as f64) as f32)
}

/// Bilinear resize of an `[h, w, c]` image.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::dim(
            "resize_bilinear",
            format!("expected [h,w,c], got [{}]", ShapeDisplay(img.shape())),
        ));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize_bilinear", "output extents must be >= 1"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let px = |y: usize, x: usize, ch: usize| src[(y * w + x) * c + ch];
    let cols: Vec<_> = (0..out_w).map(|x| sample_axis(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, ty) = sample_axis(y, h, out_h);
        for &(x0, x1, tx) in &cols {
            for ch in 0..c {
                let top = lerp(px(y0, x0, ch), px(y0, x1, ch), tx);
                let bottom = lerp(px(y1, x0, ch), px(y1, x1, ch), tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Target geometry every sample is brought to before batching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

pub fn load_sample(source: &ImageSource, spec: ImageSpec) -> Result<Tensor<f32>> {
    let img = match source {
        ImageSource::File(path) => load_image(path, spec.channels)?,
        ImageSource::Memory(t) => {
            if t.rank() != 3 || t.shape()[2] != spec.channels {
                return Err(Error::dim(
                    "load_sample",
                    format!(
                        "in-memory image [{}] vs {} channels",
                        ShapeDisplay(t.shape()),
                        spec.channels
                    ),
                ));
            }
            (**t).clone()
        }
    };
    resize_bilinear(&img, spec.height, spec.width)
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, h, w, c]`
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Iterator over consecutive batches of a dataset in a fixed order.
/// The last batch may be smaller.
pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    spec: ImageSpec,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

/// Batches in dataset order, or in a Fisher–Yates permutation drawn from `rng`.
pub fn batches<'a>(
    ds: &'a LabeledDataset,
    spec: ImageSpec,
    batch_size: usize,
    shuffle: Option<&mut ModelRng>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    Ok(Batches {
        ds,
        spec,
        order,
        batch_size,
        next: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let picks = &self.order[self.next..end];
        self.next = end;
        let images: Result<Vec<_>> = picks
            .par_iter()
            .map(|&i| load_sample(&self.ds.samples[i].0, self.spec))
            .collect();
        let labels = picks.iter().map(|&i| self.ds.samples[i].1).collect();
        Some(images.and_then(|imgs| Ok(Batch { x: Tensor::stack(&imgs)?, labels })))
    }
}

/// Names used for the two synthetic classes.
pub const SYNTHETIC_CLASSES: [&str; 2] = ["healthy", "tumor"];

/// Grayscale `h × w` images: class 0 is noise around 0.2, class 1 adds a
/// bright rotated ellipse. All `n_per_class` class-0 samples come first.
pub fn make_synthetic(n_per_class: usize, h: usize, w: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 || h == 0 || w == 0 {
        return Err(Error::config("synthetic", "sample count and extents must be >= 1"));
    }
    let mut rng = ModelRng::seed_from_u64(seed);
    let noise = Normal::new(0.2f64, 0.1).expect("valid normal");
    let mut samples = Vec::with_capacity(2 * n_per_class);
    for label in 0..2 {
        for _ in 0..n_per_class {
            let mut px: Vec<f64> = (0..h * w).map(|_| noise.sample(&mut rng)).collect();
            if label == 1 {
                let side = h.min(w) as f64;
                let cy = rng.random_range(0.25..0.75) * h as f64;
                let cx = rng.random_range(0.25..0.75) * w as f64;
                let ry = rng.random_range(0.08..0.2) * side;
                let rx = rng.random_range(0.08..0.2) * side;
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let lift = rng.random_range(0.7..0.9) - 0.2;
                let (sin, cos) = theta.sin_cos();
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 + 0.5 - cy;
                        let dx = x as f64 + 0.5 - cx;
                        let u = dx * cos + dy * sin;
                        let v = -dx * sin + dy * cos;
                        if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                            px[y * w + x] += lift;
                        }
                    }
                }
            }
            let data = px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
            let img = Tensor::new(vec![h, w, 1], data)?;
            samples.push((ImageSource::Memory(Arc::new(img)), label));
        }
    }
    Ok(LabeledDataset {
        samples,
        class_names: SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Writes in-memory samples as 8-bit PNGs under `root/<class>/<class>_NNNNN.png`.
pub fn write_dataset(ds: &LabeledDataset, root: &Path) -> Result<Vec<PathBuf>> {
    let mut seen = vec![0usize; ds.class_names.len()];
    let mut jobs = Vec::with_capacity(ds.len());
    for (source, label) in &ds.samples {
        let ImageSource::Memory(img) = source else {
            return Err(Error::Input("only in-memory samples can be written".into()));
        };
        let name = &ds.class_names[*label];
        let path = root.join(name).join(format!("{name}_{:05}.png", seen[*label]));
        seen[*label] += 1;
        jobs.push((path, img.clone()));
    }
    for name in &ds.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    jobs.par_iter()
        .map(|(path, img)| write_png(path, img))
        .collect::<Result<Vec<()>>>()?;
    Ok(jobs.into_iter().map(|(p, _)| p).collect())
}

fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::dim("write_png", format!("[{}]", ShapeDisplay(img.shape()))));
    };
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::dim("write_png", format!("{c} channels"))),
    };
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Reads a `root/<class_name>/*.{png,jpg,jpeg}` tree.
pub fn load_directory(root: &Path) -> Result<LabeledDataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    if names.is_empty() {
        return Err(Error::Input(format!(
            "{}: no class directories found",
            root.display()
        )));
    }
    let (class_names, index) = encode_labels(&names)?;
    let mut samples = Vec::new();
    for (dir, name) in class_dirs.iter().zip(&names) {
        for file in sorted_entries(dir)?.into_iter().filter(|p| is_image(p)) {
            samples.push((ImageSource::File(file), index[name]));
        }
    }
    if samples.is_empty() {
        return Err(Error::Input(format!("{}: no images found", root.display())));
    }
    Ok(LabeledDataset {
        samples,
        class_names,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: PathBuf,
    label: String,
}

/// Writes `path,label` rows for file-backed samples.
pub fn write_manifest(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for (source, label) in &ds.samples {
        let ImageSource::File(file) = source else {
            return Err(Error::Input("manifest rows need file-backed samples".into()));
        };
        w.serialize(ManifestRow {
            path: file.clone(),
            label: ds.class_names[*label].clone(),
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `path,label` manifest. Relative paths resolve against the
/// manifest's directory. Labels are indexed against `class_names` when given,
/// otherwise encoded from the labels present.
pub fn read_manifest(path: &Path, class_names: Option<&[String]>) -> Result<LabeledDataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .map_err(|e| csv_error(path, e))?;
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: manifest is empty", path.display())));
    }
    let (class_names, index) = match class_names {
        Some(names) => (
            names.to_vec(),
            names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        ),
        None => encode_labels(&rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>())?,
    };
    let samples = rows
        .into_iter()
        .map(|row| {
            let label = *index.get(&row.label).ok_or_else(|| {
                Error::Input(format!("{}: unknown label `{}`", path.display(), row.label))
            })?;
            Ok((ImageSource::File(base.join(row.path)), label))
        })
        .collect::<Result<_>>()?;
    Ok(LabeledDataset {
        samples,
        class_names,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    }
}
