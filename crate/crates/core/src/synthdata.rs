//! Synthetic shape scenes, labeled/unlabeled splits, and the weak / strong
//! augmentation policies.
//!
//! Every scene is a pure function of `(seed, DataConfig)`. Unlabeled scenes
//! keep their ground truth, but it is only reachable through an
//! [`AnalysisKey`] and every read is counted, so tests can assert that the
//! training path never touches it.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("labeled split would be empty ({scenes} scenes at fraction {fraction})")]
    EmptyLabeledSplit { scenes: usize, fraction: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation at line {line}: {reason}")]
    Annotation { line: usize, reason: String },
    #[error("png error on {path}: {reason}")]
    Png { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Shapes in class-id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
        Shape::Ring,
    ];

    /// Whether the point `(dx, dy)`, relative to the top-left corner of a
    /// `size x size` cell, lies inside the shape.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let h = 0.5 * size;
        let (cx, cy) = (dx - h, dy - h);
        if !(0.0..size).contains(&dx) || !(0.0..size).contains(&dy) {
            return false;
        }
        match self {
            Shape::Circle => cx * cx + cy * cy <= h * h,
            Shape::Square => true,
            Shape::Triangle => cx.abs() <= 0.5 * dy,
            Shape::Diamond => cx.abs() + cy.abs() <= h,
            Shape::Cross => cx.abs() <= size / 6.0 || cy.abs() <= size / 6.0,
            Shape::Ring => {
                let r2 = cx * cx + cy * cy;
                r2 <= h * h && r2 >= (0.55 * h) * (0.55 * h)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub noise_std: f64,
    pub num_scenes: usize,
    pub labeled_fraction: f64,
    pub eval_scenes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 64,
            num_classes: 3,
            max_objects: 3,
            min_object_size: 10.0,
            max_object_size: 28.0,
            noise_std: 0.08,
            num_scenes: 1000,
            labeled_fraction: 0.10,
            eval_scenes: 200,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.image_size < 32 {
            return bad("image_size must be >= 32");
        }
        if self.num_classes < 2 || self.num_classes > Shape::ALL.len() {
            return bad("num_classes must be in 2..=6");
        }
        if self.max_objects == 0 {
            return bad("max_objects must be >= 1");
        }
        if !(self.min_object_size >= 4.0
            && self.min_object_size <= self.max_object_size
            && self.max_object_size <= self.image_size as f64)
        {
            return bad("object sizes must satisfy 4 <= min <= max <= image_size");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0");
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad("labeled_fraction must be in (0, 1]");
        }
        Ok(())
    }
}

/// `H x W x 3` image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image { height, width, data: vec![value; height * width * 3] }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    /// Planar `[3, H, W]` copy in `f64`, the layout the detector consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f64;
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.data[self.index(y, x, c)] = self.get(y, self.width - 1 - x, c);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub seed: u64,
    pub image: Image,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn gt_pairs(&self) -> Vec<(BBox, usize)> {
        self.objects.iter().map(|o| (o.bbox, o.class_id)).collect()
    }
}

/// Capability to read hidden ground truth. Only analysis code should hold one.
#[derive(Debug)]
pub struct AnalysisKey(());

impl AnalysisKey {
    pub fn for_analysis() -> Self {
        AnalysisKey(())
    }
}

#[derive(Debug, Clone)]
pub struct UnlabeledScene {
    pub id: usize,
    pub seed: u64,
    pub image: Image,
    hidden: Vec<Object>,
    reads: Arc<AtomicUsize>,
}

impl UnlabeledScene {
    /// Hidden ground truth. Each call is recorded on the owning split.
    pub fn hidden_objects(&self, _key: &AnalysisKey) -> &[Object] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.hidden
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<UnlabeledScene>,
    pub labeled_fraction: f64,
    hidden_reads: Arc<AtomicUsize>,
}

impl DatasetSplit {
    /// Number of hidden ground-truth reads since construction.
    pub fn hidden_reads(&self) -> usize {
        self.hidden_reads.load(Ordering::Relaxed)
    }

    fn from_parts(labeled: Vec<Scene>, unlabeled: Vec<Scene>, labeled_fraction: f64) -> Self {
        let reads = Arc::new(AtomicUsize::new(0));
        let unlabeled = unlabeled
            .into_iter()
            .map(|s| UnlabeledScene {
                id: s.id,
                seed: s.seed,
                image: s.image,
                hidden: s.objects,
                reads: Arc::clone(&reads),
            })
            .collect();
        DatasetSplit { labeled, unlabeled, labeled_fraction, hidden_reads: reads }
    }
}

/// SplitMix64 step; derives independent per-scene seeds from one base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one scene: 1..=max_objects non-overlapping shapes with tight
/// boxes on a noisy background.
pub fn generate_scene(seed: u64, config: &DataConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.image_size;
    let size_f = n as f64;
    let noise = Normal::new(0.0, config.noise_std.max(0.0)).expect("noise std validated");

    let bg: [f64; 3] = [rng.random_range(0.0..0.45), rng.random_range(0.0..0.45), rng.random_range(0.0..0.45)];
    let mut image = Image::filled(n, n, 0.0);

    let count = rng.random_range(1..=config.max_objects);
    let mut placed: Vec<(Shape, f64, f64, f64, [f64; 3], usize)> = Vec::new();
    for _ in 0..count {
        let class_id = rng.random_range(0..config.num_classes);
        let color = [rng.random_range(0.55..1.0), rng.random_range(0.55..1.0), rng.random_range(0.55..1.0)];
        for _attempt in 0..50 {
            let s = rng.random_range(config.min_object_size..=config.max_object_size);
            let x0 = rng.random_range(0.0..=(size_f - s));
            let y0 = rng.random_range(0.0..=(size_f - s));
            // keep a one-pixel gap so rendered masks never touch
            let clear = placed.iter().all(|&(_, px, py, ps, _, _)| {
                x0 + s + 1.0 <= px || px + ps + 1.0 <= x0 || y0 + s + 1.0 <= py || py + ps + 1.0 <= y0
            });
            if clear {
                placed.push((Shape::ALL[class_id], x0, y0, s, color, class_id));
                break;
            }
        }
    }

    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let v = bg[c] + noise.sample(&mut rng);
                image.data[(y * n + x) * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut objects = Vec::with_capacity(placed.len());
    for &(shape, x0, y0, s, color, class_id) in &placed {
        let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let xa = x0.floor() as usize;
        let ya = y0.floor() as usize;
        let xb = ((x0 + s).ceil() as usize).min(n);
        let yb = ((y0 + s).ceil() as usize).min(n);
        for y in ya..yb {
            for x in xa..xb {
                if shape.contains(x as f64 + 0.5 - x0, y as f64 + 0.5 - y0, s) {
                    for c in 0..3 {
                        let v = color[c] + 0.5 * noise.sample(&mut rng);
                        image.data[(y * n + x) * 3 + c] = v.clamp(0.0, 1.0) as f32;
                    }
                    minx = minx.min(x);
                    miny = miny.min(y);
                    maxx = maxx.max(x);
                    maxy = maxy.max(y);
                }
            }
        }
        if minx == usize::MAX {
            continue;
        }
        objects.push(Object {
            bbox: BBox { x1: minx as f64, y1: miny as f64, x2: (maxx + 1) as f64, y2: (maxy + 1) as f64 },
            class_id,
        });
    }

    Scene { id: 0, seed, image, objects }
}

/// Generates `num_scenes` scenes, shuffles them with the config seed and
/// splits off the labeled fraction.
pub fn make_splits(config: &DataConfig) -> Result<DatasetSplit, DataError> {
    config.validate()?;
    let n_labeled = (config.labeled_fraction * config.num_scenes as f64).round() as usize;
    if n_labeled == 0 {
        return Err(DataError::EmptyLabeledSplit {
            scenes: config.num_scenes,
            fraction: config.labeled_fraction,
        });
    }
    let mut scenes: Vec<Scene> = (0..config.num_scenes)
        .map(|i| {
            let mut s = generate_scene(derive_seed(config.seed, i as u64), config);
            s.id = i;
            s
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    scenes.shuffle(&mut rng);
    let unlabeled = scenes.split_off(n_labeled.min(scenes.len()));
    Ok(DatasetSplit::from_parts(scenes, unlabeled, config.labeled_fraction))
}

/// Held-out evaluation scenes, drawn from a seed stream disjoint from the
/// training pool.
pub fn make_eval_set(config: &DataConfig) -> Vec<Scene> {
    let base = config.seed ^ 0x5EED_E7A1_0000_0000;
    (0..config.eval_scenes)
        .map(|i| {
            let mut s = generate_scene(derive_seed(base, i as u64), config);
            s.id = config.num_scenes + i;
            s
        })
        .collect()
}

/// Mirrors a scene horizontally; boxes follow the pixels.
pub fn flip_scene(scene: &Scene) -> Scene {
    let w = scene.image.width as f64;
    Scene {
        id: scene.id,
        seed: scene.seed,
        image: scene.image.flip_horizontal(),
        objects: scene
            .objects
            .iter()
            .map(|o| Object { bbox: o.bbox.flip_horizontal(w), class_id: o.class_id })
            .collect(),
    }
}

/// Weak view: a horizontal flip with probability 0.5.
pub fn weak_augment<R: Rng>(scene: &Scene, rng: &mut R) -> Scene {
    if rng.random_bool(0.5) {
        flip_scene(scene)
    } else {
        scene.clone()
    }
}

/// Weak view of a bare image; also reports whether it was flipped.
pub fn weak_augment_image<R: Rng>(image: &Image, rng: &mut R) -> (Image, bool) {
    if rng.random_bool(0.5) {
        (image.flip_horizontal(), true)
    } else {
        (image.clone(), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongAugConfig {
    pub p_jitter: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    pub p_cutout: f64,
    /// Per-channel gain is drawn from `1 +- jitter_strength`.
    pub jitter_strength: f64,
    pub blur_sigma: (f64, f64),
    /// Cutout side length as a fraction of the image side.
    pub cutout_scale: (f64, f64),
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        StrongAugConfig {
            p_jitter: 0.8,
            p_grayscale: 0.2,
            p_blur: 0.5,
            p_cutout: 0.5,
            jitter_strength: 0.4,
            blur_sigma: (0.1, 1.5),
            cutout_scale: (0.1, 0.3),
        }
    }
}

/// Photometric strong view: jitter, grayscale, blur and cutout, each applied
/// with its configured probability. Geometry is untouched.
pub fn strong_augment<R: Rng>(image: &Image, rng: &mut R, cfg: &StrongAugConfig) -> Image {
    let mut out = image.clone();
    if cfg.p_jitter > 0.0 && rng.random_bool(cfg.p_jitter) {
        let s = cfg.jitter_strength;
        let gain: [f32; 3] = std::array::from_fn(|_| rng.random_range(1.0 - s..=1.0 + s) as f32);
        let offset: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.25 * s..=0.25 * s) as f32);
        for px in out.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] * gain[c] + offset[c]).clamp(0.0, 1.0);
            }
        }
    }
    if cfg.p_grayscale > 0.0 && rng.random_bool(cfg.p_grayscale) {
        for px in out.data.chunks_exact_mut(3) {
            let l = (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).clamp(0.0, 1.0);
            px.fill(l);
        }
    }
    if cfg.p_blur > 0.0 && rng.random_bool(cfg.p_blur) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        out = gaussian_blur(&out, sigma);
    }
    if cfg.p_cutout > 0.0 && rng.random_bool(cfg.p_cutout) {
        let (h, w) = (out.height, out.width);
        let ch = ((rng.random_range(cfg.cutout_scale.0..=cfg.cutout_scale.1) * h as f64).round() as usize).clamp(1, h);
        let cw = ((rng.random_range(cfg.cutout_scale.0..=cfg.cutout_scale.1) * w as f64).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        let fill: f32 = rng.random_range(0.0..=1.0);
        for y in y0..y0 + ch {
            for x in x0..x0 + cw {
                for c in 0..3 {
                    let i = out.index(y, x, c);
                    out.data[i] = fill;
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (image.height as isize, image.width as isize);
    let pass = |src: &Image, horizontal: bool| -> Image {
        let mut dst = src.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0f32;
                    for (k, kv) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (sy, sx) = if horizontal { (y, (x + o).clamp(0, w - 1)) } else { ((y + o).clamp(0, h - 1), x) };
                        acc += kv * src.get(sy as usize, sx as usize, c);
                    }
                    let i = dst.index(y as usize, x as usize, c);
                    dst.data[i] = acc.clamp(0.0, 1.0);
                }
            }
        }
        dst
    };
    let tmp = pass(image, true);
    pass(&tmp, false)
}

/// One line of `annotations.jsonl`. Field order is fixed:
/// `scene_id, seed, split, boxes, classes`, where each box is
/// `[x1, y1, x2, y2]` in pixels and `classes[i]` labels `boxes[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub scene_id: usize,
    pub seed: u64,
    pub split: String,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

/// Writes `images/<scene_id>.png` (8-bit RGB) and `annotations.jsonl`.
/// Unlabeled scenes are exported with their hidden labels, which requires
/// an analysis key.
pub fn export_dataset(split: &DatasetSplit, dir: &Path, key: &AnalysisKey) -> Result<(), DataError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::create(&ann_path).map_err(io_err(&ann_path))?;
    let mut w = BufWriter::new(file);
    let mut emit = |id: usize, seed: u64, split: &str, image: &Image, objects: &[Object]| -> Result<(), DataError> {
        write_png(&img_dir.join(format!("{id:06}.png")), image)?;
        let rec = AnnotationRecord {
            scene_id: id,
            seed,
            split: split.to_string(),
            boxes: objects.iter().map(|o| o.bbox.as_array()).collect(),
            classes: objects.iter().map(|o| o.class_id).collect(),
        };
        let line = serde_json::to_string(&rec).expect("annotation serializes");
        writeln!(w, "{line}").map_err(io_err(&ann_path))
    };
    for s in &split.labeled {
        emit(s.id, s.seed, "labeled", &s.image, &s.objects)?;
    }
    for s in &split.unlabeled {
        emit(s.id, s.seed, "unlabeled", &s.image, s.hidden_objects(key))?;
    }
    w.flush().map_err(io_err(&ann_path))
}

/// Reads a directory written by [`export_dataset`]. Pixel values come back
/// quantized to 1/255.
pub fn import_dataset(dir: &Path) -> Result<DatasetSplit, DataError> {
    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::Annotation { line: i + 1, reason: e.to_string() })?;
        if rec.boxes.len() != rec.classes.len() {
            return Err(DataError::Annotation { line: i + 1, reason: "boxes/classes length mismatch".into() });
        }
        let objects = rec
            .boxes
            .iter()
            .zip(&rec.classes)
            .map(|(b, &c)| {
                BBox::new(b[0], b[1], b[2], b[3])
                    .map(|bbox| Object { bbox, class_id: c })
                    .map_err(|e| DataError::Annotation { line: i + 1, reason: e.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let image = read_png(&dir.join("images").join(format!("{:06}.png", rec.scene_id)))?;
        let scene = Scene { id: rec.scene_id, seed: rec.seed, image, objects };
        match rec.split.as_str() {
            "labeled" => labeled.push(scene),
            "unlabeled" => unlabeled.push(scene),
            other => {
                return Err(DataError::Annotation { line: i + 1, reason: format!("unknown split `{other}`") })
            }
        }
    }
    let total = labeled.len() + unlabeled.len();
    let fraction = if total == 0 { 0.0 } else { labeled.len() as f64 / total as f64 };
    Ok(DatasetSplit::from_parts(labeled, unlabeled, fraction))
}

pub fn write_png(path: &Path, image: &Image) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| DataError::Png { path: path.display().to_string(), reason: e.to_string() };
    let mut writer = enc.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    writer.write_image_data(&bytes).map_err(png_err)
}

pub fn read_png(path: &Path) -> Result<Image, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let png_err = |e: png::DecodingError| DataError::Png { path: path.display().to_string(), reason: e.to_string() };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(DataError::Png { path: path.display().to_string(), reason: "expected 8-bit RGB".into() });
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image { height: info.height as usize, width: info.width as usize, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig { num_scenes: 100, eval_scenes: 5, ..DataConfig::default() }
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = DataConfig::default();
        for seed in 0..50 {
            let a = generate_scene(seed, &cfg);
            assert_eq!(a, generate_scene(seed, &cfg));
            assert!(!a.objects.is_empty() && a.objects.len() <= cfg.max_objects);
            for o in &a.objects {
                o.bbox.validate().unwrap();
                assert!(o.bbox.x1 >= 0.0 && o.bbox.y1 >= 0.0);
                assert!(o.bbox.x2 <= 64.0 && o.bbox.y2 <= 64.0);
                assert!(o.class_id < cfg.num_classes);
            }
            assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_object_config() {
        let cfg = DataConfig { max_objects: 1, ..DataConfig::default() };
        for seed in 0..30 {
            assert_eq!(generate_scene(seed, &cfg).objects.len(), 1);
        }
    }

    #[test]
    fn boxes_are_tight() {
        let cfg = DataConfig { noise_std: 0.0, ..DataConfig::default() };
        let s = generate_scene(11, &cfg);
        for o in &s.objects {
            let b = o.bbox;
            // every edge row / column of the box contains a bright pixel
            let bright = |y: usize, x: usize| s.image.get(y, x, 0) >= 0.55 && s.image.get(y, x, 1) >= 0.55;
            let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
            assert!((x1..x2).any(|x| bright(y1, x)));
            assert!((x1..x2).any(|x| bright(y2 - 1, x)));
            assert!((y1..y2).any(|y| bright(y, x1)));
            assert!((y1..y2).any(|y| bright(y, x2 - 1)));
        }
    }

    #[test]
    fn class_frequencies_near_uniform() {
        let cfg = DataConfig::default();
        let mut counts = [0usize; 3];
        for seed in 0..1000 {
            for o in generate_scene(derive_seed(99, seed), &cfg).objects {
                counts[o.class_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            assert!((c as f64 / total as f64 - 1.0 / 3.0).abs() < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = make_splits(&small()).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len()), (10, 90));
        let t = make_splits(&small()).unwrap();
        let ids = |d: &DatasetSplit| (d.labeled.iter().map(|s| s.id).collect::<Vec<_>>(), d.unlabeled.iter().map(|s| s.id).collect::<Vec<_>>());
        assert_eq!(ids(&s), ids(&t));
        let (l, u) = ids(&s);
        assert!(l.iter().all(|i| !u.contains(i)));

        let all = make_splits(&DataConfig { labeled_fraction: 1.0, ..small() }).unwrap();
        assert!(all.unlabeled.is_empty());

        let none = make_splits(&DataConfig { labeled_fraction: 0.001, ..small() });
        assert!(matches!(none, Err(DataError::EmptyLabeledSplit { .. })));
    }

    #[test]
    fn hidden_reads_are_counted() {
        let s = make_splits(&small()).unwrap();
        assert_eq!(s.hidden_reads(), 0);
        let key = AnalysisKey::for_analysis();
        let _ = s.unlabeled[0].hidden_objects(&key);
        assert_eq!(s.hidden_reads(), 1);
    }

    #[test]
    fn flip_examples() {
        let mut scene = generate_scene(1, &DataConfig::default());
        scene.objects = vec![Object { bbox: BBox::new(2.0, 3.0, 10.0, 8.0).unwrap(), class_id: 0 }];
        let f = flip_scene(&scene);
        assert_eq!(f.objects[0].bbox, BBox::new(54.0, 3.0, 62.0, 8.0).unwrap());
        assert_eq!(flip_scene(&f), scene);
        assert_eq!(f.objects[0].bbox.area(), scene.objects[0].bbox.area());
        assert_eq!(f.image.get(5, 0, 1), scene.image.get(5, 63, 1));
    }

    #[test]
    fn weak_augment_draws_both_branches() {
        let scene = generate_scene(2, &DataConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut flipped = 0;
        for _ in 0..100 {
            let v = weak_augment(&scene, &mut rng);
            if v != scene {
                assert_eq!(v, flip_scene(&scene));
                flipped += 1;
            }
        }
        assert!(flipped > 20 && flipped < 80);
    }

    #[test]
    fn strong_identity_and_range() {
        let scene = generate_scene(3, &DataConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let off = StrongAugConfig { p_jitter: 0.0, p_grayscale: 0.0, p_blur: 0.0, p_cutout: 0.0, ..Default::default() };
        assert_eq!(strong_augment(&scene.image, &mut rng, &off), scene.image);
        let cfg = StrongAugConfig::default();
        for _ in 0..1000 {
            let out = strong_augment(&scene.image, &mut rng, &cfg);
            assert_eq!((out.height, out.width, out.data.len()), (64, 64, 64 * 64 * 3));
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn cutout_region_is_constant() {
        let scene = generate_scene(4, &DataConfig::default());
        let cfg = StrongAugConfig { p_jitter: 0.0, p_grayscale: 0.0, p_blur: 0.0, p_cutout: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = strong_augment(&scene.image, &mut rng, &cfg);
        let changed: Vec<usize> = (0..out.data.len()).filter(|&i| out.data[i] != scene.image.data[i]).collect();
        assert!(!changed.is_empty());
        let v = out.data[changed[0]];
        // every changed value equals the fill; the rectangle may include pixels that already matched it
        assert!(changed.iter().all(|&i| out.data[i] == v));
        let (ys, xs): (Vec<usize>, Vec<usize>) = changed.iter().map(|&i| (i / 3 / 64, i / 3 % 64)).unzip();
        let (y0, y1) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
        let (x0, x1) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
        for y in y0..=y1 {
            for x in x0..=x1 {
                for c in 0..3 {
                    assert_eq!(out.get(y, x, c), v);
                }
            }
        }
    }

    #[test]
    fn export_import_roundtrip() {
        let split = make_splits(&DataConfig { num_scenes: 20, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let key = AnalysisKey::for_analysis();
        export_dataset(&split, dir.path(), &key).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.labeled.len(), split.labeled.len());
        assert_eq!(back.unlabeled.len(), split.unlabeled.len());
        assert_eq!(back.labeled[0].objects, split.labeled[0].objects);
        assert_eq!(back.unlabeled[1].hidden_objects(&key), split.unlabeled[1].hidden_objects(&key));
        let err = back.labeled[0]
            .image
            .data
            .iter()
            .zip(&split.labeled[0].image.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
    }
}
