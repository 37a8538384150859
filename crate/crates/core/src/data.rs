//! Synthetic task streams, disjoint class splits, paired augmentation and
//! image-folder import/export.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use cipnet_tensor::{Scalar, Tensor};
use image::{ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

/// One RGB image stored channel-major (`3 x size x size`) in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Stable identifier, unique within its dataset split.
    pub id: usize,
    pub label: usize,
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// SHA-256 over labels and little-endian pixels of both splits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in self.train.iter().chain(&self.test) {
            h.update((s.label as u64).to_le_bytes());
            for v in &s.pixels {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassAttributes {
    pub shape: usize,
    pub quadrant: usize,
    pub texture: usize,
    pub color: usize,
}

/// Maximum number of classes with pairwise distinct attribute tuples.
pub const MAX_SYNTHETIC_CLASSES: usize = 64;

const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
];

pub fn class_attributes(k: usize) -> ClassAttributes {
    let (a, b, c) = (k % 4, (k / 4) % 4, k / 16);
    ClassAttributes {
        shape: a,
        quadrant: b,
        texture: (a + 2 * b + c) % 4,
        color: (a + b + c) % 6,
    }
}

fn inside_shape(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        _ => {
            let arm = 0.35 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

fn texture_value(texture: usize, x: usize, y: usize, phase: usize) -> f32 {
    let period = 6;
    let on = match texture {
        0 => false,
        1 => (y + phase) % period < period / 2,
        2 => (x + phase) % period < period / 2,
        _ => ((x + phase) / 4 + (y + phase) / 4) % 2 == 0,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// Render one image of class `k`; all within-class variation comes from `rng`.
pub fn render(k: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let attr = class_attributes(k);
    let s = size as f32;
    let qx = if attr.quadrant % 2 == 0 { 0.25 } else { 0.75 };
    let qy = if attr.quadrant / 2 == 0 { 0.25 } else { 0.75 };
    let cx = (qx + rng.random_range(-0.06..0.06)) * s;
    let cy = (qy + rng.random_range(-0.06..0.06)) * s;
    let r = s * 0.16 * rng.random_range(0.8f32..1.2);
    let mut color = PALETTE[attr.color];
    for c in &mut color {
        *c = (*c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
    }
    let base = rng.random_range(0.25f32..0.4);
    let contrast = rng.random_range(0.12f32..0.2);
    let phase = rng.random_range(0..6);
    let noise = Normal::new(0.0f32, 0.03).expect("valid normal");
    let plane = size * size;
    let mut px = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let fg = inside_shape(attr.shape, dx, dy, r);
            let bg = base + contrast * texture_value(attr.texture, x, y, phase);
            for ch in 0..3 {
                let v = if fg { color[ch] } else { bg } + noise.sample(rng);
                px[ch * plane + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    px
}

/// `per_class` training and `per_class / 5` test images for each class.
pub fn generate_synthetic(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || num_classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::Config(format!(
            "synthetic classes must be in 1..={MAX_SYNTHETIC_CLASSES}, got {num_classes}"
        )));
    }
    if per_class < 5 || image_size < 8 {
        return Err(Error::Config("need per_class >= 5 and image_size >= 8".into()));
    }
    let test_per_class = per_class / 5;
    let mut train = Vec::with_capacity(num_classes * per_class);
    let mut test = Vec::with_capacity(num_classes * test_per_class);
    for k in 0..num_classes {
        for i in 0..per_class + test_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[seed, k as u64, i as u64]));
            let pixels = render(k, image_size, &mut rng);
            let split = if i < per_class { &mut train } else { &mut test };
            split.push(Sample {
                id: split.len(),
                label: k,
                pixels,
            });
        }
    }
    Ok(Dataset {
        image_size,
        num_classes,
        train,
        test,
    })
}

/// One task: its global class ids and the relabelled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub classes: Vec<usize>,
    /// Dataset class behind each global id in `classes`.
    pub source_classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Ordered tasks with disjoint classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub image_size: usize,
    pub seed: u64,
    tasks: Vec<TaskData>,
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Permute classes with `seed`, cut into equal blocks; the class at position
/// `j` of task `t` becomes global class `t * k + j`.
pub fn split_tasks(dataset: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    let n = dataset.num_classes;
    if num_tasks == 0 || n % num_tasks != 0 {
        return Err(Error::Config(format!(
            "{n} classes cannot be split into {num_tasks} equal tasks; valid task counts: {:?}",
            divisors(n)
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(&[seed, 0x5EED])));
    let mut global_of = vec![0; n];
    for (g, &c) in perm.iter().enumerate() {
        global_of[c] = g;
    }
    let k = n / num_tasks;
    let relabel = |samples: &[Sample], lo: usize| -> Vec<Sample> {
        samples
            .iter()
            .filter(|s| (lo..lo + k).contains(&global_of[s.label]))
            .map(|s| Sample {
                label: global_of[s.label],
                ..s.clone()
            })
            .collect()
    };
    let tasks = (0..num_tasks)
        .map(|t| TaskData {
            classes: (t * k..(t + 1) * k).collect(),
            source_classes: perm[t * k..(t + 1) * k].to_vec(),
            train: relabel(&dataset.train, t * k),
            test: relabel(&dataset.test, t * k),
        })
        .collect();
    Ok(TaskStream {
        image_size: dataset.image_size,
        seed,
        tasks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub task: usize,
    pub split: Split,
    /// Task being trained when the access happened, if any.
    pub during: Option<usize>,
}

/// Read access to a [`TaskStream`] that logs every request.
pub struct AuditedStream<'a> {
    stream: &'a TaskStream,
    current: RefCell<Option<usize>>,
    log: RefCell<Vec<Access>>,
}

impl<'a> AuditedStream<'a> {
    pub fn new(stream: &'a TaskStream) -> Self {
        Self {
            stream,
            current: RefCell::new(None),
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.stream.tasks.len()
    }

    pub fn image_size(&self) -> usize {
        self.stream.image_size
    }

    pub fn classes(&self, task: usize) -> &'a [usize] {
        &self.stream.tasks[task].classes
    }

    pub fn begin_task(&self, task: usize) {
        *self.current.borrow_mut() = Some(task);
    }

    pub fn end_task(&self) {
        *self.current.borrow_mut() = None;
    }

    fn record(&self, task: usize, split: Split) {
        self.log.borrow_mut().push(Access {
            task,
            split,
            during: *self.current.borrow(),
        });
    }

    pub fn train(&self, task: usize) -> &'a [Sample] {
        self.record(task, Split::Train);
        &self.stream.tasks[task].train
    }

    pub fn test(&self, task: usize) -> &'a [Sample] {
        self.record(task, Split::Test);
        &self.stream.tasks[task].test
    }

    pub fn accesses(&self) -> Vec<Access> {
        self.log.borrow().clone()
    }

    /// Training-data reads of an earlier task while a later task was running.
    pub fn past_train_accesses(&self) -> usize {
        self.log
            .borrow()
            .iter()
            .filter(|a| a.split == Split::Train && a.during.is_some_and(|d| a.task < d))
            .count()
    }
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, t: usize) -> &TaskData {
        &self.tasks[t]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// One geometric transform shared by both views, then independent
    /// photometric jitter per view. Keeps map locations in correspondence.
    SharedGeometry,
    /// First view geometric only, second view photometric only.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mode: ViewMode,
    /// Maximum shift as a fraction of width/height.
    pub translate: f64,
    pub rotate_deg: f64,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    /// Maximum hue rotation as a fraction of a full turn.
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: ViewMode::SharedGeometry,
            translate: 0.1,
            rotate_deg: 10.0,
            flip: false,
            brightness: 0.2,
            contrast: 0.2,
            hue: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.1).contains(&self.translate) {
            return Err(Error::Config(format!("translate must be in [0, 0.1], got {}", self.translate)));
        }
        if self.rotate_deg < 0.0 || self.brightness < 0.0 || self.contrast < 0.0 || self.hue < 0.0 {
            return Err(Error::Config("augmentation magnitudes must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricParams {
    pub tx: f64,
    pub ty: f64,
    pub angle: f64,
    pub flip: bool,
}

pub fn sample_geometric(aug: &AugmentConfig, size: usize, rng: &mut ChaCha8Rng) -> GeometricParams {
    let max_shift = aug.translate * size as f64;
    let max_angle = aug.rotate_deg.to_radians();
    let uniform = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    GeometricParams {
        tx: uniform(rng, max_shift),
        ty: uniform(rng, max_shift),
        angle: uniform(rng, max_angle),
        flip: aug.flip && rng.random_bool(0.5),
    }
}

/// Inverse-map with bilinear sampling and edge replication.
pub fn apply_geometric(px: &[f32], size: usize, g: &GeometricParams) -> Vec<f32> {
    let plane = size * size;
    let c = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = g.angle.sin_cos();
    let mut out = vec![0.0f32; px.len()];
    let clampi = |v: f64| v.clamp(0.0, size as f64 - 1.0);
    for y in 0..size {
        for x in 0..size {
            let (ox, oy) = (x as f64 - c - g.tx, y as f64 - c - g.ty);
            let mut sx = cos * ox + sin * oy + c;
            let sy = -sin * ox + cos * oy + c;
            if g.flip {
                sx = size as f64 - 1.0 - sx;
            }
            let (sx, sy) = (clampi(sx), clampi(sy));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..3 {
                let p = &px[ch * plane..(ch + 1) * plane];
                let top = p[y0 * size + x0] * (1.0 - fx) + p[y0 * size + x1] * fx;
                let bot = p[y1 * size + x0] * (1.0 - fx) + p[y1 * size + x1] * fx;
                out[ch * plane + y * size + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Brightness shift, contrast about the image mean, then a YIQ hue rotation.
pub fn apply_photometric(px: &[f32], size: usize, aug: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let uniform = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let bright = uniform(rng, aug.brightness) as f32;
    let contrast = 1.0 + uniform(rng, aug.contrast) as f32;
    let theta = uniform(rng, aug.hue) * std::f64::consts::TAU;
    let plane = size * size;
    let mean = px.iter().sum::<f32>() / px.len() as f32;
    let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
    let mut out = vec![0.0f32; px.len()];
    for i in 0..plane {
        let [r, g, b] = [px[i], px[plane + i], px[2 * plane + i]].map(|v| (v - mean) * contrast + mean + bright);
        let yy = 0.299 * r + 0.587 * g + 0.114 * b;
        let ii = 0.596 * r - 0.274 * g - 0.322 * b;
        let qq = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i2, q2) = (ii * cos - qq * sin, ii * sin + qq * cos);
        let rgb = [
            yy + 0.956 * i2 + 0.621 * q2,
            yy - 0.272 * i2 - 0.647 * q2,
            yy - 1.106 * i2 + 1.703 * q2,
        ];
        for (ch, v) in rgb.into_iter().enumerate() {
            out[ch * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Two augmented views of one image, arranged according to `aug.mode`.
pub fn view_pair(px: &[f32], size: usize, aug: &AugmentConfig, sample_seed: u64) -> (Vec<f32>, Vec<f32>) {
    if !aug.enabled {
        return (px.to_vec(), px.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let g = sample_geometric(aug, size, &mut rng);
    match aug.mode {
        ViewMode::SharedGeometry => {
            let moved = apply_geometric(px, size, &g);
            let v1 = apply_photometric(&moved, size, aug, &mut rng);
            let v2 = apply_photometric(&moved, size, aug, &mut rng);
            (v1, v2)
        }
        ViewMode::Split => {
            let v1 = apply_geometric(px, size, &g);
            let v2 = apply_photometric(px, size, aug, &mut rng);
            (v1, v2)
        }
    }
}

/// Stack channel-major images into `[B, 3, size, size]`.
pub fn to_tensor<T: Scalar>(images: &[&[f32]], size: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        assert_eq!(img.len(), 3 * size * size, "image has wrong pixel count");
        data.extend(img.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(vec![images.len(), 3, size, size], data).expect("consistent size")
}

/// Two views per sample; per-sample seeds come from `(seed, epoch, sample id)`.
pub struct SampleBatch<T> {
    pub view1: Tensor<T>,
    pub view2: Tensor<T>,
    pub labels: Vec<usize>,
}

pub fn make_views<T: Scalar>(
    samples: &[&Sample],
    size: usize,
    aug: &AugmentConfig,
    seed: u64,
    epoch: u64,
) -> SampleBatch<T> {
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = samples
        .iter()
        .map(|s| view_pair(&s.pixels, size, aug, seed::derive(&[seed, epoch, s.id as u64])))
        .collect();
    let v1: Vec<&[f32]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let v2: Vec<&[f32]> = pairs.iter().map(|p| p.1.as_slice()).collect();
    SampleBatch {
        view1: to_tensor(&v1, size),
        view2: to_tensor(&v2, size),
        labels: samples.iter().map(|s| s.label).collect(),
    }
}

fn to_rgb(px: &[f32], size: usize) -> RgbImage {
    let plane = size * size;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        image::Rgb([0, 1, 2].map(|c| (px[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn from_rgb(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut px = vec![0.0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = (y * w + x) as usize;
        for c in 0..3 {
            px[c * plane + i] = p.0[c] as f32 / 255.0;
        }
    }
    px
}

pub fn save_image(px: &[f32], size: usize, path: &Path) -> Result<()> {
    let format = ImageFormat::from_path(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    to_rgb(px, size)
        .save_with_format(path, format)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn load_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.dimensions() == (size as u32, size as u32) {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, image::imageops::FilterType::Triangle)
    };
    Ok(from_rgb(&rgb))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm" | "pnm" | "pgm")
    )
}

/// Read a class-per-subdirectory tree. Classes are numbered by sorted
/// directory name.
pub fn ingest_folder(path: &Path, image_size: usize) -> Result<(Vec<String>, Vec<Sample>)> {
    let mut names = Vec::new();
    let mut samples = Vec::new();
    for dir in sorted_entries(path)?.into_iter().filter(|p| p.is_dir()) {
        let label = names.len();
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for file in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
            samples.push(Sample {
                id: samples.len(),
                label,
                pixels: load_image(&file, image_size)?,
            });
        }
    }
    if names.is_empty() {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "no class subdirectories found".into(),
        });
    }
    Ok((names, samples))
}

/// Load `root/train` and `root/test`, which must list the same classes.
pub fn ingest_dataset(root: &Path, image_size: usize) -> Result<Dataset> {
    let (names, train) = ingest_folder(&root.join("train"), image_size)?;
    let (test_names, test) = ingest_folder(&root.join("test"), image_size)?;
    if names != test_names {
        return Err(Error::Config(format!(
            "class folders differ between {} and {}",
            root.join("train").display(),
            root.join("test").display()
        )));
    }
    Ok(Dataset {
        image_size,
        num_classes: names.len(),
        train,
        test,
    })
}

/// Write `root/{train,test}/class_XX/NNNNN.ext`; returns the files written.
pub fn export_dataset(dataset: &Dataset, root: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        for s in samples {
            let dir = root.join(split).join(format!("class_{:02}", s.label));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let file = dir.join(format!("{:05}.{extension}", s.id));
            save_image(&s.pixels, dataset.image_size, &file)?;
            written.push(file);
        }
    }
    Ok(written)
}
