//! Datasets: IDX decoding, splitting, augmentation, batching, and a
//! synthetic rotated-glyph dataset for viewpoint generalization.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::masking::ImageShape;
use crate::numerics::Tensor;
use crate::params::ParamStore;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split {s:?}"))),
        }
    }
}

/// Images `[N, C, H, W]` with pixels in `[0, 1]` and labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub shape: ImageShape,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: ImageShape, classes: usize, split: Split) -> Result<Self> {
        let ds = Dataset { images, labels, shape, classes, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() * self.shape.numel() {
            return Err(Error::CountMismatch { images: self.images.len() / self.shape.numel().max(1), labels: self.labels.len() });
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Data(format!("label {l} outside [0, {})", self.classes)));
        }
        if self.images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("pixel outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.images[i * n..(i + 1) * n]
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.shape.numel());
        indices.iter().for_each(|&i| images.extend_from_slice(self.image(i)));
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { images, labels, shape: self.shape, classes: self.classes, split }
    }

    /// The first `n` examples (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }

    /// Stores the dataset as a tensor table (`images`, `labels`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        let (c, h, w) = (self.shape.channels, self.shape.height, self.shape.width);
        store.insert_buffer("images", Tensor::new(vec![self.len().max(1), c, h, w], self.images.clone()).map_err(data_err)?);
        let labels = self.labels.iter().map(|&l| l as f32).collect();
        store.insert_buffer("labels", Tensor::new(vec![self.len().max(1)], labels).map_err(data_err)?);
        let config = format!("split={}\nclasses={}", self.split, self.classes);
        Checkpoint::new(config, store).save(path)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let ck = Checkpoint::load(path)?;
        let images = ck.tensors.get("images").map_err(data_err)?;
        let labels = ck.tensors.get("labels").map_err(data_err)?;
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Data(format!("{}: images tensor has shape {s:?}", path.display())));
        }
        let classes = ck
            .config_value("classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: missing class count", path.display())))?;
        let split = ck.config_value("split").unwrap_or("train").parse()?;
        let labels = labels.data().iter().map(|&l| l as usize).collect();
        Dataset::new(images.data().to_vec(), labels, ImageShape::new(s[1], s[2], s[3]), classes, split)
    }
}

fn data_err(e: Error) -> Error {
    Error::Data(e.to_string())
}

fn read_idx(path: &Path, magic: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(Error::Truncated { path: path.into(), expected: header, found: bytes.len() });
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(Error::BadMagic { path: path.into(), expected: magic, found });
    }
    if bytes.len() < header {
        return Err(Error::Truncated { path: path.into(), expected: header, found: bytes.len() });
    }
    let dims: Vec<usize> =
        (0..ndims).map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() });
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Decodes an IDX image file (`u8 [N, H, W]`) and its label file (`u8 [N]`).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images_path, IDX_IMAGES, 3)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS, 1)?;
    if dims[0] != ldims[0] {
        return Err(Error::CountMismatch { images: dims[0], labels: ldims[0] });
    }
    let images = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(images, labels, ImageShape::new(1, dims[1], dims[2]), classes, Split::Train)
}

/// MNIST's standard file names inside `dir`.
pub fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let stem = if train { "train" } else { "t10k" };
    (dir.join(format!("{stem}-images-idx3-ubyte")), dir.join(format!("{stem}-labels-idx1-ubyte")))
}

pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let (img, lbl) = mnist_paths(dir, train);
    let mut ds = load_idx(&img, &lbl)?;
    ds.split = if train { Split::Train } else { Split::Test };
    Ok(ds)
}

/// Seeded random partition with `round(fraction·N)` validation examples.
pub fn split_train_val(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Data(format!("validation fraction {fraction} must lie in (0, 1)")));
    }
    if ds.len() < 2 {
        return Err(Error::Data(format!("cannot split {} examples", ds.len())));
    }
    let (train_idx, val_idx) = split_indices(ds.len(), fraction, seed);
    Ok((ds.subset(&train_idx, Split::Train), ds.subset(&val_idx, Split::Val)))
}

/// Sorted `(train, val)` index sets of a seeded split.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentPolicy {
    None,
    Pad4RandCrop,
    Pad4RandCropHflip,
}

impl FromStr for AugmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentPolicy::None),
            "pad4_randcrop" => Ok(AugmentPolicy::Pad4RandCrop),
            "pad4_randcrop+hflip" | "pad4_randcrop_hflip" => Ok(AugmentPolicy::Pad4RandCropHflip),
            _ => Err(Error::Config(format!(
                "unknown augment policy {s:?} (expected none, pad4_randcrop or pad4_randcrop+hflip)"
            ))),
        }
    }
}

impl fmt::Display for AugmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentPolicy::None => "none",
            AugmentPolicy::Pad4RandCrop => "pad4_randcrop",
            AugmentPolicy::Pad4RandCropHflip => "pad4_randcrop+hflip",
        })
    }
}

pub const PAD: usize = 4;

/// Crop of the zero-padded image at offset `(dy, dx)` in `[0, 2·PAD]²`;
/// `(PAD, PAD)` is the identity.
pub fn pad_crop(image: &[f32], shape: ImageShape, dy: usize, dx: usize) -> Vec<f32> {
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![0.0; image.len()];
    for c in 0..shape.channels {
        for y in 0..h {
            let sy = (y + dy) as isize - PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - PAD as isize;
                if sx >= 0 && sx < w as isize {
                    out[(c * h + y) * w + x] = image[(c * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub fn hflip(image: &[f32], shape: ImageShape) -> Vec<f32> {
    let mut out = image.to_vec();
    out.chunks_mut(shape.width).for_each(<[f32]>::reverse);
    out
}

pub fn augment<R: Rng + ?Sized>(image: &[f32], shape: ImageShape, policy: AugmentPolicy, rng: &mut R) -> Vec<f32> {
    match policy {
        AugmentPolicy::None => image.to_vec(),
        AugmentPolicy::Pad4RandCrop | AugmentPolicy::Pad4RandCropHflip => {
            let dy = rng.gen_range(0..=2 * PAD);
            let dx = rng.gen_range(0..=2 * PAD);
            let out = pad_crop(image, shape, dy, dx);
            if policy == AugmentPolicy::Pad4RandCropHflip && rng.gen_bool(0.5) {
                hflip(&out, shape)
            } else {
                out
            }
        }
    }
}

/// Index batches covering `[0, n)`; shuffled when a seed is given. The last
/// batch may be short.
pub fn batches(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

// ------------------------------------------------------------------ synthetic viewpoints

/// The glyph families of the viewpoint dataset.
pub const GLYPHS: [&str; 5] = ["triangle", "square", "disk", "cross", "ell"];

#[derive(Clone, Debug, PartialEq)]
pub struct ViewpointSpec {
    /// Number of glyph classes, at most `GLYPHS.len()`.
    pub classes: usize,
    pub size: usize,
    /// Degrees in `[0, 360)`.
    pub train_angles: Vec<f64>,
    pub novel_angles: Vec<f64>,
}

impl Default for ViewpointSpec {
    fn default() -> Self {
        ViewpointSpec {
            classes: GLYPHS.len(),
            size: 28,
            train_angles: vec![300.0, 320.0, 340.0, 0.0, 20.0, 40.0],
            novel_angles: (3..=14).map(|i| f64::from(i) * 20.0).collect(),
        }
    }
}

impl ViewpointSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > GLYPHS.len() {
            return Err(Error::Data(format!("{} glyph classes; expected 2..={}", self.classes, GLYPHS.len())));
        }
        for &a in &self.train_angles {
            if self.novel_angles.iter().any(|&b| ((a - b).rem_euclid(360.0)).abs() < 1e-9) {
                return Err(Error::Data(format!("angle {a} appears in both the training and novel sets")));
            }
        }
        if self.train_angles.is_empty() || self.novel_angles.is_empty() {
            return Err(Error::Data("angle sets must be non-empty".into()));
        }
        Ok(())
    }
}

/// Per-instance variation of a rendered glyph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub scale: f64,
    /// Pixel offsets applied after rotation.
    pub dx: f64,
    pub dy: f64,
    /// Degrees added to the nominal angle.
    pub angle: f64,
    pub intensity: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { scale: 1.0, dx: 0.0, dy: 0.0, angle: 0.0, intensity: 1.0 };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Jitter {
        Jitter {
            scale: rng.gen_range(0.85..1.05),
            dx: rng.gen_range(-1.5..1.5),
            dy: rng.gen_range(-1.5..1.5),
            angle: rng.gen_range(-3.0..3.0),
            intensity: rng.gen_range(0.8..1.0),
        }
    }
}

/// Whether the point `(x, y)` (glyph units, y down, radius ≈ 1) lies inside glyph `class`.
fn inside(class: usize, x: f64, y: f64) -> bool {
    let rect = |x0: f64, x1: f64, y0: f64, y1: f64| x >= x0 && x <= x1 && y >= y0 && y <= y1;
    match class {
        0 => {
            // apex up; the base sits at y = 0.5
            (-1.0..=0.5).contains(&y) && x.abs() <= (y + 1.0) / 1.5 * 0.866
        }
        1 => rect(-0.7, 0.7, -0.7, 0.7),
        2 => x * x + y * y <= 0.8 * 0.8,
        3 => rect(-0.9, 0.9, -0.25, 0.25) || rect(-0.25, 0.25, -0.9, 0.9),
        _ => rect(-0.6, -0.15, -0.9, 0.9) || rect(-0.6, 0.7, 0.45, 0.9),
    }
}

/// Renders glyph `class` rotated by `angle_deg` (counter-clockwise) into a
/// `size × size` single-channel image with 4×4 supersampling.
pub fn render_glyph(class: usize, angle_deg: f64, jitter: Jitter, size: usize) -> Vec<f32> {
    let theta = (angle_deg + jitter.angle).to_radians();
    let (s, c) = theta.sin_cos();
    let radius = size as f64 * 0.32 * jitter.scale;
    let centre = size as f64 / 2.0;
    const SS: usize = 4;
    let mut out = vec![0.0f32; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64 - centre - jitter.dx;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64 - centre - jitter.dy;
                    // inverse rotation back into the glyph frame (y axis points down)
                    let gx = (c * x - s * y) / radius;
                    let gy = (s * x + c * y) / radius;
                    hits += usize::from(inside(class, gx, gy));
                }
            }
            out[py * size + px] = (hits as f64 / (SS * SS) as f64 * jitter.intensity) as f32;
        }
    }
    out
}

fn render_set<R: Rng + ?Sized>(spec: &ViewpointSpec, angles: &[f64], n_per_cell: usize, split: Split, rng: &mut R) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for &angle in angles {
        for class in 0..spec.classes {
            for _ in 0..n_per_cell {
                images.extend(render_glyph(class, angle, Jitter::sample(rng), spec.size));
                labels.push(class);
            }
        }
    }
    Dataset::new(images, labels, ImageShape::new(1, spec.size, spec.size), spec.classes, split)
}

/// `(train, familiar test, novel test)`: the first two use the training
/// angles with independent instances; the third uses the disjoint novel angles.
pub fn make_viewpoint_dataset(spec: &ViewpointSpec, n_per_cell: usize, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    if n_per_cell == 0 {
        return Err(Error::Data("need at least one example per (angle, class) cell".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = render_set(spec, &spec.train_angles, n_per_cell, Split::Train, &mut rng)?;
    let familiar = render_set(spec, &spec.train_angles, n_per_cell, Split::Test, &mut rng)?;
    let novel = render_set(spec, &spec.novel_angles, n_per_cell, Split::Test, &mut rng)?;
    Ok((train, familiar, novel))
}
