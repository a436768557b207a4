//! Patch arithmetic and random patch masking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Channel count and spatial size of one image stored as `[C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Patch grid `(rows, cols)` for side `patch`.
    pub fn grid(&self, patch: usize) -> Result<(usize, usize)> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::shape(
                "patchify",
                format!("image {}x{} is not divisible by patch size {patch}", self.height, self.width),
            ));
        }
        Ok((self.height / patch, self.width / patch))
    }
}

/// An image cut into non-overlapping square patches, flattened in row-major
/// grid order. Each patch row is channel-major, then row-major inside the patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T = f32> {
    pub patches: Vec<T>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
}

impl<T: Copy> PatchGrid<T> {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values per patch, `P·P·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, index: usize) -> &[T] {
        let q = self.patch_dim();
        &self.patches[index * q..(index + 1) * q]
    }
}

pub fn patchify<T: Copy>(image: &[T], shape: ImageShape, patch: usize) -> Result<PatchGrid<T>> {
    if image.len() != shape.numel() {
        return Err(Error::shape("patchify", format!("{} pixels for image {shape:?}", image.len())));
    }
    let (gh, gw) = shape.grid(patch)?;
    let (h, w) = (shape.height, shape.width);
    let mut patches = Vec::with_capacity(image.len());
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..shape.channels {
                for y in 0..patch {
                    let row = (c * h + py * patch + y) * w + px * patch;
                    patches.extend_from_slice(&image[row..row + patch]);
                }
            }
        }
    }
    Ok(PatchGrid { patches, grid: (gh, gw), patch_size: patch, channels: shape.channels })
}

pub fn unpatchify<T: Copy + Default>(grid: &PatchGrid<T>) -> Result<(Vec<T>, ImageShape)> {
    let (gh, gw) = grid.grid;
    let p = grid.patch_size;
    if p == 0 || grid.channels == 0 || gh == 0 || gw == 0 || grid.patches.len() != gh * gw * grid.patch_dim() {
        return Err(Error::shape(
            "unpatchify",
            format!("{} values for grid {gh}x{gw}, patch {p}, {} channels", grid.patches.len(), grid.channels),
        ));
    }
    let shape = ImageShape::new(grid.channels, gh * p, gw * p);
    let (h, w) = (shape.height, shape.width);
    let mut image = vec![T::default(); shape.numel()];
    let mut at = 0;
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..grid.channels {
                for y in 0..p {
                    let row = (c * h + py * p + y) * w + px * p;
                    image[row..row + p].copy_from_slice(&grid.patches[at..at + p]);
                    at += p;
                }
            }
        }
    }
    Ok((image, shape))
}

/// The set of masked locations of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    len: usize,
    ratio: f64,
    masked: Vec<usize>,
    seed: u64,
}

impl MaskPlan {
    /// A plan from explicit indices; they must be unique and in `[0, len)`.
    pub fn new(len: usize, mut masked: Vec<usize>) -> Result<Self> {
        if len == 0 {
            return Err(Error::Mask("location count must be positive".into()));
        }
        masked.sort_unstable();
        if let Some(&bad) = masked.iter().find(|&&i| i >= len) {
            return Err(Error::Mask(format!("index {bad} out of range for {len} locations")));
        }
        if masked.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Mask("duplicate masked index".into()));
        }
        let ratio = masked.len() as f64 / len as f64;
        Ok(MaskPlan { len, ratio, masked, seed: 0 })
    }

    /// Nothing masked.
    pub fn none(len: usize) -> Self {
        MaskPlan { len, ratio: 0.0, masked: vec![], seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn num_visible(&self) -> usize {
        self.len - self.masked.len()
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.masked.binary_search(&index).is_ok()
    }

    /// Unmasked indices in ascending order.
    pub fn visible(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| !self.is_masked(i)).collect()
    }

    pub fn visibility(&self) -> Vec<bool> {
        (0..self.len).map(|i| !self.is_masked(i)).collect()
    }
}

/// Number of masked locations: `⌊ratio·len⌋`.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    // the epsilon keeps products such as 0.29·100 from rounding down past an integer
    (ratio * len as f64 + 1e-9).floor() as usize
}

/// Uniformly samples `⌊ratio·len⌋` distinct locations without replacement.
pub fn sample_mask(len: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Mask(format!("ratio {ratio} must lie in [0, 1)")));
    }
    if len == 0 {
        return Err(Error::Mask("location count must be positive".into()));
    }
    let count = mask_count(len, ratio);
    if count >= len {
        return Err(Error::Mask(format!("ratio {ratio} masks all {len} locations")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = rand::seq::index::sample(&mut rng, len, count).into_vec();
    masked.sort_unstable();
    Ok(MaskPlan { len, ratio, masked, seed })
}

/// Derives an independent 64-bit stream seed from a tuple of integers.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_small_cases() {
        let img = [1.0f32, 2.0, 3.0, 4.0];
        let g = patchify(&img, ImageShape::new(1, 2, 2), 1).unwrap();
        assert_eq!(g.patches, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.len(), 4);

        let whole = patchify(&img, ImageShape::new(1, 2, 2), 2).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole.patch(0), &img);

        let mnist = vec![0.0f32; 28 * 28];
        let g = patchify(&mnist, ImageShape::new(1, 28, 28), 7).unwrap();
        assert_eq!((g.len(), g.patch_dim()), (16, 49));
    }

    #[test]
    fn patchify_rejects_indivisible_images() {
        assert!(patchify(&[0.0f32; 30], ImageShape::new(1, 5, 6), 2).is_err());
    }

    #[test]
    fn single_patch_unpatchifies_to_its_reshape() {
        let g = PatchGrid { patches: vec![1, 2, 3, 4, 5, 6, 7, 8], grid: (1, 1), patch_size: 2, channels: 2 };
        let (img, shape) = unpatchify(&g).unwrap();
        assert_eq!(shape, ImageShape::new(2, 2, 2));
        assert_eq!(img, vec![1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn inconsistent_grid_is_rejected() {
        let g = PatchGrid { patches: vec![0.0f32; 5], grid: (1, 1), patch_size: 2, channels: 1 };
        assert!(unpatchify(&g).is_err());
    }

    #[test]
    fn plan_validation() {
        let plan = MaskPlan::new(4, vec![3, 1]).unwrap();
        assert_eq!(plan.masked(), &[1, 3]);
        assert_eq!(plan.visible(), vec![0, 2]);
        assert!(MaskPlan::new(4, vec![1, 1]).is_err());
        assert!(MaskPlan::new(4, vec![4]).is_err());
    }

    #[test]
    fn sampler_counts() {
        let plan = sample_mask(16, 0.5, 3).unwrap();
        assert_eq!(plan.num_masked(), 8);
        assert_eq!(sample_mask(16, 0.0, 3).unwrap().num_masked(), 0);
        assert!(sample_mask(16, 1.0, 3).is_err());
        assert!(sample_mask(1, 0.99, 3).is_ok());
        assert_eq!(mask_count(100, 0.29), 29);
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        assert_eq!(sample_mask(49, 0.75, 11).unwrap(), sample_mask(49, 0.75, 11).unwrap());
        assert_ne!(sample_mask(49, 0.75, 11).unwrap().masked(), sample_mask(49, 0.75, 12).unwrap().masked());
    }

    #[test]
    fn mixed_seeds_differ() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[5, 6, 7]), mix_seed(&[5, 6, 7]));
    }
}
