//! Binary mix masks. A voxel is `0` where the pasted crop (foreground)
//! lands and `1` where the background image is kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary volume over a 2D or 3D grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<u8>,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![1; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![0; shape.iter().product()],
        }
    }

    pub fn from_bits(shape: Vec<usize>, bits: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::InvalidShape {
                op: "mask",
                detail: format!("shape {shape:?} vs {} bits", bits.len()),
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask bits must be 0 or 1".into()));
        }
        Ok(Self { shape, bits })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn zero_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    /// Per-voxel weights `w1` where the mask is 1 and `w0` where it is 0,
    /// shaped `[1, 1, spatial...]` for broadcasting against `[B, K, ...]`.
    pub fn weights<T: Scalar>(&self, w1: T, w0: T) -> Tensor<T> {
        let mut shape = vec![1, 1];
        shape.extend_from_slice(&self.shape);
        let data = self.bits.iter().map(|&b| if b == 1 { w1 } else { w0 }).collect();
        Tensor::new(shape, data).expect("mask weights")
    }

    /// Zero block bounds `(lo, hi)` per axis, or `None` if the mask has no zeros.
    pub fn zero_bounding_box(&self) -> Option<Vec<(usize, usize)>> {
        let mut lo = vec![usize::MAX; self.shape.len()];
        let mut hi = vec![0; self.shape.len()];
        let mut any = false;
        for (flat, &b) in self.bits.iter().enumerate() {
            if b == 0 {
                any = true;
                for (d, c) in unravel(flat, &self.shape).into_iter().enumerate() {
                    lo[d] = lo[d].min(c);
                    hi[d] = hi[d].max(c + 1);
                }
            }
        }
        any.then(|| lo.into_iter().zip(hi).collect())
    }

    fn clear_box(&mut self, origin: &[usize], extent: &[usize]) {
        let shape = self.shape.clone();
        for_each_in_box(origin, extent, |coord| {
            self.bits[ravel(coord, &shape)] = 0;
        });
    }
}

pub(crate) fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut c = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        c[d] = flat % shape[d];
        flat /= shape[d];
    }
    c
}

pub(crate) fn ravel(coord: &[usize], shape: &[usize]) -> usize {
    coord.iter().zip(shape).fold(0, |acc, (&c, &s)| acc * s + c)
}

fn for_each_in_box(origin: &[usize], extent: &[usize], mut f: impl FnMut(&[usize])) {
    if extent.iter().any(|&e| e == 0) {
        return;
    }
    let mut c = origin.to_vec();
    loop {
        f(&c);
        let mut d = c.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            c[d] += 1;
            if c[d] < origin[d] + extent[d] {
                break;
            }
            c[d] = origin[d];
        }
    }
}

/// Fraction of voxels that are zero.
pub fn zero_fraction(mask: &Mask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.zero_count() as f64 / mask.len() as f64
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    Ok(())
}

/// `floor(beta * d)`, tolerant of rounding just below an exact integer.
pub fn scaled_extent(beta: f64, d: usize) -> usize {
    (beta * d as f64 + 1e-9).floor() as usize
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if !(1..=3).contains(&shape.len()) || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            op: "maskgen",
            detail: format!("expected a non-empty 1D-3D grid, got {shape:?}"),
        });
    }
    Ok(())
}

fn block_extent(shape: &[usize], beta: f64) -> Result<Vec<usize>> {
    check_beta(beta)?;
    check_shape(shape)?;
    let ext: Vec<usize> = shape.iter().map(|&d| scaled_extent(beta, d)).collect();
    if ext.iter().any(|&e| e == 0) {
        return Err(Error::InvalidArgument(format!(
            "beta {beta} gives an empty block on shape {shape:?}"
        )));
    }
    Ok(ext)
}

/// Single centred zero block of extent `floor(beta * d)` per axis, at offset
/// `floor((d - extent) / 2)`.
pub fn gen_zero_centered(shape: &[usize], beta: f64) -> Result<Mask> {
    let ext = block_extent(shape, beta)?;
    let origin: Vec<usize> = shape.iter().zip(&ext).map(|(&d, &e)| (d - e) / 2).collect();
    let mut m = Mask::ones(shape);
    m.clear_box(&origin, &ext);
    Ok(m)
}

/// Same block size as [`gen_zero_centered`], placed uniformly at random.
pub fn gen_zero_block_random_offset(shape: &[usize], beta: f64, seed: u64) -> Result<Mask> {
    let ext = block_extent(shape, beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin: Vec<usize> = shape
        .iter()
        .zip(&ext)
        .map(|(&d, &e)| rng.gen_range(0..=d - e))
        .collect();
    let mut m = Mask::ones(shape);
    m.clear_box(&origin, &ext);
    Ok(m)
}

/// `n_cubes` zero blocks of extent `floor(beta * d)`, uniformly placed;
/// overlaps are allowed.
pub fn gen_random_cubes(shape: &[usize], beta: f64, n_cubes: usize, seed: u64) -> Result<Mask> {
    if n_cubes == 0 {
        return Err(Error::InvalidArgument("n_cubes must be >= 1".into()));
    }
    let ext = block_extent(shape, beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mask::ones(shape);
    for _ in 0..n_cubes {
        let origin: Vec<usize> = shape
            .iter()
            .zip(&ext)
            .map(|(&d, &e)| rng.gen_range(0..=d - e))
            .collect();
        m.clear_box(&origin, &ext);
    }
    Ok(m)
}

/// Which face a contact slab touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    #[default]
    Low,
    High,
}

/// Slab of extent `floor(beta * d_axis)` along `axis`, full extent elsewhere.
pub fn gen_contact(shape: &[usize], beta: f64, axis: usize, side: Side) -> Result<Mask> {
    check_beta(beta)?;
    check_shape(shape)?;
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for {}-D shape",
            shape.len()
        )));
    }
    let e = scaled_extent(beta, shape[axis]);
    if e == 0 {
        return Err(Error::InvalidArgument(format!(
            "beta {beta} gives an empty slab along axis {axis} of {shape:?}"
        )));
    }
    let mut ext = shape.to_vec();
    ext[axis] = e;
    let mut origin = vec![0; shape.len()];
    if side == Side::High {
        origin[axis] = shape[axis] - e;
    }
    let mut m = Mask::ones(shape);
    m.clear_box(&origin, &ext);
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    ZeroCentered,
    RandomCubes,
    Contact,
}

/// Mask generation settings used by the trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub beta: f64,
    pub n_cubes: usize,
    pub axis: usize,
    pub side: Side,
    /// Place the zero-centred block at a uniformly random offset instead.
    pub random_offset: bool,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::ZeroCentered,
            beta: 2.0 / 3.0,
            n_cubes: 27,
            axis: 0,
            side: Side::Low,
            random_offset: false,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if self.n_cubes == 0 {
            return Err(Error::InvalidArgument("n_cubes must be >= 1".into()));
        }
        Ok(())
    }

    /// Generate a mask with the spec's own seed.
    pub fn generate(&self, shape: &[usize]) -> Result<Mask> {
        self.generate_with_seed(shape, self.seed)
    }

    /// Generate a mask; `seed` drives any random placement.
    pub fn generate_with_seed(&self, shape: &[usize], seed: u64) -> Result<Mask> {
        match self.strategy {
            MaskStrategy::ZeroCentered if self.random_offset => {
                gen_zero_block_random_offset(shape, self.beta, seed)
            }
            MaskStrategy::ZeroCentered => gen_zero_centered(shape, self.beta),
            MaskStrategy::RandomCubes => gen_random_cubes(shape, self.beta, self.n_cubes, seed),
            MaskStrategy::Contact => gen_contact(shape, self.beta, self.axis, self.side),
        }
    }
}
