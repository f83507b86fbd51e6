//! Dense 4-axis grids in BCHW layout.
//!
//! `Grid<T>` is the carrier for frame latents, injected noise, and control
//! maps. The pipeline runs on `Grid<f32>` (aliased as [`LatentGrid`]);
//! trajectory tests use `Grid<f64>` where round-trip tolerances demand it.
//! Persistence is flat little-endian f32 plus a JSON sidecar describing the
//! shape, matching the on-disk latent format.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Element type bound for grids: f32 in the pipeline, f64 in tests.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Axis sizes of a grid, batch-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { batch, channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.channels, self.height, self.width)
    }
}

/// A dense BCHW array. Planes (fixed batch and channel) are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    shape: GridShape,
    data: Vec<T>,
}

/// The pipeline's working precision.
pub type LatentGrid = Grid<f32>;

impl<T: Scalar> Grid<T> {
    pub fn zeros(shape: GridShape) -> Self {
        Self { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn filled(shape: GridShape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: GridShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(CoreError::shape_mismatch(
                format!("{} elements for {shape}", shape.len()),
                data.len(),
            ));
        }
        Ok(Self { shape, data })
    }

    /// 1x1x1x1 grid holding a single value; scalar cases in tests use this.
    pub fn scalar(value: T) -> Self {
        Self { shape: GridShape::new(1, 1, 1, 1), data: vec![value] }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(b < self.shape.batch && c < self.shape.channels);
        debug_assert!(y < self.shape.height && x < self.shape.width);
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.offset(b, c, y, x);
        self.data[i] = value;
    }

    /// Contiguous H*W slice for one (batch, channel) plane.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let start = self.offset(b, c, 0, 0);
        &self.data[start..start + self.shape.plane_len()]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let start = self.offset(b, c, 0, 0);
        let len = self.shape.plane_len();
        &mut self.data[start..start + len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self { shape: self.shape, data })
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::shape_mismatch(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(context.to_string()));
        }
        Ok(())
    }

    /// Maximum absolute difference; shapes must match.
    pub fn linf_distance(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut max = 0.0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let d = (a.to_f64().unwrap() - b.to_f64().unwrap()).abs();
            if d > max {
                max = d;
            }
        }
        Ok(max)
    }

    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|v| v.to_f64().unwrap()).sum();
        sum / self.data.len() as f64
    }

    /// Population variance over all elements.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let ss: f64 = self
            .data
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap() - mean;
                d * d
            })
            .sum();
        ss / self.data.len() as f64
    }

    pub fn cast<U: Scalar>(&self) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// Seeded Gaussian noise description: identical seed yields identical draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mu: f64,
    pub sigma2: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(mu: f64, sigma2: f64, seed: u64) -> Result<Self> {
        if sigma2 < 0.0 || !sigma2.is_finite() {
            return Err(CoreError::InvalidParameter(format!(
                "noise variance must be non-negative, got {sigma2}"
            )));
        }
        Ok(Self { mu, sigma2, seed })
    }

    /// Standard normal, zero mean unit variance.
    pub fn standard(seed: u64) -> Self {
        Self { mu: 0.0, sigma2: 1.0, seed }
    }
}

impl<T: Scalar> Grid<T> {
    /// Fill a grid with Gaussian draws. Draws happen in f64 so the stream is
    /// identical whatever the target precision.
    pub fn noise(shape: GridShape, spec: &NoiseSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sigma = spec.sigma2.sqrt();
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(spec.mu + sigma * z).unwrap()
            })
            .collect();
        Self { shape, data }
    }
}

#[derive(Serialize, Deserialize)]
struct LatentSidecar {
    shape: [usize; 4],
    layout: String,
    dtype: String,
}

fn sidecar_path(bin_path: &Path) -> std::path::PathBuf {
    bin_path.with_extension("json")
}

/// Write a latent as flat little-endian f32 with a JSON shape sidecar.
pub fn save_latent(grid: &LatentGrid, bin_path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(grid.data().len() * 4);
    for v in grid.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(bin_path)?;
    f.write_all(&buf)?;

    let s = grid.shape();
    let sidecar = LatentSidecar {
        shape: [s.batch, s.channels, s.height, s.width],
        layout: "BCHW".to_string(),
        dtype: "f32".to_string(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(sidecar_path(bin_path), json)?;
    Ok(())
}

/// Read a latent written by [`save_latent`].
pub fn load_latent(bin_path: &Path) -> Result<LatentGrid> {
    let sidecar: LatentSidecar =
        serde_json::from_str(&fs::read_to_string(sidecar_path(bin_path))?)?;
    if sidecar.layout != "BCHW" {
        return Err(CoreError::InvalidParameter(format!(
            "unsupported layout {}",
            sidecar.layout
        )));
    }
    if sidecar.dtype != "f32" {
        return Err(CoreError::InvalidParameter(format!(
            "unsupported dtype {}",
            sidecar.dtype
        )));
    }
    let shape = GridShape::new(
        sidecar.shape[0],
        sidecar.shape[1],
        sidecar.shape[2],
        sidecar.shape[3],
    );
    let mut bytes = Vec::new();
    fs::File::open(bin_path)?.read_to_end(&mut bytes)?;
    if bytes.len() != shape.len() * 4 {
        return Err(CoreError::shape_mismatch(
            format!("{} bytes for {shape}", shape.len() * 4),
            bytes.len(),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Grid::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_is_contiguous_and_indexed_correctly() {
        let shape = GridShape::new(2, 3, 4, 5);
        let data: Vec<f32> = (0..shape.len()).map(|i| i as f32).collect();
        let g = Grid::from_vec(shape, data).unwrap();
        assert_eq!(g.get(0, 0, 0, 0), 0.0);
        assert_eq!(g.get(1, 2, 3, 4), (shape.len() - 1) as f32);
        let p = g.plane(1, 0);
        assert_eq!(p.len(), 20);
        assert_eq!(p[0], g.get(1, 0, 0, 0));
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let shape = GridShape::new(1, 1, 2, 2);
        assert!(Grid::<f32>::from_vec(shape, vec![0.0; 3]).is_err());
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let shape = GridShape::new(1, 2, 4, 4);
        let spec = NoiseSpec::new(0.5, 2.0, 99).unwrap();
        let a: Grid<f64> = Grid::noise(shape, &spec);
        let b: Grid<f64> = Grid::noise(shape, &spec);
        assert_eq!(a, b);
        let c: Grid<f64> = Grid::noise(shape, &NoiseSpec::new(0.5, 2.0, 100).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn noise_stream_matches_across_precisions() {
        let shape = GridShape::new(1, 1, 8, 8);
        let spec = NoiseSpec::standard(7);
        let a: Grid<f32> = Grid::noise(shape, &spec);
        let b: Grid<f64> = Grid::noise(shape, &spec);
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn negative_variance_rejected() {
        assert!(NoiseSpec::new(0.0, -1.0, 0).is_err());
    }

    #[test]
    fn latent_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lat.bin");
        let g: LatentGrid = Grid::noise(GridShape::new(2, 1, 3, 3), &NoiseSpec::standard(5));
        save_latent(&g, &path).unwrap();
        let back = load_latent(&path).unwrap();
        assert_eq!(g, back);
    }
}
