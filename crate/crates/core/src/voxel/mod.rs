//! Dense voxel grids and point clouds.

mod io;
mod surface;

pub use io::{
    decode_cloud, decode_grid, encode_cloud, encode_grid, read_cloud, read_grid, write_cloud,
    write_grid,
};
pub use surface::{exposed_faces, sample_surface, sample_surface_raw, Face};

use crate::error::{Error, Result};

/// Threshold used to binarize denoiser output.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Canonical number of surface samples per shape.
pub const DEFAULT_CLOUD_SIZE: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Continuous,
    Binary,
}

/// A dense scalar field over a `dims[0] × dims[1] × dims[2]` lattice, stored
/// x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    values: Vec<f32>,
    kind: GridKind,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], values: Vec<f32>, kind: GridKind) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::DimMismatch(format!("zero extent in {dims:?}")));
        }
        let len = dims[0] * dims[1] * dims[2];
        if values.len() != len {
            return Err(Error::DimMismatch(format!(
                "{dims:?} needs {len} cells, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if kind == GridKind::Binary {
            if let Some(i) = values.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "binary grid has value {} at cell {i}",
                    values[i]
                )));
            }
        }
        Ok(Self { dims, values, kind })
    }

    pub fn zeros(dims: [usize; 3], kind: GridKind) -> Self {
        let len = dims.iter().product();
        Self { dims, values: vec![0.0; len], kind }
    }

    /// Binary grid whose occupancy is given by `f(x, y, z)`.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(if f(x, y, z) { 1.0 } else { 0.0 });
                }
            }
        }
        Self { dims, values, kind: GridKind::Binary }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    /// Occupancy test for binary grids; continuous grids use the default
    /// threshold.
    #[inline]
    pub fn is_occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.get(x, y, z) >= DEFAULT_THRESHOLD
    }

    pub fn occupied_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= DEFAULT_THRESHOLD).count()
    }

    pub fn occupancy(&self) -> f64 {
        self.occupied_count() as f64 / self.len() as f64
    }

    /// Cells `>= tau` become 1, everything else 0.
    pub fn threshold(&self, tau: f32) -> Result<VoxelGrid> {
        if let Some(index) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let values = self
            .values
            .iter()
            .map(|&v| if v >= tau { 1.0 } else { 0.0 })
            .collect();
        Ok(Self { dims: self.dims, values, kind: GridKind::Binary })
    }

    /// Continuous grid with the same values, e.g. as a diffusion state.
    pub fn to_continuous(&self) -> VoxelGrid {
        Self { dims: self.dims, values: self.values.clone(), kind: GridKind::Continuous }
    }

    /// Mean-pools non-overlapping `factor³` blocks and re-thresholds at 0.5.
    pub fn downsample(&self, factor: usize) -> Result<VoxelGrid> {
        self.mean_pool(factor)?.threshold(DEFAULT_THRESHOLD)
    }

    /// Mean-pools non-overlapping `factor³` blocks into a continuous grid.
    pub fn mean_pool(&self, factor: usize) -> Result<VoxelGrid> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return Err(Error::DimMismatch(format!(
                "{:?} not divisible by {factor}",
                self.dims
            )));
        }
        let out = self.dims.map(|d| d / factor);
        let norm = (factor * factor * factor) as f32;
        let mut values = vec![0.0f32; out.iter().product()];
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let o = x / factor + out[0] * (y / factor + out[1] * (z / factor));
                    values[o] += self.get(x, y, z) / norm;
                }
            }
        }
        VoxelGrid::new(out, values, GridKind::Continuous)
    }

    /// Rotates a cubic grid by 90° about `axis` (0 = x, 1 = y, 2 = z),
    /// `quarter_turns` times counter-clockwise.
    pub fn rotate90(&self, axis: usize, quarter_turns: usize) -> Result<VoxelGrid> {
        let d = self.dims[0];
        if self.dims != [d, d, d] {
            return Err(Error::DimMismatch("rotation needs a cubic grid".into()));
        }
        let mut cur = self.clone();
        for _ in 0..quarter_turns % 4 {
            let mut values = vec![0.0f32; cur.len()];
            for z in 0..d {
                for y in 0..d {
                    for x in 0..d {
                        let (nx, ny, nz) = match axis {
                            0 => (x, d - 1 - z, y),
                            1 => (z, y, d - 1 - x),
                            _ => (d - 1 - y, x, z),
                        };
                        values[nx + d * (ny + d * nz)] = cur.get(x, y, z);
                    }
                }
            }
            cur.values = values;
        }
        Ok(cur)
    }
}

/// A set of 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Frame that centers this cloud at the origin with unit max radius.
    pub fn canonical_frame(&self) -> Normalization {
        let center = self.centroid();
        let radius = self
            .points
            .iter()
            .map(|p| dist(p, &center))
            .fold(0.0f64, f64::max);
        Normalization { center, scale: if radius > 0.0 { 1.0 / radius } else { 1.0 } }
    }

    /// Centroid at the origin, max distance from the origin 1. A single
    /// point (or coincident points) is only centered.
    pub fn normalized(&self) -> PointCloud {
        self.canonical_frame().apply(self)
    }
}

/// Affine map `p ↦ (p − center) · scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| [0, 1, 2].map(|k| (p[k] - self.center[k]) * self.scale))
                .collect(),
        }
    }
}

#[inline]
pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dist2(a, b).sqrt()
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
