use rand::Rng as _;

use super::{PointCloud, VoxelGrid};
use crate::error::{Error, Result};
use crate::rng;

/// An exposed face of an occupied voxel: `axis` is the face normal's axis,
/// `positive` its direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub voxel: [usize; 3],
    pub axis: usize,
    pub positive: bool,
}

/// Faces of occupied voxels whose neighbor is empty or out of bounds.
pub fn exposed_faces(grid: &VoxelGrid) -> Vec<Face> {
    let [dx, dy, dz] = grid.dims();
    let dims = [dx, dy, dz];
    let mut faces = Vec::new();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                if !grid.is_occupied(x, y, z) {
                    continue;
                }
                let v = [x, y, z];
                for axis in 0..3 {
                    for positive in [false, true] {
                        let mut n = v;
                        let exposed = if positive {
                            n[axis] += 1;
                            n[axis] >= dims[axis] || !grid.is_occupied(n[0], n[1], n[2])
                        } else if v[axis] == 0 {
                            true
                        } else {
                            n[axis] -= 1;
                            !grid.is_occupied(n[0], n[1], n[2])
                        };
                        if exposed {
                            faces.push(Face { voxel: v, axis, positive });
                        }
                    }
                }
            }
        }
    }
    faces
}

/// Area-uniform samples over the exposed surface, in voxel coordinates
/// (voxel `(i, j, k)` spans `[i, i+1] × [j, j+1] × [k, k+1]`).
pub fn sample_surface_raw(grid: &VoxelGrid, n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let faces = exposed_faces(grid);
    if faces.is_empty() {
        return Err(Error::EmptyShape);
    }
    let mut rng = rng::stream(seed, "surface");
    let points = (0..n)
        .map(|_| {
            // Unit faces all have equal area, so a uniform face pick is area-uniform.
            let f = faces[rng.gen_range(0..faces.len())];
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            let (a, b) = ((f.axis + 1) % 3, (f.axis + 2) % 3);
            let mut p = [0.0; 3];
            p[f.axis] = f.voxel[f.axis] as f64 + if f.positive { 1.0 } else { 0.0 };
            p[a] = f.voxel[a] as f64 + u;
            p[b] = f.voxel[b] as f64 + v;
            p
        })
        .collect();
    Ok(points)
}

/// [`sample_surface_raw`] followed by canonical normalization.
pub fn sample_surface(grid: &VoxelGrid, n: usize, seed: u64) -> Result<PointCloud> {
    Ok(PointCloud::new(sample_surface_raw(grid, n, seed)?)?.normalized())
}
