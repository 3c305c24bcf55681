//! `ICVX` grid files and `ICPC` point-cloud files, little-endian.
//!
//! Grid: `"ICVX" | version u8 = 1 | kind u8 (0 f32, 1 u8) | dims 3 × u16 |
//! payload`, x-fastest. Cloud: `"ICPC" | count u32 | count × 3 × f32`.

use std::fs;
use std::path::Path;

use super::{GridKind, PointCloud, VoxelGrid};
use crate::error::{Error, Result};

const GRID_MAGIC: &[u8; 4] = b"ICVX";
const CLOUD_MAGIC: &[u8; 4] = b"ICPC";
const GRID_VERSION: u8 = 1;
const GRID_HEADER: usize = 4 + 1 + 1 + 6;

pub fn encode_grid(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let dims = grid.dims();
    if dims.iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::DimMismatch(format!("{dims:?} exceeds u16 extents")));
    }
    let mut out = Vec::with_capacity(GRID_HEADER + grid.len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    out.push(GRID_VERSION);
    out.push(match grid.kind() {
        GridKind::Continuous => 0,
        GridKind::Binary => 1,
    });
    for d in dims {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    match grid.kind() {
        GridKind::Continuous => {
            for v in grid.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        GridKind::Binary => out.extend(grid.values().iter().map(|&v| v as u8)),
    }
    Ok(out)
}

pub fn decode_grid(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format("missing ICVX magic".into()));
    }
    if bytes.len() < GRID_HEADER {
        return Err(Error::Truncated { expected: GRID_HEADER, found: bytes.len() });
    }
    if bytes[4] != GRID_VERSION {
        return Err(Error::Format(format!("unsupported grid version {}", bytes[4])));
    }
    let kind = match bytes[5] {
        0 => GridKind::Continuous,
        1 => GridKind::Binary,
        k => return Err(Error::Format(format!("unknown grid kind {k}"))),
    };
    let dim = |i: usize| u16::from_le_bytes([bytes[6 + 2 * i], bytes[7 + 2 * i]]) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let cells: usize = dims.iter().product();
    let width = if kind == GridKind::Continuous { 4 } else { 1 };
    let payload = &bytes[GRID_HEADER..];
    let expected = cells * width;
    if payload.len() < expected {
        return Err(Error::Truncated { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::DimMismatch(format!(
            "{dims:?} declares {expected} payload bytes, file carries {}",
            payload.len()
        )));
    }
    let values = match kind {
        GridKind::Continuous => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        GridKind::Binary => {
            if let Some(i) = payload.iter().position(|&b| b > 1) {
                return Err(Error::Format(format!("binary cell {i} holds {}", payload[i])));
            }
            payload.iter().map(|&b| b as f32).collect()
        }
    };
    VoxelGrid::new(dims, values, kind)
}

pub fn write_grid(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_grid(grid)?).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    decode_grid(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 4 || &bytes[..4] != CLOUD_MAGIC {
        return Err(Error::Format("missing ICPC magic".into()));
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated { expected: 8, found: bytes.len() });
    }
    let count = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let payload = &bytes[8..];
    let expected = count * 12;
    if payload.len() < expected {
        return Err(Error::Truncated { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::DimMismatch(format!("{count} points but {} payload bytes", payload.len())));
    }
    let points = payload
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    PointCloud::new(points)
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cloud(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    decode_cloud(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn binary_roundtrip_32() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let g = VoxelGrid::from_fn([32, 32, 32], |_, _, _| rng.gen_bool(0.3));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.icvx");
        write_grid(&g, &p).unwrap();
        assert_eq!(read_grid(&p).unwrap(), g);
        assert_eq!(encode_grid(&g).unwrap().len(), 12 + 32 * 32 * 32);
    }

    #[test]
    fn header_layout_is_exact() {
        let g = VoxelGrid::new([2, 1, 1], vec![1.5, -0.25], GridKind::Continuous).unwrap();
        let b = encode_grid(&g).unwrap();
        assert_eq!(&b[..12], &[b'I', b'C', b'V', b'X', 1, 0, 2, 0, 1, 0, 1, 0]);
        assert_eq!(&b[12..16], &1.5f32.to_le_bytes());
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut b = encode_grid(&VoxelGrid::zeros([2, 2, 2], GridKind::Binary)).unwrap();
        b[0] = b'X';
        assert!(matches!(decode_grid(&b), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_truncation() {
        let small = VoxelGrid::zeros([16, 16, 16], GridKind::Binary);
        let mut b = encode_grid(&small).unwrap();
        b[6..12].copy_from_slice(&[32, 0, 32, 0, 32, 0]);
        assert!(matches!(
            decode_grid(&b),
            Err(Error::Truncated { expected: 32768, found: 4096 })
        ));
        assert!(matches!(decode_grid(&b[..9]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn oversized_payload_is_dim_mismatch() {
        let mut b = encode_grid(&VoxelGrid::zeros([2, 2, 2], GridKind::Binary)).unwrap();
        b.push(0);
        assert!(matches!(decode_grid(&b), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn cloud_roundtrip_and_errors() {
        let c = PointCloud::new(vec![[0.5, -1.0, 2.25], [0.0, 0.0, 1.0]]).unwrap();
        let b = encode_cloud(&c);
        assert_eq!(decode_cloud(&b).unwrap(), c);
        assert!(matches!(decode_cloud(&b[..15]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_cloud(b"ICVX\0\0\0\0"), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn continuous_roundtrip_exact(
            values in prop::collection::vec(-1e6f32..1e6, 27),
        ) {
            let g = VoxelGrid::new([3, 3, 3], values, GridKind::Continuous).unwrap();
            prop_assert_eq!(decode_grid(&encode_grid(&g).unwrap()).unwrap(), g);
        }
    }
}
