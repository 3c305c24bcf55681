//! Contrastive image-shape pre-training at toy scale.
//!
//! Paired encoders map a depth render and a voxel shape into a shared
//! `f`-dimensional cosine space. This module holds the pure pieces
//! (similarity matrix, symmetric cross-entropy, Slerp, PCA, embedding files);
//! [`model`] holds the encoders and the training loop.

pub mod model;

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::log_sum_exp;
use crate::error::{Error, Result};
use crate::toy_data::Image;

pub use model::{pool_shape, retrieval_top1, CispConfig, CispModel, CispPair, CispTrainConfig, MAX_LOGIT_SCALE};

/// Default embedding size.
pub const EMBED_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) {
            return Err(Error::DegenerateEmbedding(0));
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        let (na, nb) = (self.norm(), other.norm());
        if !(na > 0.0) || !(nb > 0.0) {
            return Err(Error::DegenerateEmbedding(0));
        }
        Ok(self.dot(other) / (na * nb))
    }
}

fn normalize_all(embs: &[Embedding]) -> Result<Vec<Embedding>> {
    embs.iter()
        .enumerate()
        .map(|(i, e)| e.normalized().map_err(|_| Error::DegenerateEmbedding(i)))
        .collect()
}

/// `sim[r][c] = scale · cos(images[r], shapes[c])`.
pub fn similarity_matrix(images: &[Embedding], shapes: &[Embedding], scale: f64) -> Result<Vec<Vec<f64>>> {
    if images.len() != shapes.len() {
        return Err(Error::ShapeMismatch(format!("{} image vs {} shape embeddings", images.len(), shapes.len())));
    }
    let (a, b) = (normalize_all(images)?, normalize_all(shapes)?);
    Ok(a.iter().map(|x| b.iter().map(|y| scale * x.dot(y)).collect()).collect())
}

/// Mean over rows of `−log softmax(row)[diag]`.
fn row_cross_entropy(sim: &[Vec<f64>]) -> f64 {
    sim.iter().enumerate().map(|(i, row)| log_sum_exp(row) - row[i]).sum::<f64>() / sim.len() as f64
}

/// Symmetric cross-entropy with the diagonal as targets, averaged over the
/// image→shape (rows) and shape→image (columns) directions.
pub fn contrastive_loss(sim: &[Vec<f64>]) -> Result<f64> {
    let n = sim.len();
    if n == 0 || sim.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch("contrastive loss needs a non-empty square matrix".into()));
    }
    let t: Vec<Vec<f64>> = (0..n).map(|c| (0..n).map(|r| sim[r][c]).collect()).collect();
    Ok(0.5 * (row_cross_entropy(sim) + row_cross_entropy(&t)))
}

/// Spherical interpolation between the unit directions of `a` and `b`.
pub fn slerp(a: &Embedding, b: &Embedding, lam: f64) -> Result<Embedding> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidArgument(format!("slerp λ must be in [0, 1], got {lam}")));
    }
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("slerp between sizes {} and {}", a.dim(), b.dim())));
    }
    let (a, b) = (a.normalized()?, b.normalized().map_err(|_| Error::DegenerateEmbedding(1))?);
    let omega = a.dot(&b).clamp(-1.0, 1.0).acos();
    if std::f64::consts::PI - omega < 1e-6 {
        return Err(Error::AmbiguousPath);
    }
    if lam == 0.0 {
        return Ok(a);
    }
    if lam == 1.0 {
        return Ok(b);
    }
    let (wa, wb) = if omega < 1e-6 {
        (1.0 - lam, lam)
    } else {
        let s = omega.sin();
        (((1.0 - lam) * omega).sin() / s, (lam * omega).sin() / s)
    };
    Embedding(a.0.iter().zip(&b.0).map(|(x, y)| wa * x + wb * y).collect()).normalized()
}

/// `steps` evenly spaced Slerp points from `a` (λ = 0) to `b` (λ = 1).
pub fn slerp_path(a: &Embedding, b: &Embedding, steps: usize) -> Result<Vec<Embedding>> {
    if steps < 2 {
        return Err(Error::InvalidArgument("an interpolation path needs at least 2 steps".into()));
    }
    (0..steps).map(|i| slerp(a, b, i as f64 / (steps - 1) as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// One row of `k'` coordinates per input, `k' ≤ k`.
    pub points: Vec<Vec<f64>>,
    /// Fraction of total variance along each returned axis.
    pub explained: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Mean-centered projection onto the top-`k` principal axes. When the data
/// have rank below `k`, only the non-degenerate axes are returned.
pub fn pca_project(embs: &[Embedding], k: usize) -> Result<Projection> {
    if embs.len() < k + 1 {
        return Err(Error::InsufficientItems(format!("PCA to {k} dims needs {} embeddings, got {}", k + 1, embs.len())));
    }
    let f = embs[0].dim();
    if embs.iter().any(|e| e.dim() != f) {
        return Err(Error::ShapeMismatch("embeddings of different sizes".into()));
    }
    let n = embs.len();
    let mean: Vec<f64> = (0..f).map(|j| embs.iter().map(|e| e.0[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, f, |i, j| embs[i].0[j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = order.into_iter().take(k).filter(|&i| eig.eigenvalues[i] > tol).collect();
    if keep.len() < k {
        log::warn!("embedding rank {} below requested {k}; returning {} axes", keep.len(), keep.len());
    }
    let axes: Vec<Vec<f64>> = keep
        .iter()
        .map(|&i| {
            let col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Deterministic sign: largest-magnitude component positive.
            let big = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if big < 0.0 {
                col.iter().map(|v| -v).collect()
            } else {
                col
            }
        })
        .collect();
    let points = (0..n)
        .map(|i| axes.iter().map(|ax| ax.iter().enumerate().map(|(j, a)| a * centered[(i, j)]).sum()).collect())
        .collect();
    let explained = keep.iter().map(|&i| eig.eigenvalues[i] / total).collect();
    Ok(Projection { points, explained, axes, mean })
}

/// Mean-pooled render as a flat `cells × cells` vector (the auxiliary image
/// conditioning stream).
pub fn aux_image_vector(image: &Image, cells: usize) -> Result<Vec<f64>> {
    if cells == 0 || image.width % cells != 0 || image.height % cells != 0 {
        return Err(Error::DimMismatch(format!("{}×{} image into {cells}×{cells} cells", image.width, image.height)));
    }
    let (bw, bh) = (image.width / cells, image.height / cells);
    let mut out = vec![0.0; cells * cells];
    for v in 0..image.height {
        for u in 0..image.width {
            out[(v / bh) * cells + u / bw] += image.get(u, v) as f64;
        }
    }
    let area = (bw * bh) as f64;
    out.iter_mut().for_each(|x| *x /= area);
    Ok(out)
}

/// Mean cosine similarity within and across labels.
pub fn class_similarity(embs: &[Embedding], labels: &[usize]) -> Result<(f64, f64)> {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let c = embs[i].cosine(&embs[j])?;
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    if ni == 0 || nx == 0 {
        return Err(Error::InsufficientItems("need pairs within and across classes".into()));
    }
    Ok((intra / ni as f64, inter / nx as f64))
}

const ICEM_MAGIC: &[u8; 4] = b"ICEM";

pub fn encode_embeddings(embs: &[Embedding]) -> Result<Vec<u8>> {
    let f = embs.first().map_or(0, |e| e.dim());
    if embs.iter().any(|e| e.dim() != f) {
        return Err(Error::DimMismatch("embeddings of different sizes".into()));
    }
    if f > u16::MAX as usize {
        return Err(Error::DimMismatch(format!("embedding size {f} exceeds the file format")));
    }
    let mut out = Vec::with_capacity(10 + embs.len() * f * 4);
    out.extend_from_slice(ICEM_MAGIC);
    out.extend_from_slice(&(f as u16).to_le_bytes());
    out.extend_from_slice(&(embs.len() as u32).to_le_bytes());
    for e in embs {
        for v in &e.0 {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<Embedding>> {
    if bytes.len() < 4 || &bytes[..4] != ICEM_MAGIC {
        return Err(Error::Format("missing ICEM magic".into()));
    }
    if bytes.len() < 10 {
        return Err(Error::Truncated { expected: 10, found: bytes.len() });
    }
    let f = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let payload = &bytes[10..];
    let expected = f * count * 4;
    if payload.len() < expected {
        return Err(Error::Truncated { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::DimMismatch(format!("{count}×{f} embeddings with {} payload bytes", payload.len())));
    }
    let vals: Vec<f64> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    if f == 0 {
        return Ok(vec![Embedding(Vec::new()); count]);
    }
    vals.chunks(f).map(|c| Embedding::new(c.to_vec())).collect()
}

pub fn write_embeddings(embs: &[Embedding], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(embs)?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<Embedding>> {
    let path = path.as_ref();
    decode_embeddings(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
