//! Toy paired encoders and the contrastive training loop.
//!
//! Each tower is a small stride-1 convolution stack (input plus fixed
//! coordinate channels) followed by attention pooling: learned readout
//! queries score every position, the softmax-weighted features are
//! flattened and, together with the plain feature means, mapped linearly to
//! the embedding.

use rand::seq::SliceRandom;

use super::{Embedding, EMBED_DIM};
use crate::autodiff::{Graph, Optimizer, ParamStore, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::toy_data::Item;

const LOGIT_SCALE: &str = "logit_scale";
/// Upper clamp of the log temperature (scale 100).
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CispConfig {
    pub embed_dim: usize,
    /// Edge of the square input render.
    pub image_size: usize,
    /// Edge of the pooled shape grid the shape tower sees.
    pub shape_grid: usize,
    pub width: usize,
    pub layers: usize,
    /// Number of readout queries.
    pub heads: usize,
}

impl Default for CispConfig {
    fn default() -> Self {
        Self { embed_dim: EMBED_DIM, image_size: 32, shape_grid: 8, width: 12, layers: 2, heads: 4 }
    }
}

impl CispConfig {
    fn validate(&self) -> Result<()> {
        if [self.embed_dim, self.image_size, self.shape_grid, self.width, self.layers, self.heads].contains(&0) {
            return Err(Error::Config(format!("invalid CISP architecture {self:?}")));
        }
        Ok(())
    }

    fn to_meta(self) -> Tensor {
        let v = [self.embed_dim, self.image_size, self.shape_grid, self.width, self.layers, self.heads];
        Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).expect("meta shape")
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 6 {
            return Err(Error::Format("bad CISP meta tensor".into()));
        }
        let u = |i: usize| d[i] as usize;
        Ok(Self { embed_dim: u(0), image_size: u(1), shape_grid: u(2), width: u(3), layers: u(4), heads: u(5) })
    }
}

/// One aligned (render, shape) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CispPair {
    /// Row-major `image_size²` render.
    pub image: Vec<f64>,
    /// Mean-pooled `shape_grid³` occupancy.
    pub shape: Vec<f64>,
}

impl CispPair {
    pub fn from_item(item: &Item, config: &CispConfig) -> Result<Self> {
        if item.render.width != config.image_size || item.render.height != config.image_size {
            return Err(Error::DimMismatch(format!(
                "render {}×{}, model expects {}²",
                item.render.width, item.render.height, config.image_size
            )));
        }
        Ok(Self { image: item.render.data.iter().map(|&v| v as f64).collect(), shape: pool_shape(&item.grid, config)? })
    }
}

/// Pools a cubic grid down to the shape tower's resolution.
pub fn pool_shape(grid: &crate::voxel::VoxelGrid, config: &CispConfig) -> Result<Vec<f64>> {
    let d = grid.dims()[0];
    if grid.dims() != [d; 3] || d % config.shape_grid != 0 {
        return Err(Error::DimMismatch(format!("grid {:?} cannot pool to {}³", grid.dims(), config.shape_grid)));
    }
    Ok(grid.mean_pool(d / config.shape_grid)?.values().iter().map(|&v| v as f64).collect())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CispTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Parameter-name prefixes excluded from updates (e.g. `"shape."`).
    #[serde(default)]
    pub frozen: Vec<String>,
}

impl Default for CispTrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch: 10, lr: 3e-3, seed: 0, frozen: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tower {
    Image,
    Shape,
}

impl Tower {
    fn prefix(self) -> &'static str {
        match self {
            Tower::Image => "image",
            Tower::Shape => "shape",
        }
    }
}

/// Normalized coordinate channels for every axis longer than one cell.
fn coord_channels(space: [usize; 3]) -> (usize, Vec<f64>) {
    let [d, h, w] = space;
    let mut out = Vec::new();
    let mut n = 0;
    for (axis, ext) in [(0, d), (1, h), (2, w)] {
        if ext < 2 {
            continue;
        }
        n += 1;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = [z, y, x][axis];
                    out.push(2.0 * i as f64 / (ext - 1) as f64 - 1.0);
                }
            }
        }
    }
    (n, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CispModel {
    config: CispConfig,
    params: ParamStore,
}

impl CispModel {
    pub fn new(config: CispConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        for tower in [Tower::Image, Tower::Shape] {
            let (space, kernel) = Self::geometry(&config, tower);
            let k: usize = kernel.iter().product();
            let (nc, _) = coord_channels(space);
            let pre = tower.prefix();
            for i in 0..config.layers {
                let cin = if i == 0 { 1 + nc } else { config.width };
                let bound = 1.0 / ((cin * k) as f64).sqrt();
                let mut shape = vec![config.width, cin];
                shape.extend_from_slice(&kernel);
                p.insert(format!("{pre}.conv{i}.w"), Tensor::uniform(shape, bound, rng));
                p.insert(format!("{pre}.conv{i}.b"), Tensor::uniform(vec![config.width], bound, rng));
            }
            let flat = config.heads * config.width;
            p.insert(format!("{pre}.readout"), Tensor::uniform(vec![config.heads, config.width], 0.5, rng));
            let bound = 1.0 / (flat as f64).sqrt();
            p.insert(format!("{pre}.proj.w"), Tensor::uniform(vec![config.embed_dim, flat], bound, rng));
            p.insert(format!("{pre}.proj.b"), Tensor::uniform(vec![config.embed_dim, 1], bound, rng));
            let bound = 1.0 / (config.width as f64).sqrt();
            p.insert(format!("{pre}.proj.mean"), Tensor::uniform(vec![config.embed_dim, config.width], bound, rng));
        }
        p.insert(LOGIT_SCALE, Tensor::scalar((1.0f64 / 0.07).ln()));
        Ok(Self { config, params: p })
    }

    fn geometry(config: &CispConfig, tower: Tower) -> ([usize; 3], [usize; 3]) {
        match tower {
            Tower::Image => ([1, config.image_size, config.image_size], [1, 3, 3]),
            Tower::Shape => ([config.shape_grid; 3], [3, 3, 3]),
        }
    }

    pub fn config(&self) -> &CispConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Current similarity scale `exp(logit_scale)`.
    pub fn scale(&self) -> f64 {
        self.params.get(LOGIT_SCALE).expect("logit scale").data()[0].exp()
    }

    fn encode(&self, g: &mut Graph, params: &ParamStore, tower: Tower, input: &[f64]) -> Result<Var> {
        let c = &self.config;
        let (space, _) = Self::geometry(c, tower);
        let vol: usize = space.iter().product();
        if input.len() != vol {
            return Err(Error::ShapeMismatch(format!("{} tower expects {vol} values, got {}", tower.prefix(), input.len())));
        }
        let pre = tower.prefix();
        let bind = |g: &mut Graph, name: String| -> Result<Var> { Ok(g.param(&name, params.get(&name)?)) };
        let (nc, coords) = coord_channels(space);
        let mut data = input.to_vec();
        data.extend_from_slice(&coords);
        let mut h = g.input(vec![1 + nc, space[0], space[1], space[2]], data);
        for i in 0..c.layers {
            let w = bind(g, format!("{pre}.conv{i}.w"))?;
            let b = bind(g, format!("{pre}.conv{i}.b"))?;
            h = g.conv3d(h, w, b)?;
            h = g.silu(h);
            h = g.finite_or(h, &format!("{pre}.conv{i}"))?;
        }
        let feats = g.reshape(h, vec![c.width, vol])?;
        let q = bind(g, format!("{pre}.readout"))?;
        let scores = g.matmul(q, feats)?;
        let attn = g.softmax_rows(scores)?;
        let ft = g.transpose(feats)?;
        let pooled = g.matmul(attn, ft)?;
        let flat = g.reshape(pooled, vec![c.heads * c.width, 1])?;
        let pw = bind(g, format!("{pre}.proj.w"))?;
        let pb = bind(g, format!("{pre}.proj.b"))?;
        let out = g.matmul(pw, flat)?;
        let out = g.try_add(out, pb)?;
        let mean = g.mean_cols(feats);
        let mean = g.reshape(mean, vec![c.width, 1])?;
        let pm = bind(g, format!("{pre}.proj.mean"))?;
        let mean = g.matmul(pm, mean)?;
        let out = g.try_add(out, mean)?;
        g.reshape(out, vec![1, c.embed_dim])
    }

    /// Records the batch loss against `params`.
    pub fn batch_loss(&self, g: &mut Graph, params: &ParamStore, batch: &[&CispPair]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InsufficientItems("empty batch".into()));
        }
        let mut imgs = Vec::with_capacity(batch.len());
        let mut shps = Vec::with_capacity(batch.len());
        for p in batch {
            imgs.push(self.encode(g, params, Tower::Image, &p.image)?);
            shps.push(self.encode(g, params, Tower::Shape, &p.shape)?);
        }
        let ei = g.stack_rows(&imgs)?;
        let ei = g.normalize_rows(ei)?;
        let es = g.stack_rows(&shps)?;
        let es = g.normalize_rows(es)?;
        let est = g.transpose(es)?;
        let sim = g.matmul(ei, est)?;
        let ls = g.param(LOGIT_SCALE, params.get(LOGIT_SCALE)?);
        let sim = g.mul_exp(sim, ls)?;
        let rows = g.log_softmax_rows(sim)?;
        let rows = g.diag_mean(rows)?;
        let simt = g.transpose(sim)?;
        let cols = g.log_softmax_rows(simt)?;
        let cols = g.diag_mean(cols)?;
        let both = g.add(rows, cols);
        Ok(g.scale(both, -0.5))
    }

    /// Minibatch training; returns the mean loss of each epoch. A trailing
    /// batch of one item is folded into the previous batch.
    pub fn train(&mut self, pairs: &[CispPair], cfg: &CispTrainConfig) -> Result<Vec<f64>> {
        self.train_observed(pairs, cfg, |_, _, _| {})
    }

    /// [`train`](Self::train), calling `observe(epoch, mean_loss, model)`
    /// after every epoch. The step size follows a cosine decay from `lr` to
    /// `lr / 20`.
    pub fn train_observed(
        &mut self,
        pairs: &[CispPair],
        cfg: &CispTrainConfig,
        mut observe: impl FnMut(usize, f64, &CispModel),
    ) -> Result<Vec<f64>> {
        if cfg.batch < 2 || pairs.len() < 2 {
            return Err(Error::InsufficientItems(format!(
                "contrastive training needs batch >= 2 and >= 2 pairs (batch {}, pairs {})",
                cfg.batch,
                pairs.len()
            )));
        }
        let mut opt = Optimizer::adam(cfg.lr);
        let frozen: Vec<&str> = cfg.frozen.iter().map(String::as_str).collect();
        let mut rng = rng::stream(cfg.seed, "cisp-train");
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let progress = epoch as f64 / cfg.epochs.max(2).saturating_sub(1) as f64;
            let floor = cfg.lr / 20.0;
            opt.set_lr(floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos()));
            order.shuffle(&mut rng);
            let mut chunks: Vec<&[usize]> = order.chunks(cfg.batch).collect();
            if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
                let n = chunks.len();
                let start = (n - 2) * cfg.batch;
                chunks.truncate(n - 2);
                chunks.push(&order[start..]);
            }
            let mut total = 0.0;
            for idx in &chunks {
                let batch: Vec<&CispPair> = idx.iter().map(|&i| &pairs[i]).collect();
                let mut g = Graph::new();
                let loss = self.batch_loss(&mut g, &self.params, &batch)?;
                let value = g.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::NanLoss);
                }
                let grads = g.backward(loss)?;
                opt.step(&mut self.params, &grads, &frozen);
                let ls = &mut self.params.get_mut(LOGIT_SCALE)?.data_mut()[0];
                *ls = ls.clamp(0.0, MAX_LOGIT_SCALE);
                total += value;
            }
            let mean = total / chunks.len() as f64;
            log::debug!("cisp epoch {epoch}: loss {mean:.5}");
            curve.push(mean);
            observe(epoch, mean, self);
        }
        Ok(curve)
    }

    fn embed(&self, tower: Tower, input: &[f64]) -> Result<Embedding> {
        let mut g = Graph::new();
        let v = self.encode(&mut g, &self.params, tower, input)?;
        Embedding::new(g.value(v).to_vec())?.normalized()
    }

    /// Unit-norm image embedding.
    pub fn embed_image(&self, image: &[f64]) -> Result<Embedding> {
        self.embed(Tower::Image, image)
    }

    /// Unit-norm shape embedding of a pooled grid.
    pub fn embed_shape(&self, shape: &[f64]) -> Result<Embedding> {
        self.embed(Tower::Shape, shape)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut p = self.params.clone();
        p.insert("meta.cisp", self.config.to_meta());
        checkpoint::save(&p, path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut p = checkpoint::load(path)?;
        let config = CispConfig::from_meta(p.get("meta.cisp")?)?;
        config.validate()?;
        let fresh = Self::new(config, &mut rng::stream(0, "shape-check"))?;
        let mut params = ParamStore::new();
        for (n, t) in fresh.params.iter() {
            let got = p.get_mut(n)?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("checkpoint tensor `{n}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
            params.insert(n, got.clone());
        }
        Ok(Self { config, params })
    }
}

/// Fraction of images whose most similar shape is their own partner
/// (ties resolve to the lowest index).
pub fn retrieval_top1(images: &[Embedding], shapes: &[Embedding]) -> Result<f64> {
    if images.len() != shapes.len() || images.is_empty() {
        return Err(Error::SizeMismatch(format!("{} images vs {} shapes", images.len(), shapes.len())));
    }
    let sim = super::similarity_matrix(images, shapes, 1.0)?;
    let hits = sim
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == *i
        })
        .count();
    Ok(hits as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::toy_data::{generate_items, DatasetConfig};

    fn tiny() -> CispConfig {
        CispConfig { embed_dim: 4, image_size: 4, shape_grid: 2, width: 2, layers: 2, heads: 2 }
    }

    fn tiny_pairs(n: usize, seed: u64) -> Vec<CispPair> {
        let mut r = rng::stream(seed, "tiny-pairs");
        (0..n)
            .map(|_| CispPair {
                image: crate::schedule::standard_normal(16, &mut r),
                shape: crate::schedule::standard_normal(8, &mut r),
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = CispModel::new(tiny(), &mut rng::stream(1, "cisp-init")).unwrap();
        let pairs = tiny_pairs(3, 2);
        let batch: Vec<&CispPair> = pairs.iter().collect();
        let report = grad_check(model.params(), 1e-5, 6, &mut rng::stream(3, "gc"), |g, p| {
            model.batch_loss(g, p, &batch)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn graph_loss_matches_pure_loss() {
        let model = CispModel::new(tiny(), &mut rng::stream(4, "cisp-init")).unwrap();
        let pairs = tiny_pairs(4, 5);
        let batch: Vec<&CispPair> = pairs.iter().collect();
        let mut g = Graph::new();
        let l = model.batch_loss(&mut g, model.params(), &batch).unwrap();
        let ei: Vec<Embedding> = pairs.iter().map(|p| model.embed_image(&p.image).unwrap()).collect();
        let es: Vec<Embedding> = pairs.iter().map(|p| model.embed_shape(&p.shape).unwrap()).collect();
        let sim = super::super::similarity_matrix(&ei, &es, model.scale()).unwrap();
        assert!((g.value(l)[0] - super::super::contrastive_loss(&sim).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn duplicated_pairs_cannot_beat_floor() {
        let mut model = CispModel::new(tiny(), &mut rng::stream(6, "cisp-init")).unwrap();
        let base = tiny_pairs(2, 7);
        let pairs = vec![base[0].clone(), base[1].clone(), base[0].clone(), base[1].clone()];
        let cfg = CispTrainConfig { epochs: 40, batch: 4, lr: 1e-2, seed: 1, frozen: vec![] };
        let curve = model.train(&pairs, &cfg).unwrap();
        assert!(curve.iter().all(|&l| l >= 2f64.ln() - 1e-9), "{curve:?}");
    }

    #[test]
    fn training_lowers_loss_and_clamps_scale() {
        let mut model = CispModel::new(tiny(), &mut rng::stream(8, "cisp-init")).unwrap();
        let pairs = tiny_pairs(8, 9);
        let cfg = CispTrainConfig { epochs: 60, batch: 4, lr: 1e-2, seed: 2, frozen: vec![] };
        let curve = model.train(&pairs, &cfg).unwrap();
        assert!(curve.last().unwrap() < &(curve[0] * 0.8), "{curve:?}");
        let s = model.params().get(LOGIT_SCALE).unwrap().data()[0];
        assert!((0.0..=MAX_LOGIT_SCALE).contains(&s));
    }

    #[test]
    fn frozen_shape_tower_still_learns() {
        let mut model = CispModel::new(tiny(), &mut rng::stream(10, "cisp-init")).unwrap();
        let before = model.params().clone();
        let pairs = tiny_pairs(8, 11);
        let cfg = CispTrainConfig { epochs: 40, batch: 4, lr: 1e-2, seed: 3, frozen: vec!["shape.".into()] };
        let curve = model.train(&pairs, &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        for (n, t) in before.iter().filter(|(n, _)| n.starts_with("shape.")) {
            assert_eq!(model.params().get(n).unwrap(), t);
        }
        assert_ne!(model.params().get("image.proj.w").unwrap(), before.get("image.proj.w").unwrap());
    }

    #[test]
    fn embeddings_unit_and_retrieval_bounds() {
        let model = CispModel::new(tiny(), &mut rng::stream(12, "cisp-init")).unwrap();
        let pairs = tiny_pairs(5, 13);
        let ei: Vec<Embedding> = pairs.iter().map(|p| model.embed_image(&p.image).unwrap()).collect();
        assert!(ei.iter().all(|e| (e.norm() - 1.0).abs() < 1e-6));
        assert_eq!(retrieval_top1(&ei, &ei).unwrap(), 1.0);
        assert!(model.embed_image(&[0.0; 3]).is_err());
    }

    #[test]
    fn real_pairs_and_checkpoint() {
        let cfg = CispConfig { width: 2, heads: 1, ..CispConfig::default() };
        let items = generate_items(&DatasetConfig { n_per_class: 1, split: [1.0, 0.0, 0.0], dim: 32, seed: 0 }).unwrap();
        let pair = CispPair::from_item(&items[0], &cfg).unwrap();
        assert_eq!((pair.image.len(), pair.shape.len()), (1024, 512));
        let model = CispModel::new(cfg, &mut rng::stream(14, "cisp-init")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cisp.ickp");
        model.save(&path).unwrap();
        let back = CispModel::load(&path).unwrap();
        let (a, b) = (model.embed_shape(&pair.shape).unwrap(), back.embed_shape(&pair.shape).unwrap());
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
