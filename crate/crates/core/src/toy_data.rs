//! Procedural paired (render, shape) data.
//!
//! Five primitive classes rasterized analytically at any grid size, with
//! seeded size jitter and axis-aligned 90° poses, plus orthographic depth
//! renders and a JSON-lines manifest with stratified splits.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Optimizer, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::voxel::{write_grid, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Box,
    Sphere,
    Cylinder,
    Cross,
    Lshape,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] =
        [ShapeClass::Box, ShapeClass::Sphere, ShapeClass::Cylinder, ShapeClass::Cross, ShapeClass::Lshape];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Box => "box",
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cross => "cross",
            ShapeClass::Lshape => "lshape",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("known class")
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape class `{s}`")))
    }
}

/// Full description of one toy shape. Sizes are fractions of the grid edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub class: ShapeClass,
    /// Class parameters: box half-extents; sphere `[r, _, _]`; cylinder
    /// `[r, half_height, _]`; cross `[arm, half_thickness, _]`; L-shape
    /// `[leg, half_thickness, half_depth]`.
    pub size: [f64; 3],
    /// Quarter turns about x, y, z, applied in that order.
    pub pose: [usize; 3],
    pub dim: usize,
    pub seed: u64,
}

impl ToySpec {
    /// Default-size shape with seeded jitter and pose.
    pub fn random(class: ShapeClass, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "toy-spec");
        let mut j = |lo: f64, hi: f64| r.gen_range(lo..hi);
        let size = match class {
            ShapeClass::Box => [j(0.26, 0.4), j(0.26, 0.4), j(0.14, 0.22)],
            ShapeClass::Sphere => [j(0.3, 0.44), 0.0, 0.0],
            ShapeClass::Cylinder => [j(0.14, 0.22), j(0.34, 0.44), 0.0],
            ShapeClass::Cross => [j(0.36, 0.46), j(0.08, 0.13), 0.0],
            ShapeClass::Lshape => [j(0.34, 0.44), j(0.1, 0.15), j(0.12, 0.2)],
        };
        let pose = [r.gen_range(0..4), r.gen_range(0..4), r.gen_range(0..4)];
        Self { class, size, pose, dim, seed }
    }
}

/// Deterministic rasterization of `spec`: a voxel is occupied when its center
/// lies inside the primitive.
pub fn generate_shape(spec: &ToySpec) -> Result<VoxelGrid> {
    if spec.dim == 0 {
        return Err(Error::InvalidArgument("grid dim must be >= 1".into()));
    }
    let d = spec.dim;
    let s = spec.size;
    let inside = |p: [f64; 3]| -> bool {
        let [x, y, z] = p;
        match spec.class {
            ShapeClass::Box => x.abs() <= s[0] && y.abs() <= s[1] && z.abs() <= s[2],
            ShapeClass::Sphere => x * x + y * y + z * z <= s[0] * s[0],
            ShapeClass::Cylinder => x * x + y * y <= s[0] * s[0] && z.abs() <= s[1],
            ShapeClass::Cross => {
                let bar = |a: f64, b: f64, c: f64| a.abs() <= s[0] && b.abs() <= s[1] && c.abs() <= s[1];
                bar(x, y, z) || bar(y, z, x) || bar(z, x, y)
            }
            ShapeClass::Lshape => {
                // Two legs meeting at the (−leg, −leg) corner of the xy plane.
                let (l, t, h) = (s[0], s[1], s[2]);
                let in_z = z.abs() <= h;
                let foot = x >= -l && x <= l && y >= -l && y <= -l + 2.0 * t;
                let upright = x >= -l && x <= -l + 2.0 * t && y >= -l && y <= l;
                in_z && (foot || upright)
            }
        }
    };
    let mut grid = VoxelGrid::from_fn([d, d, d], |x, y, z| {
        let c = |i: usize| (i as f64 + 0.5) / d as f64 - 0.5;
        inside([c(x), c(y), c(z)])
    });
    for (axis, &turns) in spec.pose.iter().enumerate() {
        grid = grid.rotate90(axis, turns)?;
    }
    if grid.occupied_count() == 0 {
        return Err(Error::EmptyShape);
    }
    Ok(grid)
}

/// Orthographic view direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "+x")]
    PosX,
    #[serde(rename = "-x")]
    NegX,
    #[serde(rename = "+y")]
    PosY,
    #[serde(rename = "-y")]
    NegY,
    #[serde(rename = "+z")]
    PosZ,
    #[serde(rename = "-z")]
    NegZ,
}

impl View {
    pub const ALL: [View; 6] = [View::PosX, View::NegX, View::PosY, View::NegY, View::PosZ, View::NegZ];

    pub fn tag(self) -> &'static str {
        match self {
            View::PosX => "px",
            View::NegX => "nx",
            View::PosY => "py",
            View::NegY => "ny",
            View::PosZ => "pz",
            View::NegZ => "nz",
        }
    }

    fn axis(self) -> usize {
        match self {
            View::PosX | View::NegX => 0,
            View::PosY | View::NegY => 1,
            View::PosZ | View::NegZ => 2,
        }
    }

    fn ascending(self) -> bool {
        matches!(self, View::PosX | View::PosY | View::PosZ)
    }
}

/// Single-channel image, row-major (`v` rows of `u` pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    /// Rotates a square image a quarter turn, matching
    /// [`VoxelGrid::rotate90`] about the view axis for `±z` views.
    pub fn rotate90(&self) -> Image {
        let n = self.width;
        let mut data = vec![0.0; self.data.len()];
        for v in 0..n {
            for u in 0..n {
                data[u * n + (n - 1 - v)] = self.get(u, v);
            }
        }
        Image { width: n, height: n, data }
    }

    pub fn silhouette(&self) -> Vec<bool> {
        self.data.iter().map(|&p| p > 0.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend_from_slice(b"ICIM");
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 4 || &bytes[..4] != b"ICIM" {
            return Err(Error::Format("missing ICIM magic".into()));
        }
        if bytes.len() < 8 {
            return Err(Error::Truncated { expected: 8, found: bytes.len() });
        }
        let width = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let expected = width * height * 4;
        let payload = &bytes[8..];
        if payload.len() < expected {
            return Err(Error::Truncated { expected, found: payload.len() });
        }
        if payload.len() > expected {
            return Err(Error::DimMismatch(format!("{width}×{height} image with {} payload bytes", payload.len())));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Image { width, height, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        Image::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Depth maps along the requested views. A pixel holds `1 − k/d` for the
/// first occupied voxel at depth `k` (so nearer is brighter), 0 where the ray
/// misses. Image axes: `±x` → (y, z), `±y` → (x, z), `±z` → (x, y).
pub fn render_views(grid: &VoxelGrid, views: &[View]) -> Result<Vec<Image>> {
    if grid.occupied_count() == 0 {
        return Err(Error::EmptyShape);
    }
    let dims = grid.dims();
    views
        .iter()
        .map(|&view| {
            let a = view.axis();
            let (ua, va) = match a {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (w, h, depth) = (dims[ua], dims[va], dims[a]);
            let mut data = vec![0.0f32; w * h];
            for v in 0..h {
                for u in 0..w {
                    for step in 0..depth {
                        let k = if view.ascending() { step } else { depth - 1 - step };
                        let mut p = [0usize; 3];
                        p[a] = k;
                        p[ua] = u;
                        p[va] = v;
                        if grid.is_occupied(p[0], p[1], p[2]) {
                            data[v * w + u] = 1.0 - step as f32 / depth as f32;
                            break;
                        }
                    }
                }
            }
            Ok(Image { width: w, height: h, data })
        })
        .collect()
}

/// View used for the single query image of each dataset item.
pub const QUERY_VIEW: View = View::PosZ;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub class: ShapeClass,
    pub grid_path: PathBuf,
    pub render_paths: Vec<PathBuf>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ToySpec>,
}

/// An in-memory dataset item.
#[derive(Debug, Clone)]
pub struct Item {
    pub entry: ManifestEntry,
    pub grid: VoxelGrid,
    pub render: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_per_class: usize,
    /// Train / val / test fractions, summing to 1.
    pub split: [f64; 3],
    pub dim: usize,
    pub seed: u64,
}

/// Split sizes for `n` items: floors of each fraction, remainder to train.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let val = (n as f64 * ratios[1] + 1e-9).floor() as usize;
    let test = (n as f64 * ratios[2] + 1e-9).floor() as usize;
    Ok([n - val - test, val, test])
}

/// Generates every item in memory (no files). Ids are `{class}-{index:04}`.
pub fn generate_items(cfg: &DatasetConfig) -> Result<Vec<Item>> {
    let counts = split_counts(cfg.n_per_class, cfg.split)?;
    let mut items = Vec::new();
    for class in ShapeClass::ALL {
        let mut order: Vec<usize> = (0..cfg.n_per_class).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("split/{}", class.name())));
        let mut split_of = vec![Split::Train; cfg.n_per_class];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < counts[0] {
                Split::Train
            } else if rank < counts[0] + counts[1] {
                Split::Val
            } else {
                Split::Test
            };
        }
        for i in 0..cfg.n_per_class {
            let id = format!("{}-{i:04}", class.name());
            let item_seed = rng::split(&mut rng::item_stream(cfg.seed, &format!("data/{}", class.name()), i as u64));
            let spec = ToySpec::random(class, cfg.dim, item_seed);
            let grid = generate_shape(&spec)?;
            let render = render_views(&grid, &[QUERY_VIEW])?.remove(0);
            items.push(Item {
                entry: ManifestEntry {
                    id: id.clone(),
                    class,
                    grid_path: PathBuf::from(format!("grids/{id}.icvx")),
                    render_paths: vec![PathBuf::from(format!("renders/{id}_{}.icim", QUERY_VIEW.tag()))],
                    split: split_of[i],
                    spec: Some(spec),
                },
                grid,
                render,
            });
        }
    }
    Ok(items)
}

/// Writes grids, renders and `manifest.jsonl` under `out`. Paths in the
/// manifest are relative to `out`.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    let items = generate_items(cfg)?;
    for sub in ["grids", "renders"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    for item in &items {
        write_grid(&item.grid, out.join(&item.entry.grid_path))?;
        item.render.write(out.join(&item.entry.render_paths[0]))?;
    }
    let entries: Vec<ManifestEntry> = items.into_iter().map(|i| i.entry).collect();
    write_manifest(&entries, &out.join("manifest.jsonl"))?;
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Loads manifest items (grid + first render) relative to `root`.
pub fn load_items(root: &Path) -> Result<Vec<Item>> {
    read_manifest(&root.join("manifest.jsonl"))?
        .into_iter()
        .map(|entry| {
            let grid = crate::voxel::read_grid(root.join(&entry.grid_path))?;
            let render = Image::read(root.join(&entry.render_paths[0]))?;
            Ok(Item { entry, grid, render })
        })
        .collect()
}

/// Softmax regression over flattened grids, used to judge which class a
/// generated shape resembles.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeClassifier {
    params: ParamStore,
    cells: usize,
}

impl ShapeClassifier {
    /// Full-batch Adam on the mean cross-entropy.
    pub fn train(grids: &[&VoxelGrid], labels: &[ShapeClass], epochs: usize, seed: u64) -> Result<Self> {
        let Some(first) = grids.first() else {
            return Err(Error::InsufficientItems("classifier needs training grids".into()));
        };
        if grids.len() != labels.len() {
            return Err(Error::SizeMismatch(format!("{} grids vs {} labels", grids.len(), labels.len())));
        }
        let cells = first.len();
        if grids.iter().any(|g| g.len() != cells) {
            return Err(Error::DimMismatch("classifier grids differ in size".into()));
        }
        let k = ShapeClass::ALL.len();
        let mut r = rng::stream(seed, "classifier");
        let mut params = ParamStore::new();
        params.insert("w", Tensor::uniform(vec![cells, k], 1.0 / (cells as f64).sqrt(), &mut r));
        params.insert("b", Tensor::zeros(vec![1, k]));
        let x: Vec<f64> = grids.iter().flat_map(|g| g.values().iter().map(|&v| v as f64)).collect();
        let targets: Vec<usize> = labels.iter().map(|c| c.index()).collect();
        let n = grids.len();
        let mut opt = Optimizer::adam(0.05);
        for _ in 0..epochs {
            let mut g = Graph::new();
            let xv = g.input(vec![n, cells], x.clone());
            let w = g.param("w", params.get("w")?);
            let b = g.param("b", params.get("b")?);
            let logits = g.matmul(xv, w)?;
            let ones = g.input(vec![n, 1], vec![1.0; n]);
            let bias = g.matmul(ones, b)?;
            let logits = g.try_add(logits, bias)?;
            let lp = g.log_softmax_rows(logits)?;
            let ll = g.pick_mean(lp, &targets)?;
            let loss = g.scale(ll, -1.0);
            let grads = g.backward(loss)?;
            opt.step(&mut params, &grads, &[]);
        }
        Ok(Self { params, cells })
    }

    pub fn predict(&self, grid: &VoxelGrid) -> Result<ShapeClass> {
        if grid.len() != self.cells {
            return Err(Error::DimMismatch(format!("classifier expects {} cells, got {}", self.cells, grid.len())));
        }
        let k = ShapeClass::ALL.len();
        let w = self.params.get("w")?.data();
        let b = self.params.get("b")?.data();
        let mut scores = b.to_vec();
        for (i, &v) in grid.values().iter().enumerate() {
            if v != 0.0 {
                for c in 0..k {
                    scores[c] += v as f64 * w[i * k + c];
                }
            }
        }
        let best = (0..k).fold(0, |best, c| if scores[c] > scores[best] { c } else { best });
        Ok(ShapeClass::ALL[best])
    }

    pub fn accuracy(&self, grids: &[&VoxelGrid], labels: &[ShapeClass]) -> Result<f64> {
        let mut hits = 0;
        for (g, l) in grids.iter().zip(labels) {
            hits += (self.predict(g)? == *l) as usize;
        }
        Ok(hits as f64 / grids.len().max(1) as f64)
    }
}
