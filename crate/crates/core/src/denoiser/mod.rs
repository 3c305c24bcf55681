//! The noise-prediction network ε_θ(x_t, t | y).
//!
//! A stride-1 convolutional stack over the voxel grid, three fixed
//! coordinate channels, and a learned conditioning template channel. The
//! conditioning vector is the sinusoidal timestep embedding plus linear
//! projections of the contrastive embedding and of the auxiliary image
//! vector. It passes through a small MLP whose output feeds the template and
//! per-layer shifts broadcast-added after each hidden convolution. Missing
//! conditioning streams are replaced by learned null tokens.

mod train;

pub use train::{draw_example, simple_loss, train_step, Batch, DropMask, Example, TrainItem};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const NULL_CISP: &str = "null.cisp";
pub const NULL_EC: &str = "null.ec";

/// Sinusoidal embedding: component `2k = sin(t·ω_k)`, `2k+1 = cos(t·ω_k)`,
/// `ω_k = 10000^(−2k/dim)`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::OddDim(dim));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = 10000f64.powf(-((2 * k) as f64) / dim as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    /// Edge length of the cubic input grid.
    pub grid: usize,
    /// Channels of the hidden convolutions.
    pub width: usize,
    /// Number of convolution layers (>= 2).
    pub layers: usize,
    pub kernel: usize,
    pub time_dim: usize,
    /// Size of the contrastive embedding.
    pub cond_dim: usize,
    /// Size of the auxiliary image vector.
    pub ec_dim: usize,
    /// Hidden size of the conditioning MLP.
    pub hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { grid: 8, width: 16, layers: 3, kernel: 3, time_dim: 32, cond_dim: 32, ec_dim: 64, hidden: 64 }
    }
}

impl DenoiserConfig {
    fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.grid == 0 || self.width == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("invalid denoiser architecture {self:?}")));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::OddDim(self.time_dim));
        }
        Ok(())
    }

    fn to_meta(self) -> Tensor {
        let v = [self.grid, self.width, self.layers, self.kernel, self.time_dim, self.cond_dim, self.ec_dim, self.hidden];
        Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).expect("meta shape")
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 8 {
            return Err(Error::Format("bad denoiser meta tensor".into()));
        }
        let u = |i: usize| d[i] as usize;
        Ok(Self { grid: u(0), width: u(1), layers: u(2), kernel: u(3), time_dim: u(4), cond_dim: u(5), ec_dim: u(6), hidden: u(7) })
    }
}

/// Conditioning inputs; `None` selects the learned null token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    pub cisp: Option<Vec<f64>>,
    pub ec: Option<Vec<f64>>,
}

impl Conditioning {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_unconditional(&self) -> bool {
        self.cisp.is_none() && self.ec.is_none()
    }
}

/// Guidance scale and training-time conditioning dropout. The null tokens
/// themselves are trainable parameters of the network (`null.cisp`,
/// `null.ec`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub p_drop: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w: 1.5, p_drop: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {}", self.w)));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("p_drop must be in [0, 1], got {}", self.p_drop)));
        }
        Ok(())
    }
}

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor {
    fn grid_len(&self) -> usize;

    fn predict(&self, xt: &[f64], t: usize, cond: &Conditioning) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: ParamStore,
    coords: Vec<f64>,
}

impl DenoiserNet {
    /// Uniform `±1/√fan_in` initialization.
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let k3 = c.kernel.pow(3);
        let mut p = ParamStore::new();
        let mut add = |name: String, shape: Vec<usize>, fan_in: usize, rng: &mut Rng| {
            p.insert(name, Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng));
        };
        for i in 0..c.layers {
            let cin = if i == 0 { 5 } else { c.width };
            let cout = if i + 1 == c.layers { 1 } else { c.width };
            add(format!("conv{i}.w"), vec![cout, cin, c.kernel, c.kernel, c.kernel], cin * k3, rng);
            add(format!("conv{i}.b"), vec![cout], cin * k3, rng);
        }
        add("cond.cisp_proj".into(), vec![c.time_dim, c.cond_dim], c.cond_dim, rng);
        add("cond.ec_proj".into(), vec![c.time_dim, c.ec_dim], c.ec_dim, rng);
        add("cond.mlp1.w".into(), vec![c.hidden, c.time_dim], c.time_dim, rng);
        add("cond.mlp1.b".into(), vec![c.hidden, 1], c.time_dim, rng);
        let vol = c.grid.pow(3);
        add("cond.template.w".into(), vec![vol, c.hidden], c.hidden, rng);
        add("cond.template.b".into(), vec![vol, 1], c.hidden, rng);
        for i in 0..c.layers - 1 {
            add(format!("cond.film{i}.w"), vec![c.width, c.hidden], c.hidden, rng);
            add(format!("cond.film{i}.b"), vec![c.width, 1], c.hidden, rng);
        }
        add(NULL_CISP.into(), vec![c.cond_dim, 1], c.cond_dim, rng);
        add(NULL_EC.into(), vec![c.ec_dim, 1], c.ec_dim, rng);
        Ok(Self::from_parts(config, p))
    }

    fn from_parts(config: DenoiserConfig, params: ParamStore) -> Self {
        let d = config.grid;
        let mut coords = Vec::with_capacity(3 * d * d * d);
        let scale = |i: usize| if d > 1 { 2.0 * i as f64 / (d - 1) as f64 - 1.0 } else { 0.0 };
        for axis in 0..3 {
            for z in 0..d {
                for y in 0..d {
                    for x in 0..d {
                        coords.push(scale([x, y, z][axis]));
                    }
                }
            }
        }
        Self { config, params, coords }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn null_cisp(&self) -> Vec<f64> {
        self.params.get(NULL_CISP).expect("null token").data().to_vec()
    }

    pub fn null_ec(&self) -> Vec<f64> {
        self.params.get(NULL_EC).expect("null token").data().to_vec()
    }

    /// Records one forward pass; returns the `[1, d, d, d]` noise estimate.
    pub fn forward(&self, g: &mut Graph, xt: &[f64], t: usize, cond: &Conditioning) -> Result<Var> {
        self.forward_with(g, &self.params, xt, t, cond)
    }

    /// Forward pass against an explicit parameter store (gradient checks
    /// perturb a copy).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        xt: &[f64],
        t: usize,
        cond: &Conditioning,
    ) -> Result<Var> {
        let c = &self.config;
        let d = c.grid;
        let vol = d * d * d;
        if xt.len() != vol {
            return Err(Error::ShapeMismatch(format!("expected {vol} cells, got {}", xt.len())));
        }
        let bind = |g: &mut Graph, name: &str| -> Result<Var> { Ok(g.param(name, params.get(name)?)) };

        // Conditioning vector.
        let temb = g.input(vec![c.time_dim, 1], time_embedding(t as f64, c.time_dim)?);
        let cisp = match &cond.cisp {
            Some(e) if e.len() == c.cond_dim => g.input(vec![c.cond_dim, 1], e.clone()),
            Some(e) => return Err(Error::ShapeMismatch(format!("cisp embedding of size {}, need {}", e.len(), c.cond_dim))),
            None => bind(g, NULL_CISP)?,
        };
        let ec = match &cond.ec {
            Some(e) if e.len() == c.ec_dim => g.input(vec![c.ec_dim, 1], e.clone()),
            Some(e) => return Err(Error::ShapeMismatch(format!("ec vector of size {}, need {}", e.len(), c.ec_dim))),
            None => bind(g, NULL_EC)?,
        };
        let pc = bind(g, "cond.cisp_proj")?;
        let pe = bind(g, "cond.ec_proj")?;
        let pc = g.matmul(pc, cisp)?;
        let pe = g.matmul(pe, ec)?;
        let cv = g.add(temb, pc);
        let cv = g.add(cv, pe);
        let w1 = bind(g, "cond.mlp1.w")?;
        let b1 = bind(g, "cond.mlp1.b")?;
        let h = g.matmul(w1, cv)?;
        let h = g.add(h, b1);
        let hc = g.silu(h);
        let hc = g.finite_or(hc, "cond")?;

        // Conditioning template: one extra input channel.
        let tw = bind(g, "cond.template.w")?;
        let tb = bind(g, "cond.template.b")?;
        let template = g.matmul(tw, hc)?;
        let template = g.add(template, tb);

        // Convolutional trunk over [x_t, coordinates, template].
        let mut rows = vec![g.input(vec![vol], xt.to_vec())];
        for axis in self.coords.chunks(vol) {
            rows.push(g.input(vec![vol], axis.to_vec()));
        }
        rows.push(template);
        let stacked = g.stack_rows(&rows)?;
        let mut h = g.reshape(stacked, vec![5, d, d, d])?;
        for i in 0..c.layers {
            let w = bind(g, &format!("conv{i}.w"))?;
            let b = bind(g, &format!("conv{i}.b"))?;
            h = g.conv3d(h, w, b)?;
            if i + 1 < c.layers {
                let fw = bind(g, &format!("cond.film{i}.w"))?;
                let fb = bind(g, &format!("cond.film{i}.b"))?;
                let shift = g.matmul(fw, hc)?;
                let shift = g.add(shift, fb);
                h = g.add_channel(h, shift)?;
            }
            if i + 1 < c.layers {
                h = g.silu(h);
            }
            h = g.finite_or(h, &format!("conv{i}"))?;
        }
        Ok(h)
    }

    /// One inference pass (the `denoise` operation).
    pub fn denoise(&self, xt: &[f64], t: usize, cond: &Conditioning) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, xt, t, cond)?;
        Ok(g.value(out).to_vec())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut p = self.params.clone();
        p.insert("meta.denoiser", self.config.to_meta());
        checkpoint::save(&p, path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_store(checkpoint::load(path)?)
    }

    pub fn from_store(mut p: ParamStore) -> Result<Self> {
        let config = DenoiserConfig::from_meta(p.get("meta.denoiser")?)?;
        config.validate()?;
        let mut clean = ParamStore::new();
        for (n, t) in p.iter_mut() {
            if !n.starts_with("meta.") {
                clean.insert(n, t.clone());
            }
        }
        let fresh = Self::new(config, &mut crate::rng::stream(0, "shape-check"))?;
        for (n, t) in fresh.params.iter() {
            let got = clean.get(n)?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("checkpoint tensor `{n}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        Ok(Self::from_parts(config, clean))
    }
}

impl NoisePredictor for DenoiserNet {
    fn grid_len(&self) -> usize {
        self.config.grid.pow(3)
    }

    fn predict(&self, xt: &[f64], t: usize, cond: &Conditioning) -> Result<Vec<f64>> {
        self.denoise(xt, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng;

    #[test]
    fn time_embedding_cases() {
        assert_eq!(time_embedding(0.0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        let e = time_embedding(1.0, 2).unwrap();
        assert!((e[0] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!((e[1] - 0.540_302_305_868_139_8).abs() < 1e-12);
        assert!(matches!(time_embedding(3.0, 5), Err(Error::OddDim(5))));
    }

    #[test]
    fn time_embeddings_are_distinct_up_to_ten_thousand() {
        let mut all: Vec<Vec<u64>> = (0..=10_000)
            .map(|t| time_embedding(t as f64, 64).unwrap().iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        assert!(all.windows(2).all(|w| w[0] != w[1]));
    }

    fn net(seed: u64) -> DenoiserNet {
        DenoiserNet::new(DenoiserConfig { grid: 4, width: 4, hidden: 8, time_dim: 8, cond_dim: 6, ec_dim: 5, ..Default::default() }, &mut rng::stream(seed, "init")).unwrap()
    }

    #[test]
    fn denoise_is_pure_and_shape_preserving() {
        let n = net(1);
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let c = Conditioning { cisp: Some(vec![0.1; 6]), ec: None };
        let a = n.denoise(&x, 17, &c).unwrap();
        let b = n.denoise(&x, 17, &c).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
        for t in [1, 500, 1000] {
            assert_eq!(n.denoise(&x, t, &Conditioning::none()).unwrap().len(), 64);
        }
    }

    #[test]
    fn null_path_is_the_null_token() {
        let n = net(2);
        let x: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let explicit = Conditioning { cisp: Some(n.null_cisp()), ec: Some(n.null_ec()) };
        assert_eq!(n.denoise(&x, 5, &Conditioning::none()).unwrap(), n.denoise(&x, 5, &explicit).unwrap());
    }

    #[test]
    fn fresh_net_output_is_bounded() {
        let n = DenoiserNet::new(DenoiserConfig::default(), &mut rng::stream(3, "init")).unwrap();
        let mut r = rng::stream(3, "x");
        let x = crate::schedule::standard_normal(512, &mut r);
        let out = n.denoise(&x, 1000, &Conditioning::none()).unwrap();
        assert!(out.iter().all(|v| v.is_finite() && v.abs() < 1e3));
    }

    #[test]
    fn shape_errors() {
        let n = net(4);
        assert!(matches!(n.denoise(&[0.0; 10], 1, &Conditioning::none()), Err(Error::ShapeMismatch(_))));
        let bad = Conditioning { cisp: Some(vec![0.0; 3]), ec: None };
        assert!(matches!(n.denoise(&[0.0; 64], 1, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut n = net(5);
        n.params_mut().get_mut("conv1.b").unwrap().data_mut()[0] = f64::NAN;
        match n.denoise(&[0.0; 64], 1, &Conditioning::none()) {
            Err(Error::NonFiniteActivation { layer }) => assert_eq!(layer, "conv1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gradient_check_small_denoiser() {
        let n = net(6);
        let mut r = rng::stream(6, "x");
        let x = crate::schedule::standard_normal(64, &mut r);
        let eps = crate::schedule::standard_normal(64, &mut r);
        let cond = Conditioning { cisp: Some(vec![0.3, -0.2, 0.1, 0.0, 0.5, -0.4]), ec: None };
        let res = grad_check(n.params(), 1e-3, 12, &mut r, |g, p| {
            let out = n.forward_with(g, p, &x, 40, &cond)?;
            let target = g.input(vec![1, 4, 4, 4], eps.clone());
            let diff = g.sub(out, target)?;
            Ok(g.mean_square(diff))
        })
        .unwrap();
        assert!(res.max_rel_error < 1e-4, "{res:?}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let n = net(7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ickp");
        n.save(&p).unwrap();
        let back = DenoiserNet::load(&p).unwrap();
        assert_eq!(back.config(), n.config());
        for (name, t) in n.params().iter() {
            let b = back.params().get(name).unwrap();
            for (x, y) in t.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
