//! End-to-end recipes shared by the command line and the acceptance suite:
//! contrastive pretraining on a toy dataset, conditional denoiser training
//! on pooled grids, and image-conditioned sampling.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Optimizer;
use crate::cisp::{aux_image_vector, CispConfig, CispModel, CispPair, CispTrainConfig};
use crate::denoiser::{train_step, Conditioning, DenoiserConfig, DenoiserNet, GuidanceConfig, TrainItem};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::toy_data::{Image, Item};
use crate::voxel::VoxelGrid;

/// Pooling cells per side of the auxiliary image vector.
pub const EC_CELLS: usize = 8;

/// Denoiser training hyperparameters for the toy pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmRecipe {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Grids are mean-pooled by this factor and re-thresholded before training.
    pub factor: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub guidance: GuidanceConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for DdpmRecipe {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            factor: 4,
            steps: 8000,
            batch: 8,
            lr: 1e-3,
            guidance: GuidanceConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl DdpmRecipe {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

pub fn image_values(image: &Image) -> Vec<f64> {
    image.data.iter().map(|&v| v as f64).collect()
}

/// Both conditioning streams for a query image.
pub fn image_conditioning(cisp: &CispModel, image: &Image) -> Result<Conditioning> {
    Ok(Conditioning {
        cisp: Some(cisp.embed_image(&image_values(image))?.0),
        ec: Some(aux_image_vector(image, EC_CELLS)?),
    })
}

/// Trains the contrastive encoders on `items`, initialized from `seed`.
pub fn train_cisp(
    items: &[&Item],
    config: CispConfig,
    train: &CispTrainConfig,
    observe: impl FnMut(usize, f64, &CispModel),
) -> Result<(CispModel, Vec<f64>)> {
    let pairs = items.iter().map(|i| CispPair::from_item(i, &config)).collect::<Result<Vec<_>>>()?;
    let mut model = CispModel::new(config, &mut rng::stream(train.seed, "cisp-init"))?;
    let curve = model.train_observed(&pairs, train, observe)?;
    Ok((model, curve))
}

/// Pooled training target for an item.
pub fn pooled_grid(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    if factor == 1 {
        Ok(grid.clone())
    } else {
        grid.downsample(factor)
    }
}

pub fn train_items(items: &[&Item], cisp: &CispModel, factor: usize) -> Result<Vec<TrainItem>> {
    items
        .iter()
        .map(|it| {
            let c = image_conditioning(cisp, &it.render)?;
            let g = pooled_grid(&it.grid, factor)?;
            Ok(TrainItem { x0: g.values().iter().map(|&v| v as f64).collect(), cisp: c.cisp, ec: c.ec })
        })
        .collect()
}

/// Minibatch training with Adam; `observe(step, loss)` sees every step.
pub fn train_ddpm(
    data: &[TrainItem],
    recipe: &DdpmRecipe,
    seed: u64,
    mut observe: impl FnMut(usize, f64),
) -> Result<DenoiserNet> {
    if data.is_empty() {
        return Err(Error::InsufficientItems("no training shapes".into()));
    }
    let cells = recipe.denoiser.grid.pow(3);
    if let Some(bad) = data.iter().find(|d| d.x0.len() != cells) {
        return Err(Error::DimMismatch(format!("training grid has {} cells, denoiser expects {cells}", bad.x0.len())));
    }
    let sched = recipe.schedule()?;
    let mut net = DenoiserNet::new(recipe.denoiser, &mut rng::stream(seed, "ddpm-init"))?;
    let mut opt = Optimizer::adam(recipe.lr);
    let mut r = rng::stream(seed, "ddpm-train");
    let batch = recipe.batch.min(data.len()).max(1);
    for step in 0..recipe.steps {
        let b: Vec<TrainItem> = data.choose_multiple(&mut r, batch).cloned().collect();
        let loss = train_step(&mut net, &b, &sched, &recipe.guidance, &mut opt, &mut r)?;
        observe(step, loss);
    }
    Ok(net)
}
