use rand::Rng as _;

use super::{Conditioning, DenoiserNet, GuidanceConfig, NoisePredictor};
use crate::autodiff::{Gradients, Graph, Optimizer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{standard_normal, NoiseSchedule};

/// One training shape with its (optional) conditioning streams.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub x0: Vec<f64>,
    pub cisp: Option<Vec<f64>>,
    pub ec: Option<Vec<f64>>,
}

pub type Batch<'a> = &'a [TrainItem];

/// Which conditioning streams were replaced by their null token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropMask {
    pub cisp: bool,
    pub ec: bool,
}

/// A noised training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub t: usize,
    pub eps: Vec<f64>,
    pub xt: Vec<f64>,
    pub drop: DropMask,
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)`, forms `x_t`, and drops each
/// conditioning stream independently with probability `p_drop`.
pub fn draw_example(x0: &[f64], sched: &NoiseSchedule, p_drop: f64, rng: &mut Rng) -> Result<Example> {
    let t = rng.gen_range(1..=sched.steps());
    let eps = standard_normal(x0.len(), rng);
    let xt = sched.forward_sample_values(x0, t, &eps)?;
    let drop = DropMask { cisp: rng.gen_bool(p_drop), ec: rng.gen_bool(p_drop) };
    Ok(Example { t, eps, xt, drop })
}

fn conditioning(item: &TrainItem, drop: DropMask) -> Conditioning {
    Conditioning {
        cisp: if drop.cisp { None } else { item.cisp.clone() },
        ec: if drop.ec { None } else { item.ec.clone() },
    }
}

/// Monte-Carlo estimate of `E‖ε − ε̂(x_t, t)‖²` (per-cell mean) over one
/// draw per item, without touching any parameters.
pub fn simple_loss<P: NoisePredictor>(
    model: &P,
    batch: Batch,
    sched: &NoiseSchedule,
    p_drop: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for item in batch {
        let ex = draw_example(&item.x0, sched, p_drop, rng)?;
        let pred = model.predict(&ex.xt, ex.t, &conditioning(item, ex.drop))?;
        total += pred.iter().zip(&ex.eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / pred.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// One optimizer update on the simplified objective. Returns the batch loss.
/// A non-finite loss or update leaves the parameters untouched.
pub fn train_step(
    net: &mut DenoiserNet,
    batch: Batch,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    opt: &mut Optimizer,
    rng: &mut Rng,
) -> Result<f64> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = net.config().grid;
    let mut loss = 0.0;
    let mut total: Option<Gradients> = None;
    for item in batch {
        let ex = draw_example(&item.x0, sched, cfg.p_drop, rng)?;
        let mut g = Graph::new();
        let out = net.forward(&mut g, &ex.xt, ex.t, &conditioning(item, ex.drop))?;
        let target = g.input(vec![1, d, d, d], ex.eps);
        let diff = g.sub(out, target)?;
        let l = g.mean_square(diff);
        loss += g.value(l)[0];
        let grads = g.backward(l)?;
        match &mut total {
            Some(acc) => acc.accumulate(&grads),
            None => total = Some(grads),
        }
    }
    let n = batch.len() as f64;
    loss /= n;
    let mut grads = total.expect("non-empty batch");
    grads.scale(1.0 / n);
    if !loss.is_finite() {
        return Err(Error::NanLoss);
    }
    let before = net.params().clone();
    opt.step(net.params_mut(), &grads, &[]);
    if !net.params().all_finite() {
        *net.params_mut() = before;
        return Err(Error::NanLoss);
    }
    Ok(loss)
}
