//! Ancestral reverse diffusion with classifier-free guidance.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditioning, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::schedule::{standard_normal, NoiseSchedule};
use crate::voxel::{GridKind, VoxelGrid, DEFAULT_THRESHOLD};

/// `ε_u + w·(ε_c − ε_u)`.
pub fn guided_epsilon(eps_uncond: &[f64], eps_cond: &[f64], w: f64) -> Result<Vec<f64>> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(Error::ShapeMismatch(format!("guidance over {} vs {} cells", eps_uncond.len(), eps_cond.len())));
    }
    if w == 1.0 {
        return Ok(eps_cond.to_vec());
    }
    Ok(eps_uncond.iter().zip(eps_cond).map(|(u, c)| u + w * (c - u)).collect())
}

/// Noise estimate at step `t`, with the number of network passes it took.
/// Conditioned requests with `w ≠ 1` run the conditional and unconditional
/// passes; everything else runs one.
pub fn guided_prediction<P: NoisePredictor + ?Sized>(
    net: &P,
    xt: &[f64],
    t: usize,
    cond: &Conditioning,
    w: f64,
) -> Result<(Vec<f64>, usize)> {
    if cond.is_unconditional() || w == 1.0 {
        return Ok((net.predict(xt, t, cond)?, 1));
    }
    let eps_c = net.predict(xt, t, cond)?;
    let eps_u = net.predict(xt, t, &Conditioning::none())?;
    Ok((guided_epsilon(&eps_u, &eps_c, w)?, 2))
}

/// One ancestral step `x_t → x_{t−1}`: the posterior mean plus `√β_t·z`,
/// with no noise at `t = 1`. Returns the new state and the pass count.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    xt: &[f64],
    t: usize,
    net: &P,
    sched: &NoiseSchedule,
    cond: &Conditioning,
    w: f64,
    rng: &mut Rng,
) -> Result<(Vec<f64>, usize)> {
    if t == 0 || t > sched.steps() {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    let (eps, passes) = guided_prediction(net, xt, t, cond, w)?;
    let mut mu = sched.posterior_mean_values(xt, t, &eps)?;
    if t > 1 {
        let s = sched.beta(t)?.sqrt();
        for (m, z) in mu.iter_mut().zip(standard_normal(xt.len(), rng)) {
            *m += s * z;
        }
    }
    Ok((mu, passes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub seed: u64,
    pub w: f64,
    #[serde(skip)]
    pub conditioning: Conditioning,
    /// Reverse steps, counted down from this `t` to 1; at most the schedule
    /// length.
    pub steps: usize,
    /// Edge length of the cubic grid.
    pub dim: usize,
}

impl SampleRequest {
    pub fn new(seed: u64, w: f64, conditioning: Conditioning, sched: &NoiseSchedule, dim: usize) -> Self {
        Self { seed, w, conditioning, steps: sched.steps(), dim }
    }

    fn validate(&self, sched: &NoiseSchedule, grid_len: usize) -> Result<()> {
        if !(self.w >= 0.0) {
            return Err(Error::InvalidArgument(format!("guidance scale must be >= 0, got {}", self.w)));
        }
        if self.steps == 0 || self.steps > sched.steps() {
            return Err(Error::StepOutOfRange { t: self.steps, max: sched.steps() });
        }
        if self.dim.pow(3) != grid_len {
            return Err(Error::DimMismatch(format!("request for {}³ cells, network has {grid_len}", self.dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub binary: VoxelGrid,
    /// Final state before thresholding.
    pub continuous: VoxelGrid,
    /// Total network passes.
    pub evaluations: usize,
    /// True when nothing survived the threshold.
    pub empty: bool,
}

/// Runs the full chain from `x_T ~ N(0, I)` and thresholds at 0.5.
pub fn sample<P: NoisePredictor + ?Sized>(req: &SampleRequest, net: &P, sched: &NoiseSchedule) -> Result<SampleOutput> {
    req.validate(sched, net.grid_len())?;
    let mut r = rng::stream(req.seed, "sample");
    let mut x = standard_normal(net.grid_len(), &mut r);
    let mut evaluations = 0;
    for t in (1..=req.steps).rev() {
        let (next, passes) = reverse_step(&x, t, net, sched, &req.conditioning, req.w, &mut r)?;
        x = next;
        evaluations += passes;
    }
    let values: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let continuous = VoxelGrid::new([req.dim; 3], values, GridKind::Continuous)?;
    let binary = continuous.threshold(DEFAULT_THRESHOLD)?;
    let empty = binary.occupied_count() == 0;
    if empty {
        log::warn!("sample with seed {} is empty after thresholding", req.seed);
    }
    Ok(SampleOutput { binary, continuous, evaluations, empty })
}

/// Independent chains, spread over the available cores.
pub fn sample_many<P: NoisePredictor + Sync + ?Sized>(
    reqs: &[SampleRequest],
    net: &P,
    sched: &NoiseSchedule,
) -> Vec<Result<SampleOutput>> {
    let workers = thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(reqs.len().max(1));
    let chunk = reqs.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = reqs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|r| sample(r, net, sched)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("sampling worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserNet};
    use std::cell::Cell;

    /// Predicts the exact noise of a fixed `x0` and counts its passes.
    struct Oracle {
        x0: Vec<f64>,
        sched: NoiseSchedule,
        calls: Cell<usize>,
    }

    impl NoisePredictor for Oracle {
        fn grid_len(&self) -> usize {
            self.x0.len()
        }

        fn predict(&self, xt: &[f64], t: usize, _cond: &Conditioning) -> Result<Vec<f64>> {
            self.calls.set(self.calls.get() + 1);
            let ab = self.sched.alpha_bar(t)?;
            Ok(xt.iter().zip(&self.x0).map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect())
        }
    }

    fn tiny_net() -> DenoiserNet {
        let cfg = DenoiserConfig { grid: 4, width: 4, layers: 2, time_dim: 8, cond_dim: 4, ec_dim: 4, hidden: 8, ..Default::default() };
        DenoiserNet::new(cfg, &mut rng::stream(0, "sampler-net")).unwrap()
    }

    fn short_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-3, 0.3).unwrap()
    }

    fn cond() -> Conditioning {
        Conditioning { cisp: Some(vec![0.5, -0.5, 0.5, -0.5]), ec: Some(vec![1.0, 0.0, 0.0, 1.0]) }
    }

    #[test]
    fn guidance_formula() {
        assert_eq!(guided_epsilon(&[0.1, 0.2], &[0.3, 0.4], 1.0).unwrap(), vec![0.3, 0.4]);
        assert_eq!(guided_epsilon(&[0.1, 0.2], &[0.3, 0.4], 0.0).unwrap(), vec![0.1, 0.2]);
        let v = guided_epsilon(&[0.2], &[0.6], 1.5).unwrap()[0];
        assert!((v - 0.8).abs() < 1e-12);
        assert!(guided_epsilon(&[0.0], &[0.0, 1.0], 1.5).is_err());
    }

    #[test]
    fn final_step_is_the_mean() {
        let net = tiny_net();
        let sched = short_schedule();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let (out, _) = reverse_step(&x, 1, &net, &sched, &cond(), 1.5, &mut rng::stream(1, "a")).unwrap();
        let (out2, _) = reverse_step(&x, 1, &net, &sched, &cond(), 1.5, &mut rng::stream(2, "b")).unwrap();
        assert_eq!(out, out2);
        let eps = guided_prediction(&net, &x, 1, &cond(), 1.5).unwrap().0;
        assert_eq!(out, sched.posterior_mean_values(&x, 1, &eps).unwrap());
        assert!(reverse_step(&x, 0, &net, &sched, &cond(), 1.5, &mut rng::stream(1, "a")).is_err());
    }

    #[test]
    fn oracle_trajectory_converges_to_data() {
        let sched = short_schedule();
        let x0: Vec<f64> = (0..64).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let oracle = Oracle { x0: x0.clone(), sched: sched.clone(), calls: Cell::new(0) };
        let mut r = rng::stream(3, "traj");
        let t_max = sched.steps();
        let mut x = sched.forward_sample_rng(&x0, t_max, &mut r).unwrap().0;
        let dist = |x: &[f64]| x.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mut prev = dist(&x);
        for t in (1..=t_max).rev() {
            // Deterministic part only: the posterior mean.
            let eps = oracle.predict(&x, t, &Conditioning::none()).unwrap();
            x = sched.posterior_mean_values(&x, t, &eps).unwrap();
            let d = dist(&x);
            assert!(d <= prev + 1e-12, "t={t}: {d} > {prev}");
            prev = d;
        }
        assert!(prev < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic() {
        let net = tiny_net();
        let sched = short_schedule();
        let req = SampleRequest::new(9, 1.5, cond(), &sched, 4);
        let a = sample(&req, &net, &sched).unwrap();
        assert_eq!(a, sample(&req, &net, &sched).unwrap());
        let other = sample(&SampleRequest { seed: 10, ..req }, &net, &sched).unwrap();
        assert_ne!(a.continuous, other.continuous);
    }

    #[test]
    fn pass_counting() {
        let sched = short_schedule();
        let oracle = Oracle { x0: vec![0.0; 8], sched: sched.clone(), calls: Cell::new(0) };
        let t = sched.steps();
        for (w, c, expect) in [(1.0, cond(), t), (1.5, cond(), 2 * t), (0.0, cond(), 2 * t), (1.5, Conditioning::none(), t)] {
            oracle.calls.set(0);
            let req = SampleRequest::new(1, w, c, &sched, 2);
            let out = sample(&req, &oracle, &sched).unwrap();
            assert_eq!((out.evaluations, oracle.calls.get()), (expect, expect), "w={w}");
        }
    }

    #[test]
    fn unit_guidance_equals_single_pass() {
        let net = tiny_net();
        let sched = short_schedule();
        let guided = sample(&SampleRequest::new(4, 1.0, cond(), &sched, 4), &net, &sched).unwrap();
        // Hand-rolled single conditional pass per step.
        let mut r = rng::stream(4, "sample");
        let mut x = standard_normal(64, &mut r);
        for t in (1..=sched.steps()).rev() {
            let eps = net.predict(&x, t, &cond()).unwrap();
            x = sched.posterior_mean_values(&x, t, &eps).unwrap();
            if t > 1 {
                let s = sched.beta(t).unwrap().sqrt();
                for (m, z) in x.iter_mut().zip(standard_normal(64, &mut r)) {
                    *m += s * z;
                }
            }
        }
        let expect: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        assert_eq!(guided.continuous.values(), &expect[..]);
    }

    #[test]
    fn null_tokens_equal_unconditional() {
        let net = tiny_net();
        let sched = short_schedule();
        let uncond = sample(&SampleRequest::new(5, 1.5, Conditioning::none(), &sched, 4), &net, &sched).unwrap();
        let explicit = Conditioning { cisp: Some(net.null_cisp()), ec: Some(net.null_ec()) };
        let nulls = sample(&SampleRequest::new(5, 1.5, explicit, &sched, 4), &net, &sched).unwrap();
        assert_eq!(uncond.continuous, nulls.continuous);
        assert_eq!(uncond.binary, nulls.binary);
    }

    #[test]
    fn request_validation_and_parallel_chains() {
        let net = tiny_net();
        let sched = short_schedule();
        assert!(sample(&SampleRequest { steps: 21, ..SampleRequest::new(0, 1.5, cond(), &sched, 4) }, &net, &sched).is_err());
        assert!(sample(&SampleRequest::new(0, -1.0, cond(), &sched, 4), &net, &sched).is_err());
        assert!(sample(&SampleRequest::new(0, 1.5, cond(), &sched, 5), &net, &sched).is_err());
        let reqs: Vec<SampleRequest> = (0..3).map(|s| SampleRequest::new(s, 1.5, cond(), &sched, 4)).collect();
        let many = sample_many(&reqs, &net, &sched);
        for (r, out) in reqs.iter().zip(many) {
            let out = out.unwrap();
            assert_eq!(out, sample(r, &net, &sched).unwrap());
            assert!(out.continuous.values().iter().all(|v| v.is_finite()));
        }
    }
}
