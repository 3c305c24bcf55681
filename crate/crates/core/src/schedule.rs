//! Variance schedule and the closed-form parts of the diffusion process.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`. All schedule arithmetic is `f64`.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::voxel::{GridKind, VoxelGrid};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// ᾱ_T below this is treated as "x_T is essentially pure noise".
pub const COMPLETENESS_BOUND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// β linearly spaced from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("T must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("T must be >= 1".into()));
        }
        if let Some(i) = beta.iter().position(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Schedule(format!("beta_{} = {} not in (0, 1)", i + 1, beta[i])));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn slot(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange { t, max: self.steps() })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.slot(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.slot(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.slot(t)?])
    }

    /// Reverse-process variance; fixed to β_t.
    pub fn sigma2(&self, t: usize) -> Result<f64> {
        self.beta(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// ᾱ_T < 0.05.
    pub fn is_complete(&self) -> bool {
        self.alpha_bar[self.steps() - 1] < COMPLETENESS_BOUND
    }

    /// `t β α ᾱ` table, one row per step, 17 significant digits.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("t\tbeta\talpha\talpha_bar\n");
        for i in 0..self.steps() {
            let _ = writeln!(
                s,
                "{}\t{:.16e}\t{:.16e}\t{:.16e}",
                i + 1,
                self.beta[i],
                self.alpha[i],
                self.alpha_bar[i]
            );
        }
        s
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`, elementwise.
    pub fn forward_sample_values(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        check_len(x0.len(), eps.len())?;
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Mean of the reverse transition given a noise estimate:
    /// `(x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t`.
    pub fn posterior_mean_values(&self, xt: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
        check_len(xt.len(), eps_hat.len())?;
        let i = self.slot(t)?;
        let coef = self.beta[i] / (1.0 - self.alpha_bar[i]).sqrt();
        let inv = 1.0 / self.alpha[i].sqrt();
        Ok(xt.iter().zip(eps_hat).map(|(x, e)| inv * (x - coef * e)).collect())
    }

    pub fn forward_sample(&self, x0: &VoxelGrid, t: usize, eps: &VoxelGrid) -> Result<VoxelGrid> {
        check_dims(x0, eps)?;
        let out = self.forward_sample_values(&widen(x0), t, &widen(eps))?;
        narrow(x0.dims(), &out)
    }

    pub fn posterior_mean(&self, xt: &VoxelGrid, t: usize, eps_hat: &VoxelGrid) -> Result<VoxelGrid> {
        check_dims(xt, eps_hat)?;
        let out = self.posterior_mean_values(&widen(xt), t, &widen(eps_hat))?;
        narrow(xt.dims(), &out)
    }

    /// Forward sample with internally drawn standard-normal noise; returns
    /// `(x_t, ε)`.
    pub fn forward_sample_rng(&self, x0: &[f64], t: usize, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        let eps = standard_normal(x0.len(), rng);
        Ok((self.forward_sample_values(x0, t, &eps)?, eps))
    }
}

pub fn standard_normal(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch(format!("{a} cells vs {b} noise cells")));
    }
    Ok(())
}

fn check_dims(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn widen(g: &VoxelGrid) -> Vec<f64> {
    g.values().iter().map(|&v| v as f64).collect()
}

fn narrow(dims: [usize; 3], v: &[f64]) -> Result<VoxelGrid> {
    VoxelGrid::new(dims, v.iter().map(|&x| x as f32).collect(), GridKind::Continuous)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn constant_beta_products() {
        let s = NoiseSchedule::linear(4, 0.1, 0.1).unwrap();
        let expect = [0.9, 0.81, 0.729, 0.6561];
        for (t, e) in (1..=4).zip(expect) {
            assert!((s.alpha_bar(t).unwrap() - e).abs() < 1e-12);
        }
        let one = NoiseSchedule::linear(1, 0.999, 0.999).unwrap();
        assert!((one.alpha_bar(1).unwrap() - 0.001).abs() < 1e-12);
    }

    #[test]
    fn default_schedule_is_complete_and_decreasing() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!(s.is_complete());
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
        for t in 2..=1000 {
            assert_eq!(s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap());
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(NoiseSchedule::linear(0, 0.1, 0.2), Err(Error::Schedule(_))));
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        let s = NoiseSchedule::default();
        assert!(matches!(s.beta(0), Err(Error::StepOutOfRange { t: 0, max: 1000 })));
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn forward_sample_cases() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        let x = s.forward_sample_values(&[1.0], 2, &[1.0]).unwrap();
        assert!((x[0] - (0.9 + 0.19f64.sqrt())).abs() < 1e-12);
        assert!((x[0] - 1.335_889_894_354_067_4).abs() < 1e-9);

        let x0 = [0.3, -1.0, 2.0];
        let zero = [0.0; 3];
        let a = s.forward_sample_values(&x0, 1, &zero).unwrap();
        let b = s.forward_sample_values(&zero, 1, &x0).unwrap();
        for i in 0..3 {
            assert_eq!(a[i], 0.9f64.sqrt() * x0[i]);
            assert_eq!(b[i], (1.0 - 0.9f64).sqrt() * x0[i]);
        }
        assert!(matches!(s.forward_sample_values(&x0, 3, &x0), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(s.forward_sample_values(&x0, 1, &[0.0]), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn posterior_mean_cases() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        let m = s.posterior_mean_values(&[1.0], 2, &[0.5]).unwrap();
        let expect = (1.0 / 0.9f64.sqrt()) * (1.0 - (0.1 / 0.19f64.sqrt()) * 0.5);
        assert!((m[0] - expect).abs() < 1e-12);
        assert!((m[0] - 0.933_179_845_037_791_2).abs() < 1e-9);

        let z = s.posterior_mean_values(&[2.0, -1.0], 1, &[0.0, 0.0]).unwrap();
        assert_eq!(z, vec![2.0 / 0.9f64.sqrt(), -1.0 / 0.9f64.sqrt()]);
    }

    #[test]
    fn posterior_mean_with_true_noise_recovers_x0() {
        // T = 1: ᾱ_1 = α_1, so substituting x_1 = √α x0 + √β ε gives back x0.
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        let x0 = [0.0, 1.0, -0.7];
        let eps = [0.4, -1.3, 2.2];
        let xt = s.forward_sample_values(&x0, 1, &eps).unwrap();
        let m = s.posterior_mean_values(&xt, 1, &eps).unwrap();
        for i in 0..3 {
            let closed = (xt[i] - 0.1 / 0.1f64.sqrt() * eps[i]) / 0.9f64.sqrt();
            assert!((m[i] - closed).abs() < 1e-12);
            assert!((m[i] - x0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_composition_matches_marginal() {
        let s = NoiseSchedule::linear(2, 0.02, 0.3).unwrap();
        let (a1, a2) = (s.alpha(1).unwrap(), s.alpha(2).unwrap());
        let (b1, b2) = (s.beta(1).unwrap(), s.beta(2).unwrap());
        // x2 = √α2 (√α1 x0 + √β1 ε1) + √β2 ε2
        let mean_coef = (a2 * a1).sqrt();
        let var = a2 * b1 + b2;
        assert!((mean_coef - s.alpha_bar(2).unwrap().sqrt()).abs() < 1e-12);
        assert!((var - (1.0 - s.alpha_bar(2).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn forward_variance_matches_one_minus_alpha_bar() {
        let s = NoiseSchedule::default();
        let n = 20_000;
        let x0 = vec![0.0; n];
        for t in [1, 500, 1000] {
            let mut r = rng::stream(3, "variance");
            let (xt, _) = s.forward_sample_rng(&x0, t, &mut r).unwrap();
            let mean = xt.iter().sum::<f64>() / n as f64;
            let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let target = 1.0 - s.alpha_bar(t).unwrap();
            let se = target * (2.0 / (n - 1) as f64).sqrt();
            assert!((var - target).abs() < 3.0 * se, "t={t}: {var} vs {target}");
        }
    }

    #[test]
    fn tsv_has_seventeen_significant_digits() {
        let s = NoiseSchedule::linear(3, 0.1, 0.2).unwrap();
        let tsv = s.to_tsv();
        let row: Vec<&str> = tsv.lines().nth(2).unwrap().split('\t').collect();
        assert_eq!(row[0], "2");
        assert_eq!(row[1], "1.5000000000000002e-1");
        assert_eq!(row[1].parse::<f64>().unwrap(), s.beta(2).unwrap());
    }

    proptest! {
        #[test]
        fn posterior_mean_is_linear(
            x1 in prop::collection::vec(-3.0f64..3.0, 8),
            x2 in prop::collection::vec(-3.0f64..3.0, 8),
            e1 in prop::collection::vec(-3.0f64..3.0, 8),
            e2 in prop::collection::vec(-3.0f64..3.0, 8),
            c in -2.0f64..2.0,
            t in 1usize..=1000,
        ) {
            let s = NoiseSchedule::default();
            let xs: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + c * b).collect();
            let es: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + c * b).collect();
            let lhs = s.posterior_mean_values(&xs, t, &es).unwrap();
            let m1 = s.posterior_mean_values(&x1, t, &e1).unwrap();
            let m2 = s.posterior_mean_values(&x2, t, &e2).unwrap();
            for i in 0..8 {
                prop_assert!((lhs[i] - (m1[i] + c * m2[i])).abs() < 1e-9 * (1.0 + lhs[i].abs()));
            }
        }
    }
}
