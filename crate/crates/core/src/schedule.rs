//! Linear-beta noise schedule and the deterministic DDIM update.
//!
//! Timesteps run over `0..=T`: `t = 0` is clean (`alpha_bar = 1`), `t = T`
//! is maximal noise. `betas[i]` is the beta of step `i+1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
    #[serde(skip)]
    betas: Vec<f64>,
    #[serde(skip)]
    alpha_bars: Vec<f64>,
}

/// Linear beta interpolation between `beta1` and `beta_t` over `steps`.
pub fn make_schedule(steps: usize, beta1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::input("schedule: steps must be positive"));
    }
    if !(beta1 > 0.0 && beta1 <= beta_t && beta_t < 1.0) {
        return Err(Error::input(format!(
            "schedule: need 0 < beta1 <= beta_t < 1, got {beta1} and {beta_t}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta1
            } else {
                beta1 + (beta_t - beta1) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { steps, beta1, beta_t, betas, alpha_bars })
}

impl NoiseSchedule {
    /// Rebuilds the derived tables after deserialization.
    pub fn rebuild(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta1, self.beta_t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar(t)` for `t` in `0..=T`; `alpha_bar(0) = 1` exactly.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.steps {
            return Err(Error::input(format!(
                "schedule: timestep {t} out of 0..={}",
                self.steps
            )));
        }
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }
}

/// Forward process: `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "add_noise: z0 {:?} and eps {:?} differ",
            z0.shape(),
            eps.shape()
        )));
    }
    let abar = s.alpha_bar(t)?;
    z0.scale(abar.sqrt())?.add(&eps.scale((1.0 - abar).sqrt())?)
}

/// Deterministic DDIM update from `t` to `t_prev`: invert to the predicted
/// clean latent, then re-noise analytically. `t_prev == t` is the identity;
/// `t_prev == 0` lands exactly on the predicted clean latent.
pub fn ddim_step(
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev > t {
        return Err(Error::input(format!("ddim_step: t_prev {t_prev} > t {t}")));
    }
    if t_prev == t {
        return Ok(z_t.clone());
    }
    let abar = s.alpha_bar(t)?;
    let abar_prev = s.alpha_bar(t_prev)?;
    let z0_pred = z_t
        .sub(&eps_pred.scale((1.0 - abar).sqrt())?)?
        .scale(1.0 / abar.sqrt())?;
    z0_pred
        .scale(abar_prev.sqrt())?
        .add(&eps_pred.scale((1.0 - abar_prev).sqrt())?)
}

/// Predicted clean latent from `(z_t, eps)` at timestep `t`.
pub fn predict_z0(z_t: &Tensor, eps_pred: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    let abar = s.alpha_bar(t)?;
    z_t.sub(&eps_pred.scale((1.0 - abar).sqrt())?)?.scale(1.0 / abar.sqrt())
}

/// Descending DDIM timestep sequence `[T, ..., 0]` with `count` transitions.
pub fn ddim_timesteps(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::input(format!(
            "ddim_timesteps: count {count} must lie in 1..={total}"
        )));
    }
    let mut taus: Vec<usize> = (0..=count)
        .map(|k| ((total as f64) * (count - k) as f64 / count as f64).round() as usize)
        .collect();
    taus.dedup();
    Ok(taus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_invariants_and_examples() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1).unwrap() > 0.99);
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
        // Product oracle for the terminal value.
        let product: f64 = s.betas().iter().map(|b| 1.0 - b).product();
        assert!((s.alpha_bar(1000).unwrap() - product).abs() < 1e-15);
        assert!(s.alpha_bar(1000).unwrap() < 0.01);

        let s1 = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s1.alpha_bars(), &[0.9]);

        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn add_noise_formula() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = Tensor::randn(&mut rng, &[4, 4]);
        let eps = Tensor::randn(&mut rng, &[4, 4]);

        // eps = 0 -> pure scaling.
        let zt = add_noise(&z0, 40, &Tensor::zeros(&[4, 4]), &s).unwrap();
        let expect = z0.scale(s.alpha_bar(40).unwrap().sqrt()).unwrap();
        assert_eq!(zt.data(), expect.data());

        // t = 0 -> exactly z0.
        let zt = add_noise(&z0, 0, &eps, &s).unwrap();
        assert_eq!(zt.data(), z0.data());

        // Direct formula oracle.
        let t = 77;
        let zt = add_noise(&z0, t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t).unwrap();
        for ((a, &z), &e) in zt.data().iter().zip(z0.data()).zip(eps.data()) {
            assert!((a - (ab.sqrt() * z + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_inversion_recovers_z0() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = Tensor::randn(&mut rng, &[8, 8]);
        let eps = Tensor::randn(&mut rng, &[8, 8]);
        for t in [1, 13, 500, 1000] {
            let zt = add_noise(&z0, t, &eps, &s).unwrap();
            let back = ddim_step(&zt, &eps, t, 0, &s).unwrap();
            for (a, b) in back.data().iter().zip(z0.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        // Identity when t_prev == t.
        let zt = add_noise(&z0, 31, &eps, &s).unwrap();
        let same = ddim_step(&zt, &eps, 31, 31, &s).unwrap();
        assert_eq!(same.data(), zt.data());
    }

    #[test]
    fn ddim_timestep_sequences() {
        let taus = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(taus.len(), 51);
        assert_eq!(taus[0], 1000);
        assert_eq!(*taus.last().unwrap(), 0);
        for w in taus.windows(2) {
            assert!(w[0] > w[1]);
        }
        assert!(ddim_timesteps(10, 11).is_err());
        assert_eq!(ddim_timesteps(10, 10).unwrap().len(), 11);
    }
}
