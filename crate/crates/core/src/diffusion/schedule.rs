use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Linear-β DDPM schedule. Timesteps are 1-based: `t ∈ [1, T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 timesteps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · ε`.
pub fn q_sample<F: Scalar>(z0: &Tensor<F>, t: usize, eps: &Tensor<F>, schedule: &NoiseSchedule) -> Result<Tensor<F>> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", format!("{:?}", z0.shape()), format!("{:?}", eps.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let data = q_sample_raw(z0.data(), eps.data(), ab);
    Tensor::new(z0.shape().to_vec(), data)
}

pub(crate) fn q_sample_raw<F: Scalar>(z0: &[F], eps: &[F], alpha_bar: f64) -> Vec<F> {
    let (sa, sn) = (F::of(alpha_bar.sqrt()), F::of((1.0 - alpha_bar).sqrt()));
    z0.iter().zip(eps).map(|(&x, &e)| sa * x + sn * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngKey;

    #[test]
    fn two_step_products() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_bounds() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let last = s.alpha_bar(100);
        assert!(last > 0.0 && last < 1.0);
        assert!(s.alpha_bar(1) < 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn bad_ranges_are_rejected() {
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_plug_in() {
        let z0 = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let eps = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let z = q_sample_raw(z0.data(), eps.data(), 0.25);
        assert!((z[0] - (0.5 + 0.75f64.sqrt() * 2.0)).abs() < 1e-12);
        assert!((z[0] - 2.2321).abs() < 1e-4);
        assert_eq!(q_sample_raw(z0.data(), eps.data(), 1.0), vec![1.0]);
        assert_eq!(q_sample_raw(z0.data(), eps.data(), 0.0), vec![2.0]);
    }

    #[test]
    fn q_sample_checks_inputs() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let z0 = Tensor::<f32>::zeros(vec![4]);
        assert!(q_sample(&z0, 0, &z0, &s).is_err());
        assert!(q_sample(&z0, 11, &z0, &s).is_err());
        assert!(q_sample(&z0, 3, &Tensor::zeros(vec![5]), &s).is_err());
    }

    #[test]
    fn q_sample_empirical_variance() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let t = 40;
        let z0 = Tensor::<f64>::from_fn(vec![4], |i| i as f64 * 0.25);
        let mut rng = RngKey::new(11).stream();
        let draws = 10_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..draws {
            let eps = Tensor::from_fn(vec![4], |_| rng.normal());
            let z = q_sample(&z0, t, &eps, &s).unwrap();
            for (i, &v) in z.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let target = 1.0 - s.alpha_bar(t);
        for i in 0..4 {
            let mean = sum[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            assert!((var / target - 1.0).abs() < 0.05, "pixel {i}: {var} vs {target}");
        }
    }
}
