//! Noise schedule and the closed-form forward / inverse maps.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Cumulative signal levels `ᾱ_1 > ᾱ_2 > … > ᾱ_T`, all in `(0, 1)`.
/// Timesteps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-β schedule.
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let n = cfg.num_train_steps;
        if n == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0f64;
        for i in 0..n {
            let beta = if n == 1 {
                cfg.beta_start
            } else {
                cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        if let Some(bad) = alpha_bar.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Config(format!(
                "alpha_bar value {bad} outside (0, 1); the x0 estimate is singular at 0"
            )));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.alpha_bar.len() {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.alpha_bar.len()
            )));
        }
        Ok(self.alpha_bar[t - 1])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `steps` timesteps spaced evenly from `T` downwards, e.g. 1000, 990,
    /// …, 10 for `T = 1000, steps = 100`.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.num_steps();
        if steps == 0 || steps > n {
            return Err(Error::contract(format!("cannot take {steps} steps from a {n}-step schedule")));
        }
        Ok((0..steps).map(|i| n - (i * n) / steps).collect())
    }

    /// Per-item `(√ᾱ_t, √(1 − ᾱ_t))` broadcastable against `[B, C, H, W]`.
    fn coefficients(&self, ts: &[usize], like: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut a = Vec::with_capacity(ts.len());
        let mut b = Vec::with_capacity(ts.len());
        for &t in ts {
            let ab = self.alpha_bar(t)?;
            a.push(ab.sqrt());
            b.push((1.0 - ab).sqrt());
        }
        let shape = [ts.len() as i64, 1, 1, 1];
        let kind = like.kind();
        Ok((
            Tensor::from_slice(&a).to_kind(kind).view(shape),
            Tensor::from_slice(&b).to_kind(kind).view(shape),
        ))
    }
}

fn check_batch(x: &Tensor, ts: &[usize], other: &Tensor, what: &str) -> Result<()> {
    if x.size() != other.size() {
        return Err(Error::contract(format!(
            "{what} shape {:?} does not match latent shape {:?}",
            other.size(),
            x.size()
        )));
    }
    if x.dim() != 4 || x.size()[0] as usize != ts.len() {
        return Err(Error::contract(format!(
            "expected [B, C, H, W] with B = {} timesteps, got {:?}",
            ts.len(),
            x.size()
        )));
    }
    Ok(())
}

/// `√ᾱ_t · clean + √(1 − ᾱ_t) · noise`, per batch item.
pub fn forward_diffuse(clean: &Tensor, ts: &[usize], noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_batch(clean, ts, noise, "noise")?;
    let (a, b) = sched.coefficients(ts, clean)?;
    Ok(clean * a + noise * b)
}

/// `(noisy − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`, the one-shot clean estimate.
pub fn predict_x0(noisy: &Tensor, eps_hat: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    check_batch(noisy, ts, eps_hat, "noise estimate")?;
    for &t in ts {
        if sched.alpha_bar(t)? <= 0.0 {
            return Err(Error::contract(format!("alpha_bar at t={t} is zero")));
        }
    }
    let (a, b) = sched.coefficients(ts, noisy)?;
    Ok((noisy - eps_hat * b) / a)
}

/// Timesteps as a float tensor for the network's embedding.
pub fn timestep_tensor(ts: &[usize]) -> Tensor {
    let v: Vec<f32> = ts.iter().map(|&t| t as f32).collect();
    Tensor::from_slice(&v).to_kind(Kind::Float)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![0.9, 0.25, 0.1]).unwrap()
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::from_slice(&[v]).view([1, 1, 1, 1])
    }

    #[test]
    fn linear_schedule_is_valid() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.num_steps(), 1000);
        assert!(s.alpha_bar(1).unwrap() > 0.999);
        assert!(s.alpha_bar(1000).unwrap() < 1e-3);
        assert!(s.alpha_bar(1000).unwrap() > 0.0);
    }

    #[test]
    fn forward_example() {
        let out = forward_diffuse(&scalar(2.0), &[2], &scalar(1.0), &toy()).unwrap();
        let expected = 0.5 * 2.0 + 0.75f64.sqrt();
        assert!((out.double_value(&[0, 0, 0, 0]) - expected).abs() < 1e-12);
        assert!((expected - 1.8660).abs() < 1e-4);
    }

    #[test]
    fn inverse_example() {
        let out = predict_x0(&scalar(1.8660), &scalar(1.0), &[2], &toy()).unwrap();
        let expected = (1.8660 - 0.75f64.sqrt()) / 0.5;
        assert!((out.double_value(&[0, 0, 0, 0]) - expected).abs() < 1e-12);
        assert!((expected - 2.0).abs() < 1e-4);
        let zero = predict_x0(&scalar(1.0), &scalar(0.0), &[2], &toy()).unwrap();
        assert!((zero.double_value(&[0, 0, 0, 0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn near_one_alpha_bar_is_almost_identity() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0 - 1e-15]).unwrap();
        let out = forward_diffuse(&scalar(3.0), &[1], &scalar(5.0), &s).unwrap();
        assert!((out.double_value(&[0, 0, 0, 0]) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_timestep_is_rejected() {
        assert!(forward_diffuse(&scalar(1.0), &[0], &scalar(1.0), &toy()).is_err());
        assert!(forward_diffuse(&scalar(1.0), &[4], &scalar(1.0), &toy()).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.0]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn strided_timesteps() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let ts = s.strided(100).unwrap();
        assert_eq!(ts.len(), 100);
        assert_eq!((ts[0], ts[1], ts[99]), (1000, 990, 10));
    }
}
