//! Training objectives: noise regression for the denoiser, mask regression
//! for the mask head, and their weighted sum.

use tch::Tensor;

use super::denoiser::NoisePredictor;
use super::omp::MaskPredictor;
use super::schedule::{forward_diffuse, predict_x0, NoiseSchedule};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 2.0;

/// One encoded training batch. `cond`/`text` are what the denoiser sees
/// (possibly nulled); the mask head always reads the real `mask_cond`.
#[derive(Debug)]
pub struct LatentBatch {
    /// Clean target latents `z̃`, `[B, C, H, W]`.
    pub clean: Tensor,
    pub cond: Tensor,
    pub mask_cond: Tensor,
    /// `[B, D]` caption embeddings.
    pub text: Tensor,
    /// Downsampled ground-truth masks `m′`, `[B, 1, H, W]`.
    pub mask: Tensor,
    pub ts: Vec<usize>,
    pub noise: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub lambda: f64,
    /// Clamp `ô_t` to the data range `[-1, 1]` before the mask head.
    pub clamp_x0: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            clamp_x0: true,
        }
    }
}

#[derive(Debug)]
pub struct Losses {
    pub dm: Tensor,
    pub omp: Tensor,
    pub total: Tensor,
}

impl Losses {
    pub fn values(&self) -> (f64, f64, f64) {
        (
            self.dm.double_value(&[]),
            self.omp.double_value(&[]),
            self.total.double_value(&[]),
        )
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    (a - b).square().mean(a.kind())
}

fn ensure_finite(name: &str, t: &Tensor) -> Result<()> {
    let v = t.double_value(&[]);
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step: 0,
            detail: format!("{name} is {v}"),
        })
    }
}

fn noisy_and_eps<E: NoisePredictor + ?Sized>(b: &LatentBatch, eps_net: &E, sched: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    let noisy = forward_diffuse(&b.clean, &b.ts, &b.noise, sched)?;
    let eps_hat = eps_net.predict_noise(&noisy, &b.cond, &b.text, &b.ts)?;
    Ok((noisy, eps_hat))
}

fn omp_term<M: MaskPredictor + ?Sized>(
    b: &LatentBatch,
    noisy: &Tensor,
    eps_hat: &Tensor,
    omp: &M,
    sched: &NoiseSchedule,
    opts: &LossOptions,
) -> Result<Tensor> {
    // The mask loss must not reach the denoiser through ô_t.
    let mut x0 = predict_x0(noisy, &eps_hat.detach(), &b.ts, sched)?;
    if opts.clamp_x0 {
        x0 = x0.clamp(-1.0, 1.0);
    }
    let pred = omp.predict_mask(&x0, &b.mask_cond)?;
    if pred.size() != b.mask.size() {
        return Err(Error::contract(format!(
            "mask head produced {:?}, target masks are {:?}",
            pred.size(),
            b.mask.size()
        )));
    }
    Ok(mse(&pred, &b.mask))
}

pub fn loss_dm<E: NoisePredictor + ?Sized>(b: &LatentBatch, eps_net: &E, sched: &NoiseSchedule) -> Result<Tensor> {
    let (_, eps_hat) = noisy_and_eps(b, eps_net, sched)?;
    let l = mse(&eps_hat, &b.noise);
    ensure_finite("loss_dm", &l)?;
    Ok(l)
}

pub fn loss_omp<E: NoisePredictor + ?Sized, M: MaskPredictor + ?Sized>(
    b: &LatentBatch,
    eps_net: &E,
    omp: &M,
    sched: &NoiseSchedule,
    opts: &LossOptions,
) -> Result<Tensor> {
    let (noisy, eps_hat) = noisy_and_eps(b, eps_net, sched)?;
    let l = omp_term(b, &noisy, &eps_hat, omp, sched, opts)?;
    ensure_finite("loss_omp", &l)?;
    Ok(l)
}

/// `loss_dm + λ · loss_omp`, sharing one denoiser evaluation.
pub fn loss_total<E: NoisePredictor + ?Sized, M: MaskPredictor + ?Sized>(
    b: &LatentBatch,
    eps_net: &E,
    omp: &M,
    sched: &NoiseSchedule,
    opts: &LossOptions,
) -> Result<Losses> {
    if opts.lambda < 0.0 || !opts.lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", opts.lambda)));
    }
    let (noisy, eps_hat) = noisy_and_eps(b, eps_net, sched)?;
    let dm = mse(&eps_hat, &b.noise);
    let omp = omp_term(b, &noisy, &eps_hat, omp, sched, opts)?;
    let total = &dm + &omp * opts.lambda;
    ensure_finite("loss_dm", &dm)?;
    ensure_finite("loss_omp", &omp)?;
    ensure_finite("loss_total", &total)?;
    Ok(Losses { dm, omp, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    struct Truth(Tensor);
    impl NoisePredictor for Truth {
        fn predict_noise(&self, _: &Tensor, _: &Tensor, _: &Tensor, _: &[usize]) -> Result<Tensor> {
            Ok(self.0.shallow_clone())
        }
    }
    struct Fixed(Tensor);
    impl MaskPredictor for Fixed {
        fn predict_mask(&self, _: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok(self.0.shallow_clone())
        }
    }

    fn batch() -> LatentBatch {
        tch::manual_seed(5);
        let opts = (Kind::Double, Device::Cpu);
        LatentBatch {
            clean: Tensor::rand([2, 3, 4, 4], opts) * 2.0 - 1.0,
            cond: Tensor::rand([2, 3, 4, 4], opts),
            mask_cond: Tensor::rand([2, 3, 4, 4], opts),
            text: Tensor::zeros([2, 1], opts),
            mask: Tensor::rand([2, 1, 4, 4], opts).round(),
            ts: vec![3, 1],
            noise: Tensor::randn([2, 3, 4, 4], opts),
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![0.9, 0.5, 0.1]).unwrap()
    }

    #[test]
    fn oracle_predictors_give_zero_losses() {
        let b = batch();
        let eps = Truth(b.noise.shallow_clone());
        let omp = Fixed(b.mask.shallow_clone());
        let l = loss_total(&b, &eps, &omp, &sched(), &LossOptions::default()).unwrap();
        assert_eq!(l.values(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn lambda_zero_decouples() {
        let b = batch();
        let eps = Truth(b.noise.zeros_like());
        let omp = Fixed(b.mask.ones_like() * 0.5);
        let l = loss_total(&b, &eps, &omp, &sched(), &LossOptions { lambda: 0.0, clamp_x0: true }).unwrap();
        let (dm, om, total) = l.values();
        assert!(om > 0.0);
        assert_eq!(total, dm);
        let l2 = loss_total(&b, &eps, &omp, &sched(), &LossOptions::default()).unwrap().values();
        assert_eq!(l2.2, l2.0 + 2.0 * l2.1);
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let b = batch();
        let eps = Truth(b.noise.full_like(f64::NAN));
        let omp = Fixed(b.mask.shallow_clone());
        assert!(matches!(loss_dm(&b, &eps, &sched()), Err(Error::Divergence { .. })));
        assert!(matches!(
            loss_total(&b, &eps, &omp, &sched(), &LossOptions::default()),
            Err(Error::Divergence { .. })
        ));
    }
}
