//! Adam with inspectable, serializable moment buffers, global-norm gradient
//! clipping, and an exponential moving average of weights.

use std::collections::BTreeMap;

use tch::{Kind, Tensor};

use super::config::AdamConfig;

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &BTreeMap<String, Tensor>) -> Self {
        let zeros = |p: &Tensor| p.zeros_like().detach();
        Self {
            cfg,
            m: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            v: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            t: 0,
        }
    }

    /// Applies one update from the gradients currently stored on `params`.
    /// Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        tch::no_grad(|| {
            for (name, p) in params {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                let m = self.m.get_mut(name).expect("moment buffer for every parameter");
                let v = self.v.get_mut(name).expect("moment buffer for every parameter");
                *m = &*m * beta1 + &g * (1.0 - beta1);
                *v = &*v * beta2 + g.square() * (1.0 - beta2);
                if lr != 0.0 {
                    let update = (&*m / bc1) / ((&*v / bc2).sqrt() + eps) * lr;
                    let mut p = p.shallow_clone();
                    let _ = p.f_sub_(&update).expect("in-place update");
                }
            }
        });
    }
}

/// Global L2 norm of all gradients; rescales them in place when it exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let grads: Vec<Tensor> = params.values().map(|p| p.grad()).filter(|g| g.defined()).collect();
    let total: f64 = grads
        .iter()
        .map(|g| g.square().sum(Kind::Double).double_value(&[]))
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = max_norm / (total + 1e-6);
        tch::no_grad(|| {
            for mut g in grads {
                let _ = g.f_mul_scalar_(scale).expect("in-place scale");
            }
        });
    }
    total
}

pub fn zero_grads(params: &BTreeMap<String, Tensor>) {
    for p in params.values() {
        let mut p = p.shallow_clone();
        p.zero_grad();
    }
}

#[derive(Debug)]
pub struct Ema {
    pub decay: f64,
    pub shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(decay: f64, params: &BTreeMap<String, Tensor>) -> Self {
        Self {
            decay,
            shadow: params.iter().map(|(k, p)| (k.clone(), p.detach().copy())).collect(),
        }
    }

    pub fn update(&mut self, params: &BTreeMap<String, Tensor>) {
        let d = self.decay;
        tch::no_grad(|| {
            for (k, s) in self.shadow.iter_mut() {
                if let Some(p) = params.get(k) {
                    *s = &*s * d + p.detach() * (1.0 - d);
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Kind;

    fn params(vals: &[f64]) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::from_slice(vals).to_kind(Kind::Double).set_requires_grad(true));
        m
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let p = params(&[1.0, -2.0]);
        let loss = (&p["w"] * Tensor::from_slice(&[3.0, -0.5])).sum(Kind::Double);
        loss.backward();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&p, 0.1);
        let w = Vec::<f64>::try_from(&p["w"].detach()).unwrap();
        // Bias-corrected first step: m̂/√v̂ = sign(g) up to eps.
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - (-1.9)).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let p = params(&[1.0, 2.0]);
        (&p["w"] * 5.0).sum(Kind::Double).backward();
        let before = p["w"].detach().copy();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&p, 0.0);
        assert!(p["w"].detach().equal(&before));
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let p = params(&[0.0, 0.0]);
        (&p["w"] * Tensor::from_slice(&[3.0, 4.0])).sum(Kind::Double).backward();
        let n = clip_grad_norm(&p, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let g = Vec::<f64>::try_from(&p["w"].grad()).unwrap();
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn ema_tracks_average() {
        let p = params(&[0.0]);
        let mut ema = Ema::new(0.5, &p);
        tch::no_grad(|| {
            let mut w = p["w"].shallow_clone();
            let _ = w.fill_(4.0);
        });
        ema.update(&p);
        assert_eq!(ema.shadow["w"].double_value(&[0]), 2.0);
    }
}
