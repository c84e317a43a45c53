//! Object mask predictor `τ_θ(ô_t, z)`: a small convolutional head that reads
//! the denoiser's clean-latent estimate next to the input latent and emits a
//! soft mask at latent resolution.

use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Tensor};

use super::nn::{conv3, norm, Attention, ResBlock};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, SoftMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OmpConfig {
    pub channels: i64,
    pub patch: i64,
    pub heads: i64,
}

impl Default for OmpConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            patch: 2,
            heads: 4,
        }
    }
}

pub trait MaskPredictor {
    /// `x0_hat`, `cond`: `[B, C, H, W]` → soft mask `[B, 1, H, W]` in `[0, 1]`.
    fn predict_mask(&self, x0_hat: &Tensor, cond: &Tensor) -> Result<Tensor>;
}

/// Input convolution, a residual block at full head resolution, a second
/// residual block and self-attention one level down, then back up with a
/// skip connection to the output convolution and a sigmoid.
#[derive(Debug)]
pub struct ObjectMaskPredictor {
    cfg: OmpConfig,
    latent_channels: i64,
    conv_in: nn::Conv2D,
    res1: ResBlock,
    res2: ResBlock,
    attn: Attention,
    out_norm: nn::GroupNorm,
    conv_out: nn::Conv2D,
}

impl ObjectMaskPredictor {
    pub fn new(p: nn::Path, cfg: &OmpConfig, latent_channels: i64) -> Self {
        let c = cfg.channels;
        let pp = cfg.patch * cfg.patch;
        Self {
            cfg: cfg.clone(),
            latent_channels,
            conv_in: conv3(&p / "conv_in", 2 * latent_channels * pp, c),
            res1: ResBlock::new(&p / "res1", c, c, None),
            res2: ResBlock::new(&p / "res2", c, c, None),
            attn: Attention::new(&p / "attn", c, cfg.heads),
            out_norm: norm(&p / "out_norm", c),
            conv_out: conv3(&p / "conv_out", c, pp),
        }
    }

    pub fn config(&self) -> &OmpConfig {
        &self.cfg
    }

    pub fn forward(&self, x0_hat: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let shape = x0_hat.size();
        if shape != cond.size() || shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(Error::contract(format!(
                "mask head inputs {:?} and {:?} must both be [B, {}, H, W]",
                shape,
                cond.size(),
                self.latent_channels
            )));
        }
        let f = self.cfg.patch * 2;
        if shape[2] % f != 0 || shape[3] % f != 0 {
            return Err(Error::contract(format!("spatial size {shape:?} not divisible by {f}")));
        }
        let x = Tensor::cat(&[x0_hat, cond], 1).pixel_unshuffle(self.cfg.patch);
        let h1 = self.res1.forward(&self.conv_in.forward(&x), None);
        let h2 = self.attn.forward(&self.res2.forward(&h1.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None), None));
        let (_, _, hh, ww) = h1.size4().unwrap();
        let h = h1 + h2.upsample_nearest2d([hh, ww], None, None);
        let logits = self.conv_out.forward(&self.out_norm.forward(&h).silu());
        Ok(logits.pixel_shuffle(self.cfg.patch).sigmoid())
    }
}

impl MaskPredictor for ObjectMaskPredictor {
    fn predict_mask(&self, x0_hat: &Tensor, cond: &Tensor) -> Result<Tensor> {
        self.forward(x0_hat, cond)
    }
}

/// Area-preserving bilinear reduction of a mask to latent resolution.
///
/// Each exact factor-2 step averages 2×2 blocks (bilinear sampling at
/// pixel centres reduces to that); a remaining non-dyadic ratio is covered
/// by one bilinear resample. Every step is linear in the input.
pub fn downsample_mask(m: &BinaryMask, target: (usize, usize)) -> Result<SoftMask> {
    downsample_soft(&m.to_soft(), target)
}

pub fn downsample_soft(m: &SoftMask, target: (usize, usize)) -> Result<SoftMask> {
    let (mut w, mut h) = m.dims();
    let (tw, th) = target;
    if tw == 0 || th == 0 || tw > w || th > h {
        return Err(Error::contract(format!(
            "cannot downsample {w}×{h} to {tw}×{th}"
        )));
    }
    let mut cur = m.clone();
    while w >= 2 * tw && h >= 2 * th && w % 2 == 0 && h % 2 == 0 {
        cur = halve(&cur);
        w /= 2;
        h /= 2;
    }
    if (w, h) == (tw, th) {
        Ok(cur)
    } else {
        Ok(cur.resize_bilinear(tw, th))
    }
}

fn halve(m: &SoftMask) -> SoftMask {
    let (w, h) = (m.width() / 2, m.height() / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = m.get(2 * x, 2 * y) + m.get(2 * x + 1, 2 * y) + m.get(2 * x, 2 * y + 1) + m.get(2 * x + 1, 2 * y + 1);
            data.push(s / 4.0);
        }
    }
    SoftMask::from_vec(w, h, data).expect("sizes agree")
}

/// Stacks soft masks into a `[B, 1, H, W]` float tensor.
pub fn masks_to_tensor(masks: &[SoftMask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::contract("no masks to stack"))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if m.dims() != (w, h) {
            return Err(Error::contract("masks differ in size"));
        }
        data.extend_from_slice(m.as_slice());
    }
    Ok(Tensor::from_slice(&data).view([masks.len() as i64, 1, h as i64, w as i64]))
}

/// Splits a `[B, 1, H, W]` tensor back into soft masks.
pub fn tensor_to_masks(t: &Tensor) -> Result<Vec<SoftMask>> {
    let s = t.size();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::contract(format!("expected [B, 1, H, W], got {s:?}")));
    }
    let (n, h, w) = (s[0] as usize, s[2] as usize, s[3] as usize);
    let flat: Vec<f32> = Vec::<f32>::try_from(t.to_kind(tch::Kind::Float).contiguous().view([-1]))?;
    flat.chunks(h * w).take(n).map(|c| SoftMask::from_vec(w, h, c.to_vec())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn constant_masks() {
        let ones = downsample_mask(&BinaryMask::filled(16, 12), (4, 3)).unwrap();
        assert!(ones.as_slice().iter().all(|&v| v == 1.0));
        let zeros = downsample_mask(&BinaryMask::new(16, 12), (5, 5)).unwrap();
        assert!(zeros.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn left_half_example() {
        let m = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let d = downsample_mask(&m, (2, 2)).unwrap();
        assert_eq!(d.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn upscaling_is_rejected() {
        assert!(downsample_mask(&BinaryMask::new(4, 4), (8, 4)).is_err());
    }

    #[test]
    fn identity_when_sizes_match() {
        let m = BinaryMask::from_fn(6, 6, |x, y| (x + y) % 3 == 0);
        let d = downsample_mask(&m, (6, 6)).unwrap();
        assert_eq!(d, m.to_soft());
    }

    #[test]
    fn mask_head_output_range_and_shape() {
        tch::manual_seed(3);
        let vs = nn::VarStore::new(Device::Cpu);
        let omp = ObjectMaskPredictor::new(vs.root(), &OmpConfig { channels: 8, patch: 2, heads: 2 }, 3);
        let x = Tensor::randn([2, 3, 16, 16], (Kind::Float, Device::Cpu)) * 10.0;
        let y = omp.predict_mask(&x, &x).unwrap();
        assert_eq!(y.size(), vec![2, 1, 16, 16]);
        assert!(y.min().double_value(&[]) >= 0.0 && y.max().double_value(&[]) <= 1.0);
        let masks = tensor_to_masks(&y).unwrap();
        assert_eq!(masks.len(), 2);
        assert!(masks_to_tensor(&masks).unwrap().equal(&y));
    }
}
