//! The noise-prediction U-Net `ε_θ(z̃_t, z, text, t)`.
//!
//! The noisy latent and the input-image latent are concatenated along
//! channels before the first convolution. Timestep (sinusoidal) and caption
//! embeddings are summed and injected into every residual block as a
//! per-channel scale and shift; with single-token captions this carries the
//! same information as cross-attention over the caption sequence.

use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Tensor};

use super::nn::{conv3, norm, timestep_embedding, zero_conv, Attention, Downsample, ResBlock, Upsample};
use super::schedule::timestep_tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Channel width per resolution level.
    pub channels: Vec<i64>,
    /// Self-attention after the residual block at each level.
    pub attention: Vec<bool>,
    /// Space-to-depth factor applied before the first convolution.
    pub patch: i64,
    pub time_dim: i64,
    pub emb_dim: i64,
    pub heads: i64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 192],
            attention: vec![false, false, true],
            patch: 2,
            time_dim: 64,
            emb_dim: 192,
            heads: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self, latent_size: i64) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.attention.len() {
            return Err(Error::Config("denoiser channels and attention lists must be nonempty and equal length".into()));
        }
        let factor = self.patch << (self.channels.len() - 1);
        if latent_size % factor != 0 {
            return Err(Error::Config(format!(
                "latent size {latent_size} is not divisible by {factor}"
            )));
        }
        if self.channels.iter().any(|c| c % self.heads != 0) {
            return Err(Error::Config("every channel width must divide into the attention heads".into()));
        }
        Ok(())
    }
}

/// Anything that predicts the added noise. Implemented by the U-Net and by
/// the small analytic stand-ins used in tests.
pub trait NoisePredictor {
    /// `noisy`, `cond`: `[B, C, H, W]`; `text`: `[B, D]`; one timestep per item.
    fn predict_noise(&self, noisy: &Tensor, cond: &Tensor, text: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

#[derive(Debug)]
struct Level {
    res: ResBlock,
    attn: Option<Attention>,
}

impl Level {
    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        let h = self.res.forward(x, Some(emb));
        match &self.attn {
            Some(a) => a.forward(&h),
            None => h,
        }
    }
}

#[derive(Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    latent_channels: i64,
    time_mlp: (nn::Linear, nn::Linear),
    text_proj: nn::Linear,
    conv_in: nn::Conv2D,
    down: Vec<Level>,
    downsample: Vec<Downsample>,
    mid: (ResBlock, Attention, ResBlock),
    up: Vec<Level>,
    upsample: Vec<Upsample>,
    out_norm: nn::GroupNorm,
    conv_out: nn::Conv2D,
}

impl Denoiser {
    pub fn new(p: nn::Path, cfg: &DenoiserConfig, latent_channels: i64, text_dim: i64) -> Self {
        let e = cfg.emb_dim;
        let pp = cfg.patch * cfg.patch;
        let ch = &cfg.channels;
        let n = ch.len();
        let level = |path: nn::Path, cin: i64, cout: i64, attn: bool| Level {
            res: ResBlock::new(&path / "res", cin, cout, Some(e)),
            attn: attn.then(|| Attention::new(&path / "attn", cout, cfg.heads)),
        };
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = ch[0];
        for i in 0..n {
            down.push(level(&p / "down" / i, prev, ch[i], cfg.attention[i]));
            if i + 1 < n {
                downsample.push(Downsample::new(&p / "downsample" / i, ch[i]));
            }
            prev = ch[i];
        }
        let last = ch[n - 1];
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for i in (0..n).rev() {
            up.push(level(&p / "up" / i, prev + ch[i], ch[i], cfg.attention[i]));
            if i > 0 {
                upsample.push(Upsample::new(&p / "upsample" / i, ch[i]));
            }
            prev = ch[i];
        }
        Self {
            cfg: cfg.clone(),
            latent_channels,
            time_mlp: (
                nn::linear(&p / "time1", cfg.time_dim, e, Default::default()),
                nn::linear(&p / "time2", e, e, Default::default()),
            ),
            text_proj: nn::linear(&p / "text_proj", text_dim, e, Default::default()),
            conv_in: conv3(&p / "conv_in", 2 * latent_channels * pp, ch[0]),
            down,
            downsample,
            mid: (
                ResBlock::new(&p / "mid1", last, last, Some(e)),
                Attention::new(&p / "mid_attn", last, cfg.heads),
                ResBlock::new(&p / "mid2", last, last, Some(e)),
            ),
            up,
            upsample,
            out_norm: norm(&p / "out_norm", ch[0]),
            conv_out: zero_conv(&p / "conv_out", ch[0], latent_channels * pp, 3),
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// `t` is a float tensor of timesteps, `[B]`.
    pub fn forward(&self, noisy: &Tensor, cond: &Tensor, text: &Tensor, t: &Tensor) -> Result<Tensor> {
        let shape = noisy.size();
        if shape != cond.size() {
            return Err(Error::contract(format!(
                "noisy latent {:?} and image latent {:?} differ in shape",
                shape,
                cond.size()
            )));
        }
        if shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(Error::contract(format!("expected [B, {}, H, W], got {shape:?}", self.latent_channels)));
        }
        let factor = self.cfg.patch << (self.cfg.channels.len() - 1);
        if shape[2] % factor != 0 || shape[3] % factor != 0 {
            return Err(Error::contract(format!("spatial size {shape:?} not divisible by {factor}")));
        }
        if text.size() != [shape[0], self.text_proj.ws.size()[1]] {
            return Err(Error::contract(format!("text embedding shape {:?} does not match batch", text.size())));
        }

        let temb = timestep_embedding(t, self.cfg.time_dim);
        let emb = self.time_mlp.1.forward(&self.time_mlp.0.forward(&temb).silu()) + self.text_proj.forward(text);

        let x = Tensor::cat(&[noisy, cond], 1).pixel_unshuffle(self.cfg.patch);
        let mut h = self.conv_in.forward(&x);
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, lvl) in self.down.iter().enumerate() {
            h = lvl.forward(&h, &emb);
            skips.push(h.shallow_clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h);
            }
        }
        h = self.mid.0.forward(&h, Some(&emb));
        h = self.mid.1.forward(&h);
        h = self.mid.2.forward(&h, Some(&emb));
        for (j, lvl) in self.up.iter().enumerate() {
            let skip = skips.pop().unwrap();
            h = lvl.forward(&Tensor::cat(&[&h, &skip], 1), &emb);
            if let Some(us) = self.upsample.get(j) {
                h = us.forward(&h);
            }
        }
        let out = self.conv_out.forward(&self.out_norm.forward(&h).silu());
        Ok(out.pixel_shuffle(self.cfg.patch))
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, noisy: &Tensor, cond: &Tensor, text: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.forward(noisy, cond, text, &timestep_tensor(ts).to_device(noisy.device()))
    }
}
