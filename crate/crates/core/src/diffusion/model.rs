//! The trainable bundle: caption table, denoiser and mask head in one
//! variable store, plus the schedule they were trained with.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tch::{nn, Device, Tensor};

use super::checkpoint::Checkpoint;
use super::codec::{LatentSpace, PixelCodec};
use super::denoiser::{Denoiser, DenoiserConfig, NoisePredictor};
use super::omp::{MaskPredictor, ObjectMaskPredictor, OmpConfig};
use super::rng;
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::text::{TextEncoder, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: i64,
    pub latent_channels: i64,
    pub latent_space: LatentSpace,
    pub text_dim: i64,
    pub external_text_dim: Option<i64>,
    pub vocabulary: Vec<String>,
    pub denoiser: DenoiserConfig,
    pub omp: OmpConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_channels: 3,
            latent_space: LatentSpace::Pixel,
            text_dim: 64,
            external_text_dim: None,
            vocabulary: Vocabulary::categories().names().to_vec(),
            denoiser: DenoiserConfig::default(),
            omp: OmpConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A very small network at 16×16, for tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            text_dim: 8,
            denoiser: DenoiserConfig {
                channels: vec![8, 16],
                attention: vec![false, true],
                patch: 2,
                time_dim: 8,
                emb_dim: 16,
                heads: 2,
            },
            omp: OmpConfig {
                channels: 8,
                patch: 2,
                heads: 2,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_space != LatentSpace::Pixel {
            return Err(Error::Config("only pixel-space latents ship with this crate".into()));
        }
        if self.latent_channels != 3 {
            return Err(Error::Config("pixel-space latents have 3 channels".into()));
        }
        self.denoiser.validate(self.image_size)?;
        if self.image_size % (self.omp.patch * 2) != 0 {
            return Err(Error::Config("image size must divide by twice the mask-head patch".into()));
        }
        Vocabulary::new(self.vocabulary.clone())?;
        NoiseSchedule::linear(&self.schedule)?;
        Ok(())
    }
}

pub struct DiffusionModel {
    pub config: ModelConfig,
    pub vs: nn::VarStore,
    pub text: TextEncoder,
    pub denoiser: Denoiser,
    pub omp: ObjectMaskPredictor,
    pub schedule: NoiseSchedule,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Variable name prefixes. Everything under `denoiser.` (caption table
/// included) is what the noise loss trains and what the moving average
/// tracks.
pub const DENOISER_PREFIX: &str = "denoiser.";
pub const OMP_PREFIX: &str = "omp.";

impl DiffusionModel {
    /// Fresh parameters. Each variable is drawn from its own stream keyed
    /// by `seed` and the variable name.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let vocab = Vocabulary::new(config.vocabulary.clone())?;
        let text = TextEncoder::new(&root / "denoiser" / "text", vocab, config.text_dim, config.external_text_dim);
        let denoiser = Denoiser::new(&root / "denoiser" / "unet", &config.denoiser, config.latent_channels, config.text_dim);
        let omp = ObjectMaskPredictor::new(&root / "omp", &config.omp, config.latent_channels);
        let schedule = NoiseSchedule::linear(&config.schedule)?;
        reinitialize(&vs, seed);
        Ok(Self {
            config,
            vs,
            text,
            denoiser,
            omp,
            schedule,
        })
    }

    /// Rebuilds a model from `model/` (or `ema/` for the denoiser when
    /// `use_ema` is set and present) tensors of a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, use_ema: bool) -> Result<Self> {
        let mut m = Self::new(ckpt.model.clone(), 0)?;
        m.load_group(&ckpt.group("model"))?;
        if use_ema {
            let ema = ckpt.group("ema");
            if !ema.is_empty() {
                m.load_group(&ema)?;
            }
        }
        Ok(m)
    }

    /// A weights-only checkpoint at step 0 (no optimizer or EMA state).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.config.clone());
        c.insert_group("model", &self.variables());
        c
    }

    pub fn codec(&self) -> PixelCodec {
        PixelCodec {
            size: self.config.image_size as u32,
        }
    }

    /// All variables, sorted by name.
    pub fn variables(&self) -> BTreeMap<String, Tensor> {
        self.vs.variables().into_iter().collect()
    }

    /// Trainable variables, sorted by name.
    pub fn trainable(&self) -> BTreeMap<String, Tensor> {
        self.variables().into_iter().filter(|(_, v)| v.requires_grad()).collect()
    }

    pub fn denoiser_trainable(&self) -> BTreeMap<String, Tensor> {
        self.trainable().into_iter().filter(|(k, _)| k.starts_with(DENOISER_PREFIX)).collect()
    }

    pub fn parameter_count(&self) -> i64 {
        self.trainable().values().map(|t| t.numel() as i64).sum()
    }

    /// Copies named tensors into the matching variables. Every name must
    /// exist with the same shape.
    pub fn load_group(&mut self, tensors: &BTreeMap<String, &Tensor>) -> Result<()> {
        let vars = self.variables();
        tch::no_grad(|| {
            for (name, src) in tensors {
                let mut dst = vars
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown variable {name}")))?
                    .shallow_clone();
                if dst.size() != src.size() {
                    return Err(Error::Checkpoint(format!(
                        "variable {name} has shape {:?}, checkpoint has {:?}",
                        dst.size(),
                        src.size()
                    )));
                }
                dst.copy_(src);
            }
            Ok(())
        })
    }

    /// Caption tokens to `[B, D]` embeddings.
    pub fn embed(&self, tokens: &[i64]) -> Tensor {
        self.text.embed_tokens(tokens)
    }

    pub fn token(&self, caption: &str) -> Result<i64> {
        self.text.vocab().token(caption)
    }

    pub fn null_token(&self) -> i64 {
        self.text.vocab().null_token()
    }

    /// Noise prediction with token-level text conditioning.
    pub fn predict_noise_tokens(&self, noisy: &Tensor, cond: &Tensor, tokens: &[i64], ts: &[usize]) -> Result<Tensor> {
        self.denoiser.predict_noise(noisy, cond, &self.embed(tokens), ts)
    }

    pub fn predict_mask(&self, x0_hat: &Tensor, cond: &Tensor) -> Result<Tensor> {
        self.omp.predict_mask(x0_hat, cond)
    }
}

/// Constant-initialized variables (norm scales and offsets, biases, the
/// zero-initialized output layers) keep their values; weight matrices get
/// `U(±1/√fan_in)`, the caption table `N(0, 1)`.
fn reinitialize(vs: &nn::VarStore, seed: u64) {
    let vars: BTreeMap<String, Tensor> = vs.variables().into_iter().collect();
    tch::no_grad(|| {
        for (name, mut v) in vars {
            let shape = v.size();
            let constant = v.numel() == 0 || v.max().double_value(&[]) == v.min().double_value(&[]);
            let mut rng = rng::stream("init", &[seed, name_key(&name)]);
            let fresh = if name.contains(".text.table") {
                rng::randn(&mut rng, &shape)
            } else if constant {
                continue;
            } else if shape.len() >= 2 {
                let fan_in = (v.numel() as i64 / shape[0]) as f32;
                let b = 1.0 / fan_in.sqrt();
                rng::uniform(&mut rng, &shape, -b, b)
            } else {
                Tensor::zeros(shape.as_slice(), (v.kind(), v.device()))
            };
            v.copy_(&fresh);
        }
    });
}

fn name_key(name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_size_is_desk_scale() {
        let m = DiffusionModel::new(ModelConfig::default(), 0).unwrap();
        let n = m.parameter_count();
        assert!((2_000_000..=8_000_000).contains(&n), "{n} parameters");
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = DiffusionModel::new(ModelConfig::tiny(), 4).unwrap();
        let b = DiffusionModel::new(ModelConfig::tiny(), 4).unwrap();
        let c = DiffusionModel::new(ModelConfig::tiny(), 5).unwrap();
        let (va, vb, vc) = (a.variables(), b.variables(), c.variables());
        assert!(va.iter().all(|(k, v)| v.equal(&vb[k])));
        assert!(va.iter().any(|(k, v)| !v.equal(&vc[k])));
    }

    #[test]
    fn variable_groups_are_disjoint() {
        let m = DiffusionModel::new(ModelConfig::tiny(), 0).unwrap();
        let all = m.trainable();
        assert!(all.keys().all(|k| k.starts_with(DENOISER_PREFIX) || k.starts_with(OMP_PREFIX)));
        assert!(all.keys().any(|k| k.starts_with("denoiser.text.")));
    }
}
