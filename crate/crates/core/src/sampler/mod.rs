//! Guided sampling, per-step mask extraction and mask-blended editing.

pub mod session;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::diffusion::codec::{images_to_tensor, tensor_to_images};
use crate::diffusion::omp::tensor_to_masks;
use crate::diffusion::schedule::predict_x0;
use crate::diffusion::{rng, DiffusionModel, NoisePredictor};
use crate::error::{Error, Result};
use crate::imaging::check_mask_dims;
use crate::mask::{BinaryMask, SoftMask};

pub use session::{EditRound, EditSession, SessionLog};

/// Which of the per-step soft masks becomes the output mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Final,
    /// The mask after this many denoising steps (1-based).
    Fixed(usize),
    /// Pixelwise maximum over all steps.
    Union,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingRule {
    /// Ancestral sampling from the strided posterior.
    #[default]
    Ancestral,
    /// Deterministic strided update.
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub s_image: f64,
    pub s_text: f64,
    pub steps: usize,
    pub mask_threshold: f32,
    pub mask_source: MaskSource,
    pub seed: u64,
    pub rule: SamplingRule,
    /// Keep only the largest connected component of the binary mask.
    pub single_component: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_image: 1.5,
            s_text: 7.5,
            steps: 100,
            mask_threshold: 0.5,
            mask_source: MaskSource::Final,
            seed: 0,
            rule: SamplingRule::Ancestral,
            single_component: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("guidance needs at least one step".into()));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config("mask_threshold must lie strictly between 0 and 1".into()));
        }
        if !(self.s_image >= 0.0 && self.s_text >= 0.0 && self.s_image.is_finite() && self.s_text.is_finite()) {
            return Err(Error::Config("guidance scales must be finite and ≥ 0".into()));
        }
        if let MaskSource::Fixed(k) = self.mask_source {
            if k == 0 || k > self.steps {
                return Err(Error::Config(format!("mask step {k} outside 1..={}", self.steps)));
            }
        }
        Ok(())
    }
}

/// `ε(∅,∅) + s_I·(ε(z,∅) − ε(∅,∅)) + s_T·(ε(z,d) − ε(z,∅))`.
pub fn combine_guidance(eps_uncond: &Tensor, eps_image: &Tensor, eps_full: &Tensor, s_image: f64, s_text: f64) -> Tensor {
    eps_uncond + (eps_image - eps_uncond) * s_image + (eps_full - eps_image) * s_text
}

/// Guided noise estimate from three denoiser evaluations, run as one
/// batch of `3B`. `text` and `null_text` are `[B, D]`.
pub fn cfg_predict<E: NoisePredictor + ?Sized>(
    eps: &E,
    noisy: &Tensor,
    cond: &Tensor,
    text: &Tensor,
    null_text: &Tensor,
    ts: &[usize],
    s_image: f64,
    s_text: f64,
) -> Result<Tensor> {
    Ok(cfg_branches(eps, noisy, cond, text, null_text, ts)?.guided(s_image, s_text))
}

/// The three branch outputs of one guided evaluation.
#[derive(Debug)]
pub struct Branches {
    pub uncond: Tensor,
    pub image: Tensor,
    pub full: Tensor,
}

impl Branches {
    pub fn guided(&self, s_image: f64, s_text: f64) -> Tensor {
        combine_guidance(&self.uncond, &self.image, &self.full, s_image, s_text)
    }
}

pub fn cfg_branches<E: NoisePredictor + ?Sized>(
    eps: &E,
    noisy: &Tensor,
    cond: &Tensor,
    text: &Tensor,
    null_text: &Tensor,
    ts: &[usize],
) -> Result<Branches> {
    let b = noisy.size()[0];
    let x = Tensor::cat(&[noisy, noisy, noisy], 0);
    let c = Tensor::cat(&[&cond.zeros_like(), cond, cond], 0);
    let tx = Tensor::cat(&[null_text, null_text, text], 0);
    let tts: Vec<usize> = ts.iter().chain(ts).chain(ts).copied().collect();
    let out = eps.predict_noise(&x, &c, &tx, &tts)?;
    let parts = out.split(b, 0);
    Ok(Branches {
        uncond: parts[0].shallow_clone(),
        image: parts[1].shallow_clone(),
        full: parts[2].shallow_clone(),
    })
}

/// Upsamples to `target` (width, height) bilinearly, thresholds with `≥`,
/// optionally keeping the largest 8-connected component.
pub fn binarize_mask(soft: &SoftMask, threshold: f32, target: (usize, usize), single_component: bool) -> BinaryMask {
    let up = if soft.dims() == target {
        soft.clone()
    } else {
        soft.resize_bilinear(target.0, target.1)
    };
    let m = up.threshold(threshold);
    if single_component {
        m.largest_component()
    } else {
        m
    }
}

/// `previous·(1 − mask) + generated·mask`, rounded half away from zero.
/// Pixels outside the mask are copied from `previous` unchanged.
pub fn blend(previous: &RgbImage, generated: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    if previous.dimensions() != generated.dimensions() {
        return Err(Error::contract(format!(
            "blend inputs differ in size: {:?} vs {:?}",
            previous.dimensions(),
            generated.dimensions()
        )));
    }
    check_mask_dims(previous, mask)?;
    let mut out = previous.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let m = mask.get(x as usize, y as usize) as u8 as f32;
        if m == 0.0 {
            continue;
        }
        let g = generated.get_pixel(x, y);
        for c in 0..3 {
            let v = px[c] as f32 * (1.0 - m) + g[c] as f32 * m;
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Decoded generator output.
    pub image: RgbImage,
    pub mask: BinaryMask,
    /// One soft mask per denoising step, in step order.
    pub soft_masks: Vec<SoftMask>,
    /// `image` composited into the input through `mask`.
    pub blended: RgbImage,
    pub seed: u64,
}

/// One request within a batched sampling call.
#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub image: &'a RgbImage,
    pub caption: &'a str,
    pub seed: u64,
}

pub fn sample(model: &DiffusionModel, image: &RgbImage, caption: &str, gcfg: &GuidanceConfig) -> Result<SampleOutput> {
    let req = SampleRequest {
        image,
        caption,
        seed: gcfg.seed,
    };
    Ok(sample_batch(model, &[req], gcfg)?.remove(0))
}

/// Samples several requests together. Each request draws its noise from
/// its own seed, so results do not depend on what else is in the batch
/// beyond floating-point reduction order.
pub fn sample_batch(model: &DiffusionModel, reqs: &[SampleRequest<'_>], gcfg: &GuidanceConfig) -> Result<Vec<SampleOutput>> {
    gcfg.validate()?;
    if reqs.is_empty() {
        return Ok(Vec::new());
    }
    let size = model.config.image_size as u32;
    for r in reqs {
        if r.image.dimensions() != (size, size) {
            return Err(Error::contract(format!(
                "image is {:?}, model runs at {size}×{size}",
                r.image.dimensions()
            )));
        }
    }
    let tokens = reqs.iter().map(|r| model.token(r.caption)).collect::<Result<Vec<_>>>()?;
    let b = reqs.len() as i64;
    let shape = [3, size as i64, size as i64];
    let sched = &model.schedule;
    let timesteps = sched.strided(gcfg.steps)?;

    let mut rngs: Vec<ChaCha8Rng> = reqs.iter().map(|r| rng::stream("sample", &[r.seed])).collect();
    let draw = |rngs: &mut Vec<ChaCha8Rng>| {
        Tensor::stack(&rngs.iter_mut().map(|r| rng::randn(r, &shape)).collect::<Vec<_>>(), 0)
    };

    let outputs = tch::no_grad(|| -> Result<_> {
        let cond = images_to_tensor(&reqs.iter().map(|r| r.image).collect::<Vec<_>>())?;
        let text = model.embed(&tokens);
        let null_text = model.embed(&vec![model.null_token(); reqs.len()]);
        let mut x = draw(&mut rngs);
        let mut per_step: Vec<Vec<SoftMask>> = vec![Vec::with_capacity(gcfg.steps); reqs.len()];
        for (i, &t) in timesteps.iter().enumerate() {
            let ts = vec![t; b as usize];
            let br = cfg_branches(&model.denoiser, &x, &cond, &text, &null_text, &ts)?;
            let eps = br.guided(gcfg.s_image, gcfg.s_text);

            // Mask from the fully conditioned branch, as during training.
            let x0_cond = predict_x0(&x, &br.full, &ts, sched)?.clamp(-1.0, 1.0);
            let soft = model.predict_mask(&x0_cond, &cond)?;
            for (j, m) in tensor_to_masks(&soft)?.into_iter().enumerate() {
                per_step[j].push(m);
            }

            let x0 = predict_x0(&x, &eps, &ts, sched)?.clamp(-1.0, 1.0);
            let ab_t = sched.alpha_bar(t)?;
            let ab_prev = match timesteps.get(i + 1) {
                Some(&p) => sched.alpha_bar(p)?,
                None => 1.0,
            };
            x = match gcfg.rule {
                SamplingRule::Ddim => {
                    let eps_c = (&x - &x0 * ab_t.sqrt()) / (1.0 - ab_t).sqrt();
                    &x0 * ab_prev.sqrt() + eps_c * (1.0 - ab_prev).sqrt()
                }
                SamplingRule::Ancestral => {
                    let alpha = ab_t / ab_prev;
                    let beta = 1.0 - alpha;
                    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
                    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
                    let mean = &x0 * c0 + &x * ct;
                    if i + 1 < timesteps.len() {
                        let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
                        mean + draw(&mut rngs) * var.sqrt()
                    } else {
                        mean
                    }
                }
            };
        }
        Ok((x.to_kind(Kind::Float), per_step))
    })?;
    let (x, per_step) = outputs;

    let images = tensor_to_images(&x.clamp(-1.0, 1.0))?;
    let target = (size as usize, size as usize);
    reqs.iter()
        .zip(images)
        .zip(per_step)
        .map(|((r, image), soft_masks)| {
            let chosen = select_mask(&soft_masks, gcfg.mask_source);
            let mask = binarize_mask(&chosen, gcfg.mask_threshold, target, gcfg.single_component);
            let blended = blend(r.image, &image, &mask)?;
            Ok(SampleOutput {
                image,
                mask,
                soft_masks,
                blended,
                seed: r.seed,
            })
        })
        .collect()
}

fn select_mask(masks: &[SoftMask], source: MaskSource) -> SoftMask {
    match source {
        MaskSource::Final => masks.last().cloned().expect("at least one step"),
        MaskSource::Fixed(k) => masks[k - 1].clone(),
        MaskSource::Union => {
            let (w, h) = masks[0].dims();
            let mut acc = vec![0f32; w * h];
            for m in masks {
                for (a, v) in acc.iter_mut().zip(m.as_slice()) {
                    *a = a.max(*v);
                }
            }
            SoftMask::from_vec(w, h, acc).expect("sizes agree")
        }
    }
}

/// A fresh per-call seed when the caller does not pin one.
pub fn random_seed() -> u64 {
    use rand::RngCore;
    ChaCha8Rng::from_entropy().next_u64()
}
