//! Independent random nulling of the image and text conditions during
//! training, which is what later allows guidance with either condition off.

use rand::Rng;
use tch::Tensor;

use super::codec::Latent;
use super::text::TextEmbedding;

pub const DEFAULT_NULL_PROBABILITY: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropDecision {
    pub image: bool,
    pub text: bool,
}

/// Two independent Bernoulli(p) draws, image first.
pub fn sample_drop<R: Rng + ?Sized>(rng: &mut R, p: f64) -> DropDecision {
    DropDecision {
        image: rng.gen_bool(p),
        text: rng.gen_bool(p),
    }
}

/// Replaces `z` with the all-zeros latent and `text` with `null_text`,
/// each independently with probability `p`.
pub fn dropout_conditions<R: Rng + ?Sized>(
    z: &Latent,
    text: &TextEmbedding,
    null_text: &TextEmbedding,
    rng: &mut R,
    p: f64,
) -> (Latent, TextEmbedding) {
    let d = sample_drop(rng, p);
    let z_out = Latent {
        data: if d.image { z.data.zeros_like() } else { z.data.shallow_clone() },
        space: z.space,
    };
    let t_out = if d.text {
        TextEmbedding {
            data: null_text.data.shallow_clone(),
            is_null: true,
        }
    } else {
        TextEmbedding {
            data: text.data.shallow_clone(),
            is_null: text.is_null,
        }
    };
    (z_out, t_out)
}

/// Batched form: zeroes image conditions in place of dropped items and
/// returns per-item text tokens with dropped ones replaced by `null_token`.
pub fn apply_batch_dropout(cond: &Tensor, tokens: &[i64], decisions: &[DropDecision], null_token: i64) -> (Tensor, Vec<i64>) {
    let keep: Vec<f32> = decisions.iter().map(|d| if d.image { 0.0 } else { 1.0 }).collect();
    let keep = Tensor::from_slice(&keep).view([decisions.len() as i64, 1, 1, 1]).to_device(cond.device());
    let tokens = tokens
        .iter()
        .zip(decisions)
        .map(|(&t, d)| if d.text { null_token } else { t })
        .collect();
    (cond * keep, tokens)
}
