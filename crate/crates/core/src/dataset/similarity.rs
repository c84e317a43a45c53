//! Caption-to-region similarity used to reject failed removals.

use std::time::Duration;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::scene::category_index;
use crate::dataset::{FilterConfig, TrainingTuple};
use crate::error::{Error, Result};
use crate::imaging::{crop, png_base64};
use crate::oracle::OracleClassifier;

/// Margin added around the mask box before cropping.
pub const CROP_MARGIN_PX: usize = 2;

pub trait SimilarityBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Higher means the crop looks more like `caption`.
    fn score(&self, caption: &str, crop: &RgbImage) -> Result<f64>;
}

/// Probability the oracle classifier assigns to the caption's category.
pub struct OracleSimilarity {
    oracle: &'static OracleClassifier,
}

impl Default for OracleSimilarity {
    fn default() -> Self {
        Self {
            oracle: OracleClassifier::shared(),
        }
    }
}

impl SimilarityBackend for OracleSimilarity {
    fn name(&self) -> &str {
        "oracle-classifier"
    }

    fn score(&self, caption: &str, crop: &RgbImage) -> Result<f64> {
        let idx = category_index(caption).ok_or_else(|| Error::UnknownCaption(caption.into()))?;
        Ok(self.oracle.classify(crop).probabilities[idx] as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSimilarityConfig {
    pub endpoint: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

/// External CLIP-style scorer. Body `{"text", "image"}`; reply `{"score"}`.
pub struct HttpSimilarity {
    cfg: HttpSimilarityConfig,
    agent: ureq::Agent,
}

impl HttpSimilarity {
    pub fn new(cfg: HttpSimilarityConfig) -> Self {
        Self {
            cfg,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build(),
        }
    }
}

#[derive(Deserialize)]
struct ScoreReply {
    score: f64,
}

impl SimilarityBackend for HttpSimilarity {
    fn name(&self) -> &str {
        "http-similarity"
    }

    fn score(&self, caption: &str, crop: &RgbImage) -> Result<f64> {
        let key = self.cfg.api_key_env.as_ref().and_then(|k| std::env::var(k).ok());
        let body = serde_json::json!({
            "text": caption,
            "image": png_base64(&DynamicImage::ImageRgb8(crop.clone()))?,
        });
        let reply: ScoreReply = crate::http::post_json(&self.agent, &self.cfg.endpoint, &body, key.as_deref(), self.name())?;
        Ok(reply.score)
    }
}

/// Similarity between the caption and the masked region of the image after
/// removal, using a box crop.
pub fn region_similarity(tuple: &TrainingTuple, similarity: &dyn SimilarityBackend) -> Result<f64> {
    let bbox = tuple
        .mask
        .bbox()
        .ok_or_else(|| Error::contract("training tuple has an empty mask"))?;
    let (w, h) = tuple.mask.dims();
    let region = crop(&tuple.input_image, &bbox.expand(CROP_MARGIN_PX, w, h));
    similarity.score(&tuple.caption, &region)
}

/// Accepts iff the removed region no longer resembles the caption:
/// `score < similarity_reject_threshold`.
pub fn post_filter(tuple: &TrainingTuple, similarity: &dyn SimilarityBackend, cfg: &FilterConfig) -> Result<bool> {
    Ok(region_similarity(tuple, similarity)? < cfg.similarity_reject_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::removal::{remove_object, ExactRemoval, InpaintBackend, RemovalRequest};
    use crate::dataset::scene::{render_excluding, SceneSpec};
    use crate::dataset::{Provenance, SourceIds};

    struct Identity;

    impl InpaintBackend for Identity {
        fn name(&self) -> &str {
            "identity"
        }

        fn inpaint(&self, req: &RemovalRequest<'_>) -> Result<RgbImage> {
            Ok(req.image.clone())
        }
    }

    fn tuple_with(backend: &dyn InpaintBackend, spec: &SceneSpec) -> TrainingTuple {
        let (img, masks) = render_excluding(spec, &[]).unwrap();
        let input = remove_object(&img, &masks[0], 0, backend, 0).unwrap();
        TrainingTuple {
            input_image: input,
            caption: spec.object_placements[0].category.clone(),
            target_image: img,
            mask: masks[0].clone(),
            provenance: Provenance::Synthetic,
            source_ids: SourceIds { image_id: 0, instance_id: 0 },
        }
    }

    #[test]
    fn unremoved_object_is_rejected_and_exact_removal_accepted() {
        let spec = SceneSpec::tabletop(5, (64, 64), 1);
        let cfg = FilterConfig::default();
        let kept = tuple_with(&Identity, &spec);
        assert!(region_similarity(&kept, &OracleSimilarity::default()).unwrap() > 0.9);
        assert!(!post_filter(&kept, &OracleSimilarity::default(), &cfg).unwrap());

        let mut exact = ExactRemoval::new();
        exact.insert(0, render_excluding(&spec, &[0]).unwrap().0);
        let removed = tuple_with(&exact, &spec);
        assert_eq!(region_similarity(&removed, &OracleSimilarity::default()).unwrap(), 0.0);
        assert!(post_filter(&removed, &OracleSimilarity::default(), &cfg).unwrap());
    }

    struct Table(Vec<f64>);

    impl SimilarityBackend for Table {
        fn name(&self) -> &str {
            "table"
        }

        fn score(&self, caption: &str, _: &RgbImage) -> Result<f64> {
            Ok(self.0[caption.parse::<usize>().unwrap()])
        }
    }

    #[test]
    fn accepted_count_is_monotone_in_threshold() {
        let spec = SceneSpec::tabletop(11, (64, 64), 1);
        let base = tuple_with(&Identity, &spec);
        let scores: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64 / 10.0 + 0.05).collect();
        let tuples: Vec<TrainingTuple> = (0..10)
            .map(|i| TrainingTuple { caption: i.to_string(), ..base.clone() })
            .collect();
        let backend = Table(scores.clone());
        // Every distinct cut point, from strictest to most lenient.
        let mut thresholds = vec![0.0];
        let mut sorted = scores;
        sorted.sort_by(f64::total_cmp);
        thresholds.extend(sorted.iter().map(|s| s + 1e-9));
        let counts: Vec<usize> = thresholds
            .iter()
            .map(|&t| {
                let cfg = FilterConfig { similarity_reject_threshold: t, ..Default::default() };
                tuples.iter().filter(|tu| post_filter(tu, &backend, &cfg).unwrap()).count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
        assert_eq!(counts, (0..=10).collect::<Vec<_>>());
    }
}
