//! The five evaluation axes and the cross-method unified score.

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::backends::{EmbeddingBackend, FeatureBackend, JudgeBackend, JudgeRequest, PerceptualBackend};
use crate::dataset::scene::category_index;
use crate::dataset::similarity::CROP_MARGIN_PX;
use crate::diffusion::Vocabulary;
use crate::error::{Error, Result};
use crate::imaging::{check_mask_dims, check_same_dims, crop, crop_masked};
use crate::mask::BinaryMask;
use crate::oracle::OracleClassifier;

/// Fill for out-of-mask pixels in the background-removed crop.
pub const NEUTRAL_GRAY: Rgb<u8> = Rgb([128, 128, 128]);
pub const DEFAULT_JUDGE_ATTEMPTS: usize = 3;
/// Diagonal loading applied when a feature covariance is singular.
pub const FID_REGULARIZATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    /// Background consistency (perceptual distance, lower is better).
    pub consistency: Option<f64>,
    /// Location rating in 1..=5.
    pub reasonableness: Option<f64>,
    /// Local CLIP-style score.
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub input_image: RgbImage,
    pub caption: String,
    pub output_image: RgbImage,
    pub output_mask: BinaryMask,
    /// `None` until a success protocol has run.
    pub success: Option<bool>,
    pub scores: RecordScores,
}

impl EvalRecord {
    pub fn new(
        id: impl Into<String>,
        input_image: RgbImage,
        caption: impl Into<String>,
        output_image: RgbImage,
        output_mask: BinaryMask,
    ) -> Result<Self> {
        check_same_dims(&input_image, &output_image)?;
        check_mask_dims(&output_image, &output_mask)?;
        Ok(Self {
            id: id.into(),
            input_image,
            caption: caption.into(),
            output_image,
            output_mask,
            success: None,
            scores: RecordScores::default(),
        })
    }
}

/// Perceptual distance between `x` and the composite that keeps `x` inside
/// the mask and `x_output` outside it.
pub fn background_consistency(
    x: &RgbImage,
    x_output: &RgbImage,
    m_output: &BinaryMask,
    perceptual: &dyn PerceptualBackend,
) -> Result<f64> {
    check_same_dims(x, x_output)?;
    check_mask_dims(x, m_output)?;
    let composite = RgbImage::from_fn(x.width(), x.height(), |px, py| {
        if m_output.get(px as usize, py as usize) {
            *x.get_pixel(px, py)
        } else {
            *x_output.get_pixel(px, py)
        }
    });
    perceptual.distance(x, &composite)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub rating: u8,
    pub justification: String,
    pub attempts: usize,
}

/// Extracts the 1..=5 rating from a judge reply: either `Rating: N ...`
/// anywhere in the text or a reply that is just the number.
pub fn parse_rating(reply: &str) -> Result<(u8, String)> {
    static LABELLED: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let labelled = LABELLED.get_or_init(|| Regex::new(r"(?i)rating\s*\**\s*[:=]?\s*\**\s*(\d+)\b").unwrap());
    let bad = || Error::UnparseableJudgment {
        attempts: 1,
        last: reply.to_string(),
    };
    let (value, rest) = if let Some(c) = labelled.captures(reply) {
        let m = c.get(0).unwrap();
        (c[1].parse::<u32>().map_err(|_| bad())?, &reply[m.end()..])
    } else {
        let t = reply.trim();
        (t.parse::<u32>().map_err(|_| bad())?, "")
    };
    if !(1..=5).contains(&value) {
        return Err(bad());
    }
    let justification = rest
        .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '-' | '\u{2014}' | '\u{2013}' | ':' | ',' | '.' | '*'))
        .trim()
        .to_string();
    Ok((value as u8, justification))
}

/// Asks the judge up to `max_attempts` times. Malformed replies and
/// retryable backend errors consume an attempt; other errors are returned
/// at once. If attempts run out on a transport error, that (retryable)
/// error is returned.
pub fn location_reasonableness(
    x: &RgbImage,
    x_output: &RgbImage,
    d: &str,
    template: &str,
    judge: &dyn JudgeBackend,
    max_attempts: usize,
) -> Result<Judgment> {
    check_same_dims(x, x_output)?;
    let req = JudgeRequest {
        input: x,
        output: x_output,
        caption: d,
        template,
    };
    let mut last_reply = None;
    let mut last_err = None;
    for attempt in 1..=max_attempts.max(1) {
        match judge.judge(&req) {
            Ok(reply) => match parse_rating(&reply) {
                Ok((rating, justification)) => {
                    return Ok(Judgment {
                        rating,
                        justification,
                        attempts: attempt,
                    })
                }
                Err(_) => {
                    log::warn!("judge reply {attempt}/{max_attempts} unparseable: {reply:?}");
                    last_reply = Some(reply);
                    last_err = None;
                }
            },
            Err(e) if e.is_retryable() => {
                log::warn!("judge attempt {attempt}/{max_attempts} failed: {e}");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    match (last_err, last_reply) {
        (Some(e), _) => Err(e),
        (None, last) => Err(Error::UnparseableJudgment {
            attempts: max_attempts.max(1),
            last: last.unwrap_or_default(),
        }),
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("embedding dims {} and {} differ", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

/// `100 · mean` of the two crop cosines.
pub fn local_clip_from_cosines(with_background: f64, background_removed: f64) -> f64 {
    100.0 * (with_background + background_removed) / 2.0
}

/// Text/crop agreement on the masked object: the mean of the score on the
/// bbox crop and on the same crop with out-of-mask pixels set to gray.
pub fn local_clip_score(d: &str, x_output: &RgbImage, m_output: &BinaryMask, embed: &dyn EmbeddingBackend) -> Result<f64> {
    check_mask_dims(x_output, m_output)?;
    let bbox = m_output
        .bbox()
        .ok_or_else(|| Error::UndefinedScore("local CLIP score needs a nonempty mask".into()))?;
    let e_d = embed.embed_text(d)?;
    let c1 = cosine(&e_d, &embed.embed_image(&crop(x_output, &bbox))?)?;
    let c2 = cosine(&e_d, &embed.embed_image(&crop_masked(x_output, m_output, &bbox, NEUTRAL_GRAY))?)?;
    Ok(local_clip_from_cosines(c1, c2))
}

/// Mean and (unbiased) covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        let dim = features.first().ok_or_else(|| Error::EmptyInput("no feature vectors".into()))?.len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::contract("feature vectors differ in length"));
        }
        let mut mean = DVector::zeros(dim);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov += &c * c.transpose();
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        Ok(Self { mean, cov })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Trace of `(Σ1 Σ2)^{1/2}`, computed as the trace of the square root of
/// the symmetric PSD matrix `Σ1^{1/2} Σ2 Σ1^{1/2}` (same spectrum).
fn trace_sqrt_product(c1: &DMatrix<f64>, c2: &DMatrix<f64>) -> f64 {
    let s1 = psd_sqrt(c1);
    let inner = &s1 * c2 * &s1;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::contract(format!(
            "Fréchet inputs disagree: means {} and {}, covariances {:?} and {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    let diff = (mu1 - mu2).norm_squared();
    let value = diff + cov1.trace() + cov2.trace() - 2.0 * trace_sqrt_product(cov1, cov2);
    Ok(value.max(0.0))
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let ev = SymmetricEigen::new((cov + cov.transpose()) * 0.5).eigenvalues;
    let max = ev.iter().cloned().fold(0.0f64, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    min <= 1e-12 * max.max(1.0)
}

/// Fréchet distance between two feature sets. When either covariance is
/// singular both get `FID_REGULARIZATION · I` added.
pub fn local_fid_from_features(originals: &[Vec<f64>], outputs: &[Vec<f64>]) -> Result<f64> {
    if originals.is_empty() || outputs.is_empty() {
        return Err(Error::EmptyInput("local FID needs both region sets nonempty".into()));
    }
    let mut a = GaussianStats::fit(originals)?;
    let mut b = GaussianStats::fit(outputs)?;
    if a.mean.len() != b.mean.len() {
        return Err(Error::contract("feature dims of the two sets differ"));
    }
    if is_singular(&a.cov) || is_singular(&b.cov) {
        log::warn!(
            "singular feature covariance ({} and {} samples, dim {}); adding {FID_REGULARIZATION}·I",
            originals.len(),
            outputs.len(),
            a.mean.len()
        );
        let eye = DMatrix::<f64>::identity(a.mean.len(), a.mean.len()) * FID_REGULARIZATION;
        a.cov += &eye;
        b.cov += &eye;
    }
    frechet_distance(&a.mean, &a.cov, &b.mean, &b.cov)
}

fn region_features(set: &[(&RgbImage, &BinaryMask)], feat: &dyn FeatureBackend) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    for (img, mask) in set {
        check_mask_dims(img, mask)?;
        match mask.bbox() {
            Some(b) => out.push(feat.features(&crop(img, &b))?),
            None => log::warn!("skipping a region with an empty mask"),
        }
    }
    Ok(out)
}

/// Fréchet distance between bbox crops of the masked regions of two sets.
pub fn local_fid(
    originals: &[(&RgbImage, &BinaryMask)],
    outputs: &[(&RgbImage, &BinaryMask)],
    feat: &dyn FeatureBackend,
) -> Result<f64> {
    local_fid_from_features(&region_features(originals, feat)?, &region_features(outputs, feat)?)
}

pub fn success_rate(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no evaluation records".into()));
    }
    let mut hits = 0usize;
    for r in records {
        match r.success {
            Some(s) => hits += s as usize,
            None => return Err(Error::contract(format!("record `{}` has no success flag", r.id))),
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Default success protocol: the oracle classifier, run on the bbox crop
/// of the output mask (plus a small margin), must name the caption's
/// category. An empty mask is a failure.
pub fn oracle_success(oracle: &OracleClassifier, output: &RgbImage, mask: &BinaryMask, caption: &str) -> Result<bool> {
    check_mask_dims(output, mask)?;
    let want = category_index(&Vocabulary::normalize(caption)).ok_or_else(|| Error::UnknownCaption(caption.to_string()))?;
    let Some(b) = mask.bbox() else {
        return Ok(false);
    };
    let b = b.expand(CROP_MARGIN_PX, mask.width(), mask.height());
    Ok(oracle.classify(&crop(output, &b)).category == Some(want))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub id: String,
    pub caption: String,
    pub success: bool,
    #[serde(flatten)]
    pub scores: RecordScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method_name: String,
    pub num_records: usize,
    pub success_rate: f64,
    pub mean_lpips: Option<f64>,
    pub mean_judge: Option<f64>,
    pub mean_local_clip: Option<f64>,
    pub local_fid: Option<f64>,
    /// Filled in by [`unified_metric`] once peers are known.
    pub unified: Option<f64>,
    #[serde(default)]
    pub records: Vec<RecordRow>,
}

impl MethodReport {
    /// Axes oriented so that larger is better.
    pub fn axes(&self) -> Option<[f64; 4]> {
        Some([
            -self.mean_lpips?,
            self.mean_judge?,
            self.mean_local_clip?,
            -self.local_fid?,
        ])
    }
}

/// Min-max normalises each axis across methods (a constant axis gives 0.5
/// to everyone), averages the four, and scales by success rate × 100.
pub fn unified_from_axes(axes: &[[f64; 4]], success: &[f64]) -> Result<Vec<f64>> {
    if axes.len() < 2 {
        return Err(Error::contract("the unified metric needs at least two methods"));
    }
    if axes.len() != success.len() {
        return Err(Error::contract("one success rate per method"));
    }
    let mut norm = vec![0.0; axes.len()];
    for k in 0..4 {
        let lo = axes.iter().map(|a| a[k]).fold(f64::INFINITY, f64::min);
        let hi = axes.iter().map(|a| a[k]).fold(f64::NEG_INFINITY, f64::max);
        for (n, a) in norm.iter_mut().zip(axes) {
            *n += if hi > lo { (a[k] - lo) / (hi - lo) } else { 0.5 };
        }
    }
    Ok(norm.iter().zip(success).map(|(n, s)| n / 4.0 * s * 100.0).collect())
}

/// Unified score per report, in input order. Methods with zero success
/// and missing axes score 0 and are left out of the normalisation.
pub fn unified_metric(reports: &[MethodReport]) -> Result<Vec<f64>> {
    let mut axes = Vec::new();
    let mut success = Vec::new();
    let mut slot = Vec::with_capacity(reports.len());
    for r in reports {
        match r.axes() {
            Some(a) => {
                slot.push(Some(axes.len()));
                axes.push(a);
                success.push(r.success_rate);
            }
            None if r.success_rate == 0.0 => slot.push(None),
            None => {
                return Err(Error::contract(format!(
                    "method `{}` is missing an axis score",
                    r.method_name
                )))
            }
        }
    }
    if reports.len() < 2 {
        return Err(Error::contract("the unified metric needs at least two methods"));
    }
    let scores = match axes.len() {
        0 => vec![],
        // A lone scored method is compared only against zero-success peers.
        1 => vec![0.5 * success[0] * 100.0],
        _ => unified_from_axes(&axes, &success)?,
    };
    Ok(slot.iter().map(|s| s.map_or(0.0, |i| scores[i])).collect())
}
