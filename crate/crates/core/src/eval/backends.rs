//! Pluggable scoring backends: perceptual distance, text/image embeddings,
//! distribution features and the location judge.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::write_atomic;
use crate::dataset::scene::category_index;
use crate::error::{Error, Result};
use crate::imaging::{image_digest, png_base64};
use crate::mask::BinaryMask;
use crate::oracle::OracleClassifier;

pub trait PerceptualBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Must satisfy `distance(a, a) == 0`.
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>>;
}

pub trait FeatureBackend: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

pub struct JudgeRequest<'a> {
    pub input: &'a RgbImage,
    pub output: &'a RgbImage,
    pub caption: &'a str,
    pub template: &'a str,
}

impl JudgeRequest<'_> {
    /// Cache key over both images, the caption and the instruction.
    pub fn key(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            image_digest(self.input).as_str(),
            image_digest(self.output).as_str(),
            self.caption,
            self.template,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub trait JudgeBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Raw free-text reply; parsing happens in the metric.
    fn judge(&self, req: &JudgeRequest<'_>) -> Result<String>;
}

pub const DEFAULT_JUDGE_TEMPLATE: &str = "You are shown an image before and after an object was added, and the \
name of the added object. Rate how reasonable the location of the added object is on a scale from 1 to 5, \
where 1 is implausible and 5 is entirely natural. Answer with a line `Rating: <1-5>` followed by a short \
justification.";

pub const JUDGE_TEMPLATE_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Perceptual

/// `1 − MS-SSIM` on luma: SSIM with a 7×7 Gaussian window (σ = 1.5) averaged
/// over up to three dyadic scales, stopping once a side drops below 7 px.
#[derive(Debug, Clone, Copy, Default)]
pub struct SsimDistance;

const SSIM_SCALES: usize = 3;
const SSIM_RADIUS: usize = 3;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luma(img: &RgbImage) -> Plane {
        let (w, h) = img.dimensions();
        let v = img
            .pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        Plane {
            w: w as usize,
            h: h as usize,
            v,
        }
    }

    fn halve(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx, dy| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push((at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) / 4.0);
            }
        }
        Plane { w, h, v }
    }

    fn mul(&self, o: &Plane) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect(),
        }
    }

    /// Separable Gaussian blur with clamped borders.
    fn blur(&self, k: &[f64]) -> Plane {
        let r = k.len() / 2;
        let pass = |src: &[f64], horizontal: bool| {
            let mut out = vec![0.0; src.len()];
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0;
                    for (i, kv) in k.iter().enumerate() {
                        let o = i as isize - r as isize;
                        let (sx, sy) = if horizontal {
                            ((x as isize + o).clamp(0, self.w as isize - 1) as usize, y)
                        } else {
                            (x, (y as isize + o).clamp(0, self.h as isize - 1) as usize)
                        };
                        acc += kv * src[sy * self.w + sx];
                    }
                    out[y * self.w + x] = acc;
                }
            }
            out
        };
        let v = pass(&pass(&self.v, true), false);
        Plane { w: self.w, h: self.h, v }
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn ssim(a: &Plane, b: &Plane, k: &[f64]) -> f64 {
    let (ma, mb) = (a.blur(k), b.blur(k));
    let (saa, sbb, sab) = (a.mul(a).blur(k), b.mul(b).blur(k), a.mul(b).blur(k));
    let n = a.v.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (ma.v[i], mb.v[i]);
        let vx = saa.v[i] - mx * mx;
        let vy = sbb.v[i] - my * my;
        let cxy = sab.v[i] - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    total / n as f64
}

impl SsimDistance {
    pub fn ms_ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
        crate::imaging::check_same_dims(a, b)?;
        if a.width() == 0 || a.height() == 0 {
            return Err(Error::EmptyInput("zero-sized image".into()));
        }
        let k = gaussian_kernel();
        let (mut pa, mut pb) = (Plane::luma(a), Plane::luma(b));
        let mut scores = vec![ssim(&pa, &pb, &k)];
        while scores.len() < SSIM_SCALES && pa.w / 2 > 2 * SSIM_RADIUS && pa.h / 2 > 2 * SSIM_RADIUS {
            pa = pa.halve();
            pb = pb.halve();
            scores.push(ssim(&pa, &pb, &k));
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

impl PerceptualBackend for SsimDistance {
    fn name(&self) -> &str {
        "ms-ssim"
    }

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        Ok((1.0 - Self::ms_ssim(a, b)?).max(0.0))
    }
}

// ---------------------------------------------------------------------------
// Oracle-backed fallbacks

/// Text embeddings are category prototypes, image embeddings are centred
/// crop features from the oracle classifier.
#[derive(Debug, Clone, Copy)]
pub struct OracleEmbedding {
    oracle: &'static OracleClassifier,
}

impl Default for OracleEmbedding {
    fn default() -> Self {
        Self {
            oracle: OracleClassifier::shared(),
        }
    }
}

impl EmbeddingBackend for OracleEmbedding {
    fn name(&self) -> &str {
        "oracle-embedding"
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let idx = category_index(&crate::diffusion::Vocabulary::normalize(text))
            .ok_or_else(|| Error::UnknownCaption(text.to_string()))?;
        Ok(self.oracle.embed_category(idx))
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        Ok(self.oracle.embed_image(image))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OracleFeatures {
    oracle: &'static OracleClassifier,
}

impl Default for OracleFeatures {
    fn default() -> Self {
        Self {
            oracle: OracleClassifier::shared(),
        }
    }
}

impl FeatureBackend for OracleFeatures {
    fn name(&self) -> &str {
        "oracle-features"
    }

    fn features(&self, image: &RgbImage) -> Result<Vec<f64>> {
        Ok(self.oracle.raw_features(image).into_iter().map(f64::from).collect())
    }
}

/// Offline stand-in for a vision-language judge. It locates the changed
/// region and rates it by how compact it is and whether it rests on
/// something: a region whose bottom edge sits on a horizontal colour
/// boundary scores higher than one floating in a flat area.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicJudge {
    /// Per-channel difference that counts as a change.
    pub tolerance: u8,
}

impl Default for HeuristicJudge {
    fn default() -> Self {
        Self { tolerance: 24 }
    }
}

impl HeuristicJudge {
    fn changed(&self, a: &RgbImage, b: &RgbImage) -> BinaryMask {
        BinaryMask::from_fn(a.width() as usize, a.height() as usize, |x, y| {
            let (p, q) = (a.get_pixel(x as u32, y as u32), b.get_pixel(x as u32, y as u32));
            (0..3).any(|c| p[c].abs_diff(q[c]) > self.tolerance)
        })
    }
}

impl JudgeBackend for HeuristicJudge {
    fn name(&self) -> &str {
        "heuristic-judge"
    }

    fn judge(&self, req: &JudgeRequest<'_>) -> Result<String> {
        crate::imaging::check_same_dims(req.input, req.output)?;
        let changed = self.changed(req.input, req.output);
        let Some(bbox) = changed.bbox() else {
            return Ok("Rating: 1 - nothing was added".into());
        };
        let main = changed.largest_component();
        let compact = main.area() as f64 / changed.area() as f64;
        let fill = main.area() as f64 / bbox.area() as f64;
        // Colour step just below the region in the input image.
        let (w, h) = req.input.dimensions();
        let below = (bbox.y + bbox.h).min(h as usize - 1) as u32;
        let above = below.saturating_sub(2);
        let mut step = 0.0;
        for x in bbox.x..bbox.x + bbox.w {
            let (p, q) = (req.input.get_pixel(x as u32, above), req.input.get_pixel(x as u32, below));
            step += (0..3).map(|c| p[c].abs_diff(q[c]) as f64).sum::<f64>() / 3.0;
        }
        let step = (step / bbox.w as f64 / 64.0).min(1.0);
        let grounded = if bbox.y + bbox.h >= h as usize - 1 { 0.5 } else { step };
        let too_big = (bbox.area() as f64 / (w as f64 * h as f64) > 0.6) as u8 as f64;
        let score = 0.4 * compact + 0.2 * fill + 0.4 * grounded - 0.5 * too_big;
        let rating = (1.0 + 4.0 * score.clamp(0.0, 1.0)).round() as u32;
        Ok(format!(
            "Rating: {rating} - compactness {compact:.2}, fill {fill:.2}, support contrast {grounded:.2}"
        ))
    }
}

// ---------------------------------------------------------------------------
// HTTP clients

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    /// Name of an environment variable holding a bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_timeout_s() -> u64 {
    60
}

struct HttpClient {
    cfg: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpClient {
    fn new(cfg: HttpBackendConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build();
        Self { cfg, agent }
    }

    fn post<R: serde::de::DeserializeOwned>(&self, body: &serde_json::Value, backend: &str) -> Result<R> {
        let token = match &self.cfg.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| Error::Config(format!("{backend}: ${var} is not set")))?),
            None => None,
        };
        crate::http::post_json(&self.agent, &self.cfg.endpoint, body, token.as_deref(), backend)
    }
}

fn b64(img: &RgbImage) -> Result<String> {
    png_base64(&DynamicImage::ImageRgb8(img.clone()))
}

/// `{"a", "b"}` base64 PNGs → `{"distance"}`.
pub struct HttpPerceptual(HttpClient);

impl HttpPerceptual {
    pub fn new(cfg: HttpBackendConfig) -> Self {
        Self(HttpClient::new(cfg))
    }
}

impl PerceptualBackend for HttpPerceptual {
    fn name(&self) -> &str {
        "http-perceptual"
    }

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        #[derive(Deserialize)]
        struct Reply {
            distance: f64,
        }
        let r: Reply = self.0.post(&serde_json::json!({ "a": b64(a)?, "b": b64(b)? }), self.name())?;
        Ok(r.distance)
    }
}

/// `{"text"}` or `{"image"}` → `{"embedding": [..]}`.
pub struct HttpEmbedding(HttpClient);

impl HttpEmbedding {
    pub fn new(cfg: HttpBackendConfig) -> Self {
        Self(HttpClient::new(cfg))
    }
}

#[derive(Deserialize)]
struct EmbeddingReply {
    embedding: Vec<f32>,
}

impl EmbeddingBackend for HttpEmbedding {
    fn name(&self) -> &str {
        "http-embedding"
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let r: EmbeddingReply = self.0.post(&serde_json::json!({ "text": text }), self.name())?;
        Ok(r.embedding)
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let r: EmbeddingReply = self.0.post(&serde_json::json!({ "image": b64(image)? }), self.name())?;
        Ok(r.embedding)
    }
}

/// `{"image"}` → `{"features": [..]}`.
pub struct HttpFeatures(HttpClient);

impl HttpFeatures {
    pub fn new(cfg: HttpBackendConfig) -> Self {
        Self(HttpClient::new(cfg))
    }
}

impl FeatureBackend for HttpFeatures {
    fn name(&self) -> &str {
        "http-features"
    }

    fn features(&self, image: &RgbImage) -> Result<Vec<f64>> {
        #[derive(Deserialize)]
        struct Reply {
            features: Vec<f64>,
        }
        let r: Reply = self.0.post(&serde_json::json!({ "image": b64(image)? }), self.name())?;
        Ok(r.features)
    }
}

/// `{"input", "output", "caption", "instruction"}` → `{"response"}`.
/// At most `max_concurrent` requests are in flight at once.
pub struct HttpJudge {
    client: HttpClient,
    gate: Semaphore,
}

impl HttpJudge {
    pub fn new(cfg: HttpBackendConfig, max_concurrent: usize) -> Self {
        Self {
            client: HttpClient::new(cfg),
            gate: Semaphore::new(max_concurrent.max(1)),
        }
    }
}

impl JudgeBackend for HttpJudge {
    fn name(&self) -> &str {
        "http-judge"
    }

    fn judge(&self, req: &JudgeRequest<'_>) -> Result<String> {
        #[derive(Deserialize)]
        struct Reply {
            response: String,
        }
        let body = serde_json::json!({
            "input": b64(req.input)?,
            "output": b64(req.output)?,
            "caption": req.caption,
            "instruction": req.template,
        });
        let _permit = self.gate.acquire();
        log::info!("judge request {} caption={:?}", &req.key()[..12], req.caption);
        let r: Reply = self.client.post(&body, self.name())?;
        log::info!("judge response {}: {:?}", &req.key()[..12], r.response);
        Ok(r.response)
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Persists judge replies under `dir/<request key>.txt`. Only replies that
/// parse as a valid rating are stored, so a malformed answer is asked again.
pub struct CachedJudge<J> {
    inner: J,
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
}

impl<J: JudgeBackend> CachedJudge<J> {
    pub fn new(inner: J, dir: Option<PathBuf>) -> Self {
        Self {
            inner,
            dir,
            memory: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &J {
        &self.inner
    }
}

impl<J: JudgeBackend> JudgeBackend for CachedJudge<J> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn judge(&self, req: &JudgeRequest<'_>) -> Result<String> {
        let key = req.key();
        if let Some(hit) = self.memory.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        if let Some(dir) = &self.dir {
            if let Ok(text) = std::fs::read_to_string(dir.join(format!("{key}.txt"))) {
                self.memory.lock().unwrap().insert(key, text.clone());
                return Ok(text);
            }
        }
        let reply = self.inner.judge(req)?;
        if super::metrics::parse_rating(&reply).is_ok() {
            if let Some(dir) = &self.dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_atomic(dir.join(format!("{key}.txt")), reply.as_bytes())?;
            }
            self.memory.lock().unwrap().insert(key, reply.clone());
        }
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn noise(seed: u32) -> RgbImage {
        RgbImage::from_fn(32, 32, |x, y| {
            let v = (x.wrapping_mul(73) ^ y.wrapping_mul(151) ^ seed.wrapping_mul(97)) as u8;
            Rgb([v, v.wrapping_add(40), v / 2])
        })
    }

    #[test]
    fn ssim_distance_is_zero_on_identity_and_grows_with_change() {
        let a = noise(1);
        assert_eq!(SsimDistance.distance(&a, &a).unwrap(), 0.0);
        assert!((SsimDistance::ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        for x in 0..8 {
            b.put_pixel(x, 3, Rgb([255, 255, 255]));
        }
        let small = SsimDistance.distance(&a, &b).unwrap();
        let large = SsimDistance.distance(&a, &noise(9)).unwrap();
        assert!(small > 0.0 && small < large, "{small} {large}");
    }

    #[test]
    fn ssim_rejects_mismatched_dims() {
        assert!(matches!(
            SsimDistance.distance(&noise(1), &RgbImage::new(8, 8)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn oracle_embedding_maps_caption_to_prototype() {
        let e = OracleEmbedding::default();
        let v = e.embed_text("a mug").unwrap();
        assert_eq!(v, OracleClassifier::shared().embed_category(category_index("mug").unwrap()));
        assert!(matches!(e.embed_text("zebra"), Err(Error::UnknownCaption(_))));
    }

    #[test]
    fn heuristic_judge_reply_parses() {
        let a = RgbImage::from_pixel(32, 32, Rgb([200, 200, 200]));
        let mut b = a.clone();
        for y in 10..16 {
            for x in 10..16 {
                b.put_pixel(x, y, Rgb([255, 0, 0]));
            }
        }
        let req = JudgeRequest {
            input: &a,
            output: &b,
            caption: "apple",
            template: DEFAULT_JUDGE_TEMPLATE,
        };
        let r = HeuristicJudge::default().judge(&req).unwrap();
        let (rating, _) = super::super::metrics::parse_rating(&r).unwrap();
        assert!((1..=5).contains(&rating));
        let none = JudgeRequest { output: &a, ..req };
        assert!(HeuristicJudge::default().judge(&none).unwrap().starts_with("Rating: 1"));
    }

    struct Counting {
        calls: AtomicUsize,
        reply: &'static str,
    }

    impl JudgeBackend for Counting {
        fn name(&self) -> &str {
            "counting"
        }

        fn judge(&self, _: &JudgeRequest<'_>) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.reply.into())
        }
    }

    #[test]
    fn cache_persists_valid_replies_only() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (noise(1), noise(2));
        let req = JudgeRequest {
            input: &a,
            output: &b,
            caption: "kite",
            template: "T",
        };
        let good = CachedJudge::new(
            Counting {
                calls: AtomicUsize::new(0),
                reply: "Rating: 3 - fine",
            },
            Some(dir.path().to_path_buf()),
        );
        good.judge(&req).unwrap();
        good.judge(&req).unwrap();
        assert_eq!(good.inner().calls.load(Ordering::SeqCst), 1);
        // A fresh client reads the persisted reply.
        let again = CachedJudge::new(
            Counting {
                calls: AtomicUsize::new(0),
                reply: "garbage",
            },
            Some(dir.path().to_path_buf()),
        );
        assert_eq!(again.judge(&req).unwrap(), "Rating: 3 - fine");
        assert_eq!(again.inner().calls.load(Ordering::SeqCst), 0);

        let bad = CachedJudge::new(
            Counting {
                calls: AtomicUsize::new(0),
                reply: "7",
            },
            None,
        );
        bad.judge(&req).unwrap();
        bad.judge(&req).unwrap();
        assert_eq!(bad.inner().calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn request_key_depends_on_every_part() {
        let (a, b) = (noise(1), noise(2));
        let base = JudgeRequest {
            input: &a,
            output: &b,
            caption: "kite",
            template: "T",
        };
        let k = base.key();
        assert_ne!(k, JudgeRequest { caption: "mug", ..base }.key());
        assert_ne!(k, JudgeRequest { template: "U", ..base }.key());
        assert_ne!(k, JudgeRequest { output: &a, ..base }.key());
    }
}
