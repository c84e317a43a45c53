//! Object removal behind a pluggable inpainting backend.

use std::collections::HashMap;
use std::time::Duration;

use image::{DynamicImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{check_mask_dims, decode_base64_image, png_base64};
use crate::mask::BinaryMask;

pub const DEFAULT_DILATION_PX: usize = 3;

/// What a backend is asked to fill: `region` is the already-dilated mask.
pub struct RemovalRequest<'a> {
    pub image: &'a RgbImage,
    pub region: &'a BinaryMask,
    pub instance_id: u64,
}

pub trait InpaintBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Returns a full-size image; only pixels inside `region` are used.
    fn inpaint(&self, req: &RemovalRequest<'_>) -> Result<RgbImage>;
}

/// Replaces the dilated mask with backend content and leaves every other
/// pixel untouched.
pub fn remove_object(
    image: &RgbImage,
    mask: &BinaryMask,
    instance_id: u64,
    backend: &dyn InpaintBackend,
    dilation_px: usize,
) -> Result<RgbImage> {
    check_mask_dims(image, mask)?;
    if mask.is_empty() {
        return Ok(image.clone());
    }
    let region = mask.dilate(dilation_px);
    let filled = backend.inpaint(&RemovalRequest {
        image,
        region: &region,
        instance_id,
    })?;
    if filled.dimensions() != image.dimensions() {
        return Err(Error::Backend {
            backend: backend.name().to_string(),
            retryable: false,
            message: format!(
                "returned {:?}, expected {:?}",
                filled.dimensions(),
                image.dimensions()
            ),
        });
    }
    let mut out = image.clone();
    for (x, y) in region.pixels() {
        out.put_pixel(x as u32, y as u32, *filled.get_pixel(x as u32, y as u32));
    }
    Ok(out)
}

/// Ground-truth removal for generated scenes: a pre-rendered image of the
/// scene without each instance.
#[derive(Default)]
pub struct ExactRemoval {
    renders: HashMap<u64, RgbImage>,
}

impl ExactRemoval {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, instance_id: u64, without: RgbImage) {
        self.renders.insert(instance_id, without);
    }
}

impl InpaintBackend for ExactRemoval {
    fn name(&self) -> &str {
        "exact-render"
    }

    fn inpaint(&self, req: &RemovalRequest<'_>) -> Result<RgbImage> {
        self.renders.get(&req.instance_id).cloned().ok_or_else(|| Error::Backend {
            backend: self.name().into(),
            retryable: false,
            message: format!("no render for instance {}", req.instance_id),
        })
    }
}

/// Fills the region with the mean color of a thin ring around it.
pub struct MeanFill {
    pub ring_px: usize,
}

impl Default for MeanFill {
    fn default() -> Self {
        Self { ring_px: 2 }
    }
}

impl InpaintBackend for MeanFill {
    fn name(&self) -> &str {
        "mean-fill"
    }

    fn inpaint(&self, req: &RemovalRequest<'_>) -> Result<RgbImage> {
        let ring = req.region.dilate(self.ring_px.max(1));
        let mut sum = [0u64; 3];
        let mut n = 0u64;
        for (x, y) in ring.pixels().filter(|&(x, y)| !req.region.get(x, y)) {
            let p = req.image.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                sum[c] += p[c] as u64;
            }
            n += 1;
        }
        if n == 0 {
            for p in req.image.pixels() {
                for c in 0..3 {
                    sum[c] += p[c] as u64;
                }
            }
            n = req.image.pixels().len() as u64;
        }
        let mean = Rgb(sum.map(|s| ((s as f64 / n as f64).round()) as u8));
        let mut out = req.image.clone();
        for (x, y) in req.region.pixels() {
            out.put_pixel(x as u32, y as u32, mean);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpInpaintConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_timeout_s() -> u64 {
    120
}

/// Client for an external inpainting service. Request body:
/// `{"image": <base64 png>, "mask": <base64 png>}`; response:
/// `{"image": <base64 png>}`.
pub struct HttpInpaint {
    cfg: HttpInpaintConfig,
    agent: ureq::Agent,
}

impl HttpInpaint {
    pub fn new(cfg: HttpInpaintConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build();
        Self { cfg, agent }
    }
}

#[derive(Deserialize)]
struct InpaintReply {
    image: String,
}

impl InpaintBackend for HttpInpaint {
    fn name(&self) -> &str {
        "http-inpaint"
    }

    fn inpaint(&self, req: &RemovalRequest<'_>) -> Result<RgbImage> {
        let body = serde_json::json!({
            "image": png_base64(&DynamicImage::ImageRgb8(req.image.clone()))?,
            "mask": png_base64(&DynamicImage::ImageLuma8(req.region.to_image()))?,
        });
        let reply: InpaintReply = crate::http::post_json(&self.agent, &self.cfg.endpoint, &body, None, self.name())?;
        Ok(decode_base64_image(&reply.image)?.to_rgb8())
    }
}
