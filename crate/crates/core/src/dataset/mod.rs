//! Dataset construction: `(image without object, caption) → (image with
//! object, mask)` tuples from instance-segmentation sources or from
//! procedurally generated scenes.

pub mod coco;
pub mod filters;
pub mod pipeline;
pub mod removal;
pub mod scene;
pub mod similarity;
pub mod store;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::check_same_dims;
use crate::mask::{BBox, BinaryMask};

pub use filters::FilterConfig;
pub use pipeline::{build_dataset, DatasetConfig, DatasetManifest, StageCounts};
pub use scene::{synth_scene, SceneSpec, CATEGORIES};
pub use store::{load_dataset, DatasetDir};

/// One annotated object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub instance_id: u64,
    pub category_name: String,
    pub mask: BinaryMask,
    /// Tight box of `mask`; zero-sized for an empty mask.
    pub bbox: BBox,
    pub area: usize,
    pub image_id: u64,
}

impl InstanceRecord {
    /// Derives `bbox` and `area` from the mask so the record invariants hold
    /// by construction.
    pub fn new(instance_id: u64, image_id: u64, category_name: &str, mask: BinaryMask) -> Self {
        let bbox = mask.bbox().unwrap_or(BBox { x: 0, y: 0, w: 0, h: 0 });
        let area = mask.area();
        Self {
            instance_id,
            category_name: category_name.to_string(),
            mask,
            bbox,
            area,
            image_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RealPipeline,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceIds {
    pub image_id: u64,
    pub instance_id: u64,
}

/// One dataset record: the inpainted input, its caption, the original
/// image as target, and the object mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub input_image: RgbImage,
    pub caption: String,
    pub target_image: RgbImage,
    pub mask: BinaryMask,
    pub provenance: Provenance,
    pub source_ids: SourceIds,
}

impl TrainingTuple {
    /// Checks the structural invariants: equal dimensions, nonempty mask,
    /// and input/target agreement outside the mask dilated by
    /// `dilation_px` (zero for synthetic provenance).
    pub fn validate(&self, dilation_px: usize) -> Result<()> {
        check_same_dims(&self.input_image, &self.target_image)?;
        crate::imaging::check_mask_dims(&self.input_image, &self.mask)?;
        if self.mask.is_empty() {
            return Err(Error::contract("training tuple has an empty mask"));
        }
        let allowed = match self.provenance {
            Provenance::Synthetic => self.mask.clone(),
            Provenance::RealPipeline => self.mask.dilate(dilation_px),
        };
        for (x, y, p) in self.input_image.enumerate_pixels() {
            if !allowed.get(x as usize, y as usize) && p != self.target_image.get_pixel(x, y) {
                return Err(Error::contract(format!(
                    "input and target differ at ({x},{y}) outside the allowed region"
                )));
            }
        }
        Ok(())
    }
}
