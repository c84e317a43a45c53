//! Deterministic category classifier for generated scenes.
//!
//! It stands in for a learned text-image model at desk scale: foreground is
//! found by saturation (objects are saturated, backgrounds muted), and a
//! crop is described by its foreground hue and a coarse occupancy grid.
//! Prototypes come from rendering each category in isolation, so the
//! classifier is a pure function of the vocabulary.

use std::sync::OnceLock;

use image::{Rgb, RgbImage};

use crate::dataset::scene::{render_excluding, ObjectPlacement, SceneSpec, CATEGORIES};
use crate::imaging::rgb_to_hsv;
use crate::mask::BinaryMask;

const GRID: usize = 5;
/// hue (cos, sin) + occupancy grid + log aspect + coverage.
pub const FEATURE_DIM: usize = 2 + GRID * GRID + 2;
const HUE_WEIGHT: f32 = 2.0;
const MIN_FOREGROUND_PX: usize = 6;
const TEMPERATURE: f32 = 0.25;

pub fn is_foreground(p: Rgb<u8>) -> bool {
    let (_, s, v) = rgb_to_hsv(p);
    s >= 0.5 && v >= 0.35
}

/// Largest 8-connected saturated blob in the crop.
pub fn foreground(img: &RgbImage) -> BinaryMask {
    BinaryMask::from_fn(img.width() as usize, img.height() as usize, |x, y| {
        is_foreground(*img.get_pixel(x as u32, y as u32))
    })
    .largest_component()
}

/// Feature vector of a crop, `None` when it holds no object-like blob.
pub fn features(img: &RgbImage) -> Option<Vec<f32>> {
    let fg = foreground(img);
    let area = fg.area();
    if area < MIN_FOREGROUND_PX {
        return None;
    }
    let (mut cs, mut sn) = (0.0f32, 0.0f32);
    for (x, y) in fg.pixels() {
        let (h, _, _) = rgb_to_hsv(*img.get_pixel(x as u32, y as u32));
        let r = h.to_radians();
        cs += r.cos();
        sn += r.sin();
    }
    let norm = (cs * cs + sn * sn).sqrt().max(1e-6);
    let bb = fg.bbox()?;
    let mut grid = [0f32; GRID * GRID];
    let mut counts = [0f32; GRID * GRID];
    for y in bb.y..bb.y + bb.h {
        for x in bb.x..bb.x + bb.w {
            let gx = ((x - bb.x) * GRID) / bb.w;
            let gy = ((y - bb.y) * GRID) / bb.h;
            counts[gy * GRID + gx] += 1.0;
            grid[gy * GRID + gx] += fg.get(x, y) as u8 as f32;
        }
    }
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.push(HUE_WEIGHT * cs / norm);
    f.push(HUE_WEIGHT * sn / norm);
    f.extend(grid.iter().zip(&counts).map(|(g, c)| if *c > 0.0 { g / c } else { 0.0 }));
    f.push((bb.w as f32 / bb.h as f32).ln());
    f.push(area as f32 / bb.area() as f32);
    Some(f)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct OracleClassifier {
    prototypes: Vec<Vec<f32>>,
    center: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `None` when no foreground object was found.
    pub category: Option<usize>,
    pub probabilities: Vec<f32>,
}

impl OracleClassifier {
    /// Shared instance; prototypes are rendered once per process.
    pub fn shared() -> &'static OracleClassifier {
        static SHARED: OnceLock<OracleClassifier> = OnceLock::new();
        SHARED.get_or_init(OracleClassifier::from_renders)
    }

    /// Averages crop features over each category rendered alone at a few
    /// scales on a plain support.
    pub fn from_renders() -> Self {
        let mut prototypes = Vec::with_capacity(CATEGORIES.len());
        for cat in CATEGORIES.iter() {
            let mut acc = vec![0f32; FEATURE_DIM];
            let scales = [6.5f32, 7.5, 8.5, 9.5];
            for &scale in &scales {
                let spec = SceneSpec {
                    background_id: 0,
                    supports: vec![],
                    object_placements: vec![ObjectPlacement {
                        category: cat.name.into(),
                        position: (16.0, 16.0),
                        scale,
                        rotation: 0.0,
                        z_order: 0,
                    }],
                    image_size: (32, 32),
                    rng_seed: 0,
                };
                let (img, _) = render_excluding(&spec, &[]).expect("prototype scene is valid");
                let f = features(&img).expect("prototype has foreground");
                for (a, v) in acc.iter_mut().zip(f) {
                    *a += v / scales.len() as f32;
                }
            }
            prototypes.push(acc);
        }
        let mut center = vec![0f32; FEATURE_DIM];
        for p in &prototypes {
            for (c, v) in center.iter_mut().zip(p) {
                *c += v / prototypes.len() as f32;
            }
        }
        Self { prototypes, center }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn classify(&self, crop: &RgbImage) -> Prediction {
        match features(crop) {
            None => Prediction {
                category: None,
                probabilities: vec![0.0; self.num_classes()],
            },
            Some(f) => {
                let logits: Vec<f32> = self.prototypes.iter().map(|p| -sq_dist(&f, p) / TEMPERATURE).collect();
                let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exp: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f32 = exp.iter().sum();
                let probabilities: Vec<f32> = exp.iter().map(|e| e / z).collect();
                let category = probabilities
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i);
                Prediction { category, probabilities }
            }
        }
    }

    /// Centred feature embedding of a crop; zero vector when empty.
    pub fn embed_image(&self, crop: &RgbImage) -> Vec<f32> {
        match features(crop) {
            Some(f) => f.iter().zip(&self.center).map(|(v, c)| v - c).collect(),
            None => vec![0.0; FEATURE_DIM],
        }
    }

    /// Centred prototype of a category.
    pub fn embed_category(&self, index: usize) -> Vec<f32> {
        self.prototypes[index].iter().zip(&self.center).map(|(v, c)| v - c).collect()
    }

    /// Raw (uncentred) features for distribution statistics.
    pub fn raw_features(&self, crop: &RgbImage) -> Vec<f32> {
        features(crop).unwrap_or_else(|| vec![0.0; FEATURE_DIM])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_scene;
    use crate::imaging::crop;

    #[test]
    fn classifies_every_category_in_tabletop_scenes() {
        let oracle = OracleClassifier::shared();
        let mut total = 0;
        let mut correct = 0;
        for seed in 0..60 {
            let spec = SceneSpec::tabletop(seed, (64, 64), 3);
            let (img, inst) = synth_scene(&spec).unwrap();
            for rec in &inst {
                let c = crop(&img, &rec.bbox.expand(2, 64, 64));
                let pred = oracle.classify(&c);
                total += 1;
                correct += (pred.category == crate::dataset::scene::category_index(&rec.category_name)) as usize;
            }
        }
        assert_eq!(correct, total);
    }

    #[test]
    fn empty_crop_has_no_category() {
        let img = RgbImage::from_pixel(10, 10, Rgb([120, 110, 100]));
        let p = OracleClassifier::shared().classify(&img);
        assert_eq!(p.category, None);
        assert!(p.probabilities.iter().all(|&v| v == 0.0));
    }
}
