//! Instance-level filters applied before object removal.

use serde::{Deserialize, Serialize};

use crate::dataset::InstanceRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    pub max_aspect_ratio: f64,
    pub edge_margin_px: usize,
    pub occlusion_iou_threshold: f64,
    pub hole_area_threshold_px: usize,
    pub similarity_reject_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_area_fraction: 0.02,
            max_area_fraction: 0.5,
            max_aspect_ratio: 5.0,
            edge_margin_px: 2,
            occlusion_iou_threshold: 0.3,
            hole_area_threshold_px: 16,
            similarity_reject_threshold: 0.5,
        }
    }
}

impl FilterConfig {
    /// A configuration under which every well-formed instance passes.
    pub fn pass_through() -> Self {
        Self {
            min_area_fraction: f64::MIN_POSITIVE,
            max_area_fraction: 1.0,
            max_aspect_ratio: f64::INFINITY,
            edge_margin_px: 0,
            occlusion_iou_threshold: 1.0,
            hole_area_threshold_px: usize::MAX,
            similarity_reject_threshold: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.min_area_fraction
            && self.min_area_fraction < self.max_area_fraction
            && self.max_area_fraction <= 1.0
            && self.max_aspect_ratio >= 1.0
            && (0.0..=1.0).contains(&self.occlusion_iou_threshold);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid filter configuration: {self:?}")))
        }
    }
}

/// Accepts iff `min ≤ area / image_area ≤ max`. Zero-area instances are
/// always rejected.
pub fn filter_size(inst: &InstanceRecord, image_area: usize, cfg: &FilterConfig) -> bool {
    if image_area == 0 || inst.area == 0 {
        return false;
    }
    let frac = inst.area as f64 / image_area as f64;
    cfg.min_area_fraction <= frac && frac <= cfg.max_area_fraction
}

/// Rejects instances with a mask pixel closer than `edge_margin_px` to the
/// image border (likely truncated by the frame).
pub fn filter_integrity(inst: &InstanceRecord, image_size: (usize, usize), cfg: &FilterConfig) -> Result<bool> {
    let (h, w) = image_size;
    if inst.mask.dims() != (w, h) {
        return Err(Error::contract(format!(
            "mask {:?} does not match image {w}x{h}",
            inst.mask.dims()
        )));
    }
    let m = cfg.edge_margin_px;
    Ok(inst
        .mask
        .pixels()
        .all(|(x, y)| x.min(y).min(w - 1 - x).min(h - 1 - y) >= m))
}

/// Per-instance occlusion decision. An instance is rejected when it has an
/// interior hole larger than `hole_area_threshold_px`, or when another
/// instance's box overlaps its box above `occlusion_iou_threshold` and that
/// instance's mask reaches into its box.
pub fn filter_occlusion(instances: &[InstanceRecord], cfg: &FilterConfig) -> Result<Vec<bool>> {
    if let Some(first) = instances.first() {
        if let Some(bad) = instances.iter().find(|i| i.mask.dims() != first.mask.dims()) {
            return Err(Error::contract(format!(
                "instance {} has mask {:?}, expected {:?}",
                bad.instance_id,
                bad.mask.dims(),
                first.mask.dims()
            )));
        }
    }
    Ok(instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let has_cavity = inst
                .mask
                .hole_areas()
                .first()
                .is_some_and(|&a| a > cfg.hole_area_threshold_px);
            let covered = instances.iter().enumerate().any(|(j, other)| {
                j != i
                    && inst.area > 0
                    && other.area > 0
                    && inst.bbox.iou(&other.bbox) > cfg.occlusion_iou_threshold
                    && other.mask.any_in(&inst.bbox)
            });
            !has_cavity && !covered
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AspectDecision {
    Accept,
    Reject,
    /// Zero-extent box.
    Degenerate,
}

impl AspectDecision {
    pub fn accepted(self) -> bool {
        self == AspectDecision::Accept
    }
}

/// Accepts iff `max(w/h, h/w) ≤ max_aspect_ratio` (inclusive).
pub fn filter_aspect_ratio(inst: &InstanceRecord, cfg: &FilterConfig) -> AspectDecision {
    let (w, h) = (inst.bbox.w as f64, inst.bbox.h as f64);
    if w == 0.0 || h == 0.0 {
        return AspectDecision::Degenerate;
    }
    if (w / h).max(h / w) <= cfg.max_aspect_ratio {
        AspectDecision::Accept
    } else {
        AspectDecision::Reject
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> InstanceRecord {
        let m = BinaryMask::from_fn(w, h, |x, y| (x0..x0 + rw).contains(&x) && (y0..y0 + rh).contains(&y));
        InstanceRecord::new(0, 0, "thing", m)
    }

    #[test]
    fn size_examples() {
        let cfg = FilterConfig::default();
        assert!(!filter_size(&InstanceRecord::new(0, 0, "x", BinaryMask::new(100, 100)), 10_000, &cfg));
        assert!(!filter_size(&rect(100, 100, 0, 0, 100, 100), 10_000, &cfg));
        assert!(filter_size(&rect(100, 100, 10, 10, 50, 10), 10_000, &cfg));
    }

    #[test]
    fn integrity_examples() {
        let cfg = FilterConfig { edge_margin_px: 5, ..Default::default() };
        assert!(!filter_integrity(&rect(40, 40, 10, 0, 5, 5), (40, 40), &cfg).unwrap());
        assert!(filter_integrity(&rect(40, 40, 10, 10, 20, 20), (40, 40), &cfg).unwrap());
        // Closest pixel exactly 5 px from the left border: accepted.
        assert!(filter_integrity(&rect(40, 40, 5, 10, 3, 3), (40, 40), &cfg).unwrap());
        assert!(!filter_integrity(&rect(40, 40, 4, 10, 3, 3), (40, 40), &cfg).unwrap());
        assert!(filter_integrity(&rect(40, 40, 4, 10, 3, 3), (30, 40), &cfg).is_err());
    }

    #[test]
    fn occlusion_examples() {
        let cfg = FilterConfig::default();
        let a = rect(32, 32, 4, 4, 8, 8);
        let b = rect(32, 32, 4, 4, 8, 8);
        assert_eq!(filter_occlusion(&[a.clone(), b], &cfg).unwrap(), vec![false, false]);
        let c = rect(32, 32, 20, 20, 6, 6);
        assert_eq!(filter_occlusion(&[a.clone(), c], &cfg).unwrap(), vec![true, true]);
        let mut ring = BinaryMask::from_fn(32, 32, |x, y| (5..27).contains(&x) && (5..27).contains(&y));
        for y in 10..20 {
            for x in 10..20 {
                ring.set(x, y, false);
            }
        }
        let holed = InstanceRecord::new(1, 0, "ring", ring);
        assert_eq!(filter_occlusion(&[holed], &cfg).unwrap(), vec![false]);
        let other = InstanceRecord::new(2, 0, "x", BinaryMask::new(16, 16));
        assert!(filter_occlusion(&[a, other], &cfg).is_err());
    }

    #[test]
    fn aspect_examples() {
        let cfg = FilterConfig::default();
        assert_eq!(filter_aspect_ratio(&rect(200, 200, 0, 0, 30, 30), &cfg), AspectDecision::Accept);
        assert_eq!(filter_aspect_ratio(&rect(200, 200, 0, 0, 100, 10), &cfg), AspectDecision::Reject);
        assert_eq!(filter_aspect_ratio(&rect(200, 200, 0, 0, 50, 10), &cfg), AspectDecision::Accept);
        let empty = InstanceRecord::new(0, 0, "x", BinaryMask::new(8, 8));
        assert_eq!(filter_aspect_ratio(&empty, &cfg), AspectDecision::Degenerate);
    }

    #[test]
    fn default_config_is_valid() {
        FilterConfig::default().validate().unwrap();
        assert!(FilterConfig { min_area_fraction: 0.6, ..Default::default() }.validate().is_err());
    }
}
