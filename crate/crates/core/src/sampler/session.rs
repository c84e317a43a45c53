//! Iterative editing sessions and their on-disk replay log.
//!
//! ```text
//! <dir>/session.json
//! <dir>/base.png
//! <dir>/current.png
//! <dir>/rounds/000/{result.png, mask.png, blended.png}
//! ```

use std::path::Path;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{blend, sample, GuidanceConfig};
use crate::config::write_atomic;
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::imaging::{encode_png, image_digest, load_gray, load_rgb};
use crate::mask::BinaryMask;

pub const SESSION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EditRound {
    pub caption: String,
    /// Settings the round was sampled with; `guidance.seed` pins the noise.
    pub guidance: GuidanceConfig,
    pub result: RgbImage,
    pub mask: BinaryMask,
    pub blended: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSession {
    pub base_image: RgbImage,
    pub history: Vec<EditRound>,
    pub current: RgbImage,
}

impl EditSession {
    pub fn new(base_image: RgbImage) -> Self {
        Self {
            current: base_image.clone(),
            base_image,
            history: Vec::new(),
        }
    }

    /// Appends a round, compositing its result into the current image.
    pub fn commit(&mut self, caption: &str, guidance: GuidanceConfig, result: RgbImage, mask: BinaryMask) -> Result<&EditRound> {
        let blended = blend(&self.current, &result, &mask)?;
        self.current = blended.clone();
        self.history.push(EditRound {
            caption: caption.to_string(),
            guidance,
            result,
            mask,
            blended,
        });
        Ok(self.history.last().unwrap())
    }

    /// Union of all committed masks; empty for a fresh session.
    pub fn union_mask(&self) -> BinaryMask {
        let (w, h) = self.base_image.dimensions();
        let mut acc = BinaryMask::new(w as usize, h as usize);
        for r in &self.history {
            acc = acc.union(&r.mask).expect("round masks match the image");
        }
        acc
    }

    /// Writes the session log and image snapshots into `dir`.
    pub fn save(&self, dir: &Path, session_id: &str, checkpoint_hash: Option<&str>) -> Result<SessionLog> {
        let write_png = |rel: &str, bytes: Vec<u8>| -> Result<()> {
            let p = dir.join(rel);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_atomic(&p, &bytes)
        };
        write_png("base.png", encode_png(&DynamicImage::ImageRgb8(self.base_image.clone()))?)?;
        let mut rounds = Vec::with_capacity(self.history.len());
        for (i, r) in self.history.iter().enumerate() {
            let stem = format!("rounds/{i:03}");
            write_png(&format!("{stem}/result.png"), encode_png(&DynamicImage::ImageRgb8(r.result.clone()))?)?;
            write_png(&format!("{stem}/mask.png"), encode_png(&DynamicImage::ImageLuma8(r.mask.to_image()))?)?;
            write_png(&format!("{stem}/blended.png"), encode_png(&DynamicImage::ImageRgb8(r.blended.clone()))?)?;
            rounds.push(RoundLog {
                caption: r.caption.clone(),
                guidance: r.guidance,
                result: format!("{stem}/result.png"),
                mask: format!("{stem}/mask.png"),
                blended: format!("{stem}/blended.png"),
                mask_area: r.mask.area(),
                blended_digest: image_digest(&r.blended),
            });
        }
        write_png("current.png", encode_png(&DynamicImage::ImageRgb8(self.current.clone()))?)?;
        let log = SessionLog {
            format_version: SESSION_FORMAT_VERSION,
            session_id: session_id.to_string(),
            checkpoint_hash: checkpoint_hash.map(str::to_string),
            base_image: "base.png".into(),
            base_digest: image_digest(&self.base_image),
            rounds,
            current: "current.png".into(),
            current_digest: image_digest(&self.current),
        };
        write_atomic(dir.join("session.json"), &serde_json::to_vec_pretty(&log)?)?;
        Ok(log)
    }

    /// Reads a session back from its log and snapshots, checking digests.
    pub fn load(dir: &Path) -> Result<(SessionLog, EditSession)> {
        let log = SessionLog::read(dir)?;
        let base = load_rgb(dir.join(&log.base_image))?;
        let mismatch = |what: &str| Error::Parse {
            record: dir.join("session.json").display().to_string(),
            message: format!("{what} does not match its recorded digest"),
        };
        if image_digest(&base) != log.base_digest {
            return Err(mismatch("base image"));
        }
        let mut history = Vec::with_capacity(log.rounds.len());
        for r in &log.rounds {
            let blended = load_rgb(dir.join(&r.blended))?;
            if image_digest(&blended) != r.blended_digest {
                return Err(mismatch(&r.blended));
            }
            history.push(EditRound {
                caption: r.caption.clone(),
                guidance: r.guidance,
                result: load_rgb(dir.join(&r.result))?,
                mask: BinaryMask::from_image(&load_gray(dir.join(&r.mask))?),
                blended,
            });
        }
        let current = load_rgb(dir.join(&log.current))?;
        if image_digest(&current) != log.current_digest {
            return Err(mismatch("current image"));
        }
        Ok((
            log,
            EditSession {
                base_image: base,
                history,
                current,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub caption: String,
    pub guidance: GuidanceConfig,
    pub result: String,
    pub mask: String,
    pub blended: String,
    pub mask_area: usize,
    pub blended_digest: String,
}

/// Contents of `session.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub format_version: u32,
    pub session_id: String,
    pub checkpoint_hash: Option<String>,
    pub base_image: String,
    pub base_digest: String,
    pub rounds: Vec<RoundLog>,
    pub current: String,
    pub current_digest: String,
}

impl SessionLog {
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("session.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let log: SessionLog = serde_json::from_str(&text).map_err(|e| Error::Parse {
            record: p.display().to_string(),
            message: e.to_string(),
        })?;
        if log.format_version != SESSION_FORMAT_VERSION {
            return Err(Error::Parse {
                record: p.display().to_string(),
                message: format!("unsupported session format {}", log.format_version),
            });
        }
        Ok(log)
    }
}

/// Runs one guided sample on the session's current image and commits it.
pub fn iterative_edit(mut session: EditSession, caption: &str, gcfg: &GuidanceConfig, model: &DiffusionModel) -> Result<EditSession> {
    let out = sample(model, &session.current, caption, gcfg)?;
    session.commit(caption, *gcfg, out.image, out.mask)?;
    Ok(session)
}

/// Re-runs every round of a log from its base image with the recorded
/// captions and settings.
pub fn replay(log: &SessionLog, base: &RgbImage, model: &DiffusionModel) -> Result<EditSession> {
    let mut s = EditSession::new(base.clone());
    for r in &log.rounds {
        s = iterative_edit(s, &r.caption, &r.guidance, model)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn img(seed: u8) -> RgbImage {
        RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8 * seed, y as u8, seed]))
    }

    #[test]
    fn zero_round_session_is_base() {
        let s = EditSession::new(img(3));
        assert_eq!(s.current, s.base_image);
        assert!(s.union_mask().is_empty());
    }

    #[test]
    fn commits_preserve_background_and_round_trip_on_disk() {
        let mut s = EditSession::new(img(3));
        let masks = [
            BinaryMask::from_fn(8, 8, |x, y| x < 2 && y < 2),
            BinaryMask::from_fn(8, 8, |x, _| x == 5),
            BinaryMask::new(8, 8),
        ];
        for (i, m) in masks.iter().enumerate() {
            s.commit("apple", GuidanceConfig { seed: i as u64, ..Default::default() }, img(10 + i as u8), m.clone())
                .unwrap();
        }
        let u = s.union_mask();
        for (x, y, p) in s.current.enumerate_pixels() {
            if !u.get(x as usize, y as usize) {
                assert_eq!(p, s.base_image.get_pixel(x, y));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let log = s.save(dir.path(), "abc", Some("h")).unwrap();
        assert_eq!(log.rounds.len(), 3);
        let (log2, s2) = EditSession::load(dir.path()).unwrap();
        assert_eq!(log2, log);
        assert_eq!(s2, s);
    }

    #[test]
    fn tampered_snapshot_is_detected() {
        let mut s = EditSession::new(img(1));
        s.commit("mug", GuidanceConfig::default(), img(2), BinaryMask::filled(8, 8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), "x", None).unwrap();
        crate::imaging::save_rgb(dir.path().join("current.png"), &img(9)).unwrap();
        assert!(EditSession::load(dir.path()).is_err());
    }
}
