//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/tuples/000000/{input.png, target.png, mask.png, meta.json}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::pipeline::DatasetManifest;
use crate::dataset::{Provenance, SourceIds, TrainingTuple};
use crate::error::{Error, Result};
use crate::imaging::{load_gray, load_rgb, save_gray, save_rgb};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TupleMeta {
    pub caption: String,
    pub provenance: Provenance,
    pub source_ids: SourceIds,
}

pub fn write_tuple(dir: &Path, t: &TrainingTuple) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_rgb(dir.join("input.png"), &t.input_image)?;
    save_rgb(dir.join("target.png"), &t.target_image)?;
    save_gray(dir.join("mask.png"), &t.mask.to_image())?;
    let meta = TupleMeta {
        caption: t.caption.clone(),
        provenance: t.provenance,
        source_ids: t.source_ids.clone(),
    };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn read_tuple(dir: &Path) -> Result<TrainingTuple> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: TupleMeta = serde_json::from_str(&text)?;
    Ok(TrainingTuple {
        input_image: load_rgb(dir.join("input.png"))?,
        caption: meta.caption,
        target_image: load_rgb(dir.join("target.png"))?,
        mask: BinaryMask::from_image(&load_gray(dir.join("mask.png"))?),
        provenance: meta.provenance,
        source_ids: meta.source_ids,
    })
}

#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub tuples: usize,
    pub per_category: BTreeMap<String, usize>,
    pub mean_mask_fraction: f64,
    pub counts: crate::dataset::StageCounts,
    pub content_hash: String,
}

impl DatasetDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.compute_hash() != manifest.content_hash {
            return Err(Error::Parse {
                record: path.display().to_string(),
                message: "manifest content hash does not match its contents".into(),
            });
        }
        Ok(Self { root, manifest })
    }

    pub fn load_tuples(&self) -> Result<Vec<TrainingTuple>> {
        self.manifest
            .tuples
            .iter()
            .map(|e| read_tuple(&self.root.join(&e.dir)))
            .collect()
    }

    pub fn stats(&self) -> Result<DatasetStats> {
        let tuples = self.load_tuples()?;
        let mut per_category = BTreeMap::new();
        let mut frac = 0.0;
        for t in &tuples {
            *per_category.entry(t.caption.clone()).or_insert(0) += 1;
            let (w, h) = t.mask.dims();
            frac += t.mask.area() as f64 / (w * h) as f64;
        }
        Ok(DatasetStats {
            tuples: tuples.len(),
            per_category,
            mean_mask_fraction: if tuples.is_empty() { 0.0 } else { frac / tuples.len() as f64 },
            counts: self.manifest.counts.clone(),
            content_hash: self.manifest.content_hash.clone(),
        })
    }
}

pub fn load_dataset(root: impl Into<PathBuf>) -> Result<(DatasetManifest, Vec<TrainingTuple>)> {
    let dir = DatasetDir::open(root)?;
    let tuples = dir.load_tuples()?;
    Ok((dir.manifest, tuples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::pipeline::{build_dataset, DatasetConfig};

    #[test]
    fn build_then_reload_and_rebuild_is_identical() {
        let cfg = DatasetConfig::synthetic(5, 21);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = build_dataset(&cfg, a.path()).unwrap();
        let mb = build_dataset(&cfg, b.path()).unwrap();
        assert_eq!(ma.content_hash, mb.content_hash);
        assert_eq!(ma.counts, mb.counts);

        let (manifest, tuples) = load_dataset(a.path()).unwrap();
        assert_eq!(manifest, ma);
        assert_eq!(tuples.len(), ma.tuples.len());
        for (t, e) in tuples.iter().zip(&ma.tuples) {
            assert_eq!(crate::dataset::pipeline::tuple_digest(t), e.digest);
            t.validate(0).unwrap();
        }
        let stats = DatasetDir::open(a.path()).unwrap().stats().unwrap();
        assert_eq!(stats.tuples, tuples.len());
    }

    #[test]
    fn tampered_manifest_is_refused() {
        let cfg = DatasetConfig::synthetic(2, 4);
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&cfg, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"seed\": 4", "\"seed\": 5", 1);
        std::fs::write(&path, text).unwrap();
        assert!(DatasetDir::open(dir.path()).is_err());
    }
}
