//! End-to-end dataset build: filters, removal, post-filter, and the
//! manifest with per-stage accounting.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::coco::ingest_instances;
use crate::dataset::filters::{filter_aspect_ratio, filter_integrity, filter_occlusion, filter_size};
use crate::dataset::removal::{remove_object, ExactRemoval, HttpInpaint, HttpInpaintConfig, InpaintBackend, MeanFill, DEFAULT_DILATION_PX};
use crate::dataset::scene::{render_excluding, synth_scene, SceneSpec};
use crate::dataset::similarity::{post_filter, HttpSimilarity, HttpSimilarityConfig, OracleSimilarity, SimilarityBackend};
use crate::dataset::store::write_tuple;
use crate::dataset::{FilterConfig, InstanceRecord, Provenance, SourceIds, TrainingTuple};
use crate::error::{Error, Result};
use crate::imaging::image_digest;

pub const MANIFEST_VERSION: u32 = 1;
const REMOVAL_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceConfig {
    /// Procedural tabletop scenes.
    Synthetic {
        num_scenes: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default = "default_max_objects")]
        max_objects: usize,
    },
    /// Explicit scene list (JSON array of scene specs).
    SceneBatch { file: PathBuf },
    /// COCO-format annotations plus an image directory.
    Coco { annotation_file: PathBuf, image_dir: PathBuf },
}

fn default_image_size() -> usize {
    64
}

fn default_max_objects() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RemovalConfig {
    /// Re-render without the object; generated sources only.
    #[default]
    Exact,
    MeanFill,
    Http(HttpInpaintConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimilarityConfig {
    #[default]
    Oracle,
    Http(HttpSimilarityConfig),
    /// Skip the post-filter.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: SourceConfig,
    #[serde(default)]
    pub filters: FilterConfig,
    #[serde(default = "default_dilation")]
    pub dilation_px: usize,
    #[serde(default)]
    pub removal: RemovalConfig,
    #[serde(default)]
    pub similarity: SimilarityConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_dilation() -> usize {
    DEFAULT_DILATION_PX
}

impl DatasetConfig {
    pub fn synthetic(num_scenes: usize, seed: u64) -> Self {
        Self {
            source: SourceConfig::Synthetic {
                num_scenes,
                image_size: default_image_size(),
                max_objects: default_max_objects(),
            },
            filters: FilterConfig::default(),
            dilation_px: DEFAULT_DILATION_PX,
            removal: RemovalConfig::Exact,
            similarity: SimilarityConfig::Oracle,
            seed,
        }
    }
}

/// Per-stage rejection counts; `accepted + Σ rejected == total`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub total: usize,
    pub rejected_size: usize,
    pub rejected_integrity: usize,
    pub rejected_occlusion: usize,
    pub rejected_aspect: usize,
    pub rejected_removal: usize,
    pub rejected_post_filter: usize,
    pub accepted: usize,
}

impl StageCounts {
    pub fn rejected(&self) -> usize {
        self.rejected_size
            + self.rejected_integrity
            + self.rejected_occlusion
            + self.rejected_aspect
            + self.rejected_removal
            + self.rejected_post_filter
    }

    pub fn is_conserved(&self) -> bool {
        self.accepted + self.rejected() == self.total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleEntry {
    pub id: usize,
    pub dir: String,
    pub caption: String,
    pub provenance: Provenance,
    pub source_ids: SourceIds,
    /// Digest of input, target and mask pixels.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub seed: u64,
    pub counts: StageCounts,
    pub tuples: Vec<TupleEntry>,
    /// Hash over everything above.
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(MANIFEST_VERSION.to_le_bytes());
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.seed.to_le_bytes());
        h.update(serde_json::to_vec(&self.counts).expect("counts serialize"));
        h.update(serde_json::to_vec(&self.tuples).expect("tuples serialize"));
        hex::encode(h.finalize())
    }
}

/// Deterministic per-scene seed.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"scene");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

struct SourceImage {
    image: RgbImage,
    instances: Vec<InstanceRecord>,
    /// Exact object-free renders keyed by instance id, for generated scenes.
    exact: Option<ExactRemoval>,
}

fn scene_source(spec: &SceneSpec) -> Result<SourceImage> {
    let (image, instances) = synth_scene(spec)?;
    let mut exact = ExactRemoval::new();
    for (i, inst) in instances.iter().enumerate() {
        exact.insert(inst.instance_id, render_excluding(spec, &[i])?.0);
    }
    Ok(SourceImage {
        image,
        instances,
        exact: Some(exact),
    })
}

fn load_sources(cfg: &DatasetConfig) -> Result<Vec<SourceImage>> {
    match &cfg.source {
        SourceConfig::Synthetic {
            num_scenes,
            image_size,
            max_objects,
        } => (0..*num_scenes)
            .map(|i| scene_source(&SceneSpec::tabletop(scene_seed(cfg.seed, i), (*image_size, *image_size), *max_objects)))
            .collect(),
        SourceConfig::SceneBatch { file } => {
            let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
            let specs: Vec<SceneSpec> = serde_json::from_str(&text).map_err(|e| Error::Parse {
                record: file.display().to_string(),
                message: e.to_string(),
            })?;
            specs.iter().map(scene_source).collect()
        }
        SourceConfig::Coco {
            annotation_file,
            image_dir,
        } => Ok(ingest_instances(annotation_file, image_dir)?
            .into_iter()
            .map(|(image, instances)| SourceImage {
                image,
                instances,
                exact: None,
            })
            .collect()),
    }
}

fn similarity_backend(cfg: &SimilarityConfig) -> Option<Box<dyn SimilarityBackend>> {
    match cfg {
        SimilarityConfig::Oracle => Some(Box::new(OracleSimilarity::default())),
        SimilarityConfig::Http(c) => Some(Box::new(HttpSimilarity::new(c.clone()))),
        SimilarityConfig::None => None,
    }
}

fn remove_with_retries(
    image: &RgbImage,
    inst: &InstanceRecord,
    backend: &dyn InpaintBackend,
    dilation: usize,
) -> Result<RgbImage> {
    let mut last = None;
    for attempt in 0..REMOVAL_ATTEMPTS {
        match remove_object(image, &inst.mask, inst.instance_id, backend, dilation) {
            Ok(img) => return Ok(img),
            Err(e) if e.is_retryable() => {
                log::warn!("removal attempt {} for instance {} failed: {e}", attempt + 1, inst.instance_id);
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Runs the pipeline and returns accepted tuples with the stage counts,
/// without touching the filesystem.
pub fn run_pipeline(cfg: &DatasetConfig) -> Result<(Vec<TrainingTuple>, StageCounts)> {
    cfg.filters.validate()?;
    let sources = load_sources(cfg)?;
    let shared_backend: Option<Box<dyn InpaintBackend>> = match &cfg.removal {
        RemovalConfig::Exact => None,
        RemovalConfig::MeanFill => Some(Box::new(MeanFill::default())),
        RemovalConfig::Http(c) => Some(Box::new(HttpInpaint::new(c.clone()))),
    };
    let similarity = similarity_backend(&cfg.similarity);
    let mut counts = StageCounts::default();
    let mut tuples = Vec::new();

    for src in &sources {
        let (w, h) = (src.image.width() as usize, src.image.height() as usize);
        counts.total += src.instances.len();
        let occlusion = filter_occlusion(&src.instances, &cfg.filters)?;
        let (backend, provenance): (&dyn InpaintBackend, Provenance) = match (&cfg.removal, &src.exact, &shared_backend) {
            (RemovalConfig::Exact, Some(exact), _) => (exact, Provenance::Synthetic),
            (RemovalConfig::Exact, None, _) => {
                return Err(Error::Config("exact removal requires a generated source".into()))
            }
            (_, _, Some(b)) => (b.as_ref(), Provenance::RealPipeline),
            _ => unreachable!("non-exact removal always has a shared backend"),
        };
        for (i, inst) in src.instances.iter().enumerate() {
            if !filter_size(inst, w * h, &cfg.filters) {
                counts.rejected_size += 1;
                continue;
            }
            if !filter_integrity(inst, (h, w), &cfg.filters)? {
                counts.rejected_integrity += 1;
                continue;
            }
            if !occlusion[i] {
                counts.rejected_occlusion += 1;
                continue;
            }
            if !filter_aspect_ratio(inst, &cfg.filters).accepted() {
                counts.rejected_aspect += 1;
                continue;
            }
            let removed = match remove_with_retries(&src.image, inst, backend, cfg.dilation_px) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("dropping instance {} after removal failure: {e}", inst.instance_id);
                    counts.rejected_removal += 1;
                    continue;
                }
            };
            let tuple = TrainingTuple {
                input_image: removed,
                caption: inst.category_name.clone(),
                target_image: src.image.clone(),
                mask: inst.mask.clone(),
                provenance,
                source_ids: SourceIds {
                    image_id: inst.image_id,
                    instance_id: inst.instance_id,
                },
            };
            if let Some(sim) = &similarity {
                if !post_filter(&tuple, sim.as_ref(), &cfg.filters)? {
                    counts.rejected_post_filter += 1;
                    continue;
                }
            }
            counts.accepted += 1;
            tuples.push(tuple);
        }
    }
    debug_assert!(counts.is_conserved());
    Ok((tuples, counts))
}

pub fn tuple_digest(t: &TrainingTuple) -> String {
    let mut h = Sha256::new();
    h.update(image_digest(&t.input_image));
    h.update(image_digest(&t.target_image));
    h.update(t.mask.as_slice());
    h.update(t.caption.as_bytes());
    hex::encode(h.finalize())
}

/// Builds the dataset into `out_dir`: one directory per tuple plus
/// `manifest.json`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let (tuples, counts) = run_pipeline(cfg)?;
    if tuples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} instances in, all rejected: {counts:?}",
            counts.total
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(tuples.len());
    for (id, t) in tuples.iter().enumerate() {
        let dir = format!("tuples/{id:06}");
        write_tuple(&out_dir.join(&dir), t)?;
        entries.push(TupleEntry {
            id,
            dir,
            caption: t.caption.clone(),
            provenance: t.provenance,
            source_ids: t.source_ids.clone(),
            digest: tuple_digest(t),
        });
    }
    let mut manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
        seed: cfg.seed,
        counts,
        tuples: entries,
        content_hash: String::new(),
    };
    manifest.content_hash = manifest.compute_hash();
    crate::config::write_atomic(out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_through_keeps_every_placement() {
        let mut cfg = DatasetConfig::synthetic(6, 3);
        cfg.filters = FilterConfig::pass_through();
        cfg.similarity = SimilarityConfig::None;
        let (tuples, counts) = run_pipeline(&cfg).unwrap();
        let placements: usize = (0..6)
            .map(|i| SceneSpec::tabletop(scene_seed(3, i), (64, 64), 3).object_placements.len())
            .sum();
        assert_eq!(tuples.len(), placements);
        assert_eq!(counts.accepted, placements);
        for t in &tuples {
            t.validate(0).unwrap();
        }
    }

    #[test]
    fn counts_are_conserved_under_strict_filters() {
        let mut cfg = DatasetConfig::synthetic(10, 8);
        cfg.filters.min_area_fraction = 0.05;
        cfg.filters.edge_margin_px = 8;
        let (_, counts) = run_pipeline(&cfg).unwrap();
        assert!(counts.is_conserved());
        assert!(counts.rejected() > 0);
    }

    #[test]
    fn all_rejected_is_an_explicit_error() {
        let mut cfg = DatasetConfig::synthetic(2, 1);
        cfg.filters.min_area_fraction = 0.49;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_dataset(&cfg, dir.path()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn mean_fill_marks_real_pipeline_provenance() {
        let mut cfg = DatasetConfig::synthetic(3, 2);
        cfg.removal = RemovalConfig::MeanFill;
        cfg.similarity = SimilarityConfig::None;
        let (tuples, _) = run_pipeline(&cfg).unwrap();
        assert!(!tuples.is_empty());
        for t in &tuples {
            assert_eq!(t.provenance, Provenance::RealPipeline);
            t.validate(cfg.dilation_px).unwrap();
        }
    }
}
