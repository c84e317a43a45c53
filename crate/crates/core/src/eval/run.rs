//! Directory-level evaluation: an eval set plus one results directory per
//! method in, `report.json` per method and `unified.json` out.
//!
//! ```text
//! evalset/<id>/input.png  caption.txt  original.png  [mask.png]
//! method/<id>/output.png  mask.png
//! method/success.json     (only for the manual protocol: {"<id>": bool})
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::backends::*;
use super::metrics::*;
use crate::config::write_atomic;
use crate::error::{Error, Result};
use crate::imaging::{load_gray, load_rgb};
use crate::mask::BinaryMask;
use crate::oracle::OracleClassifier;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerceptualChoice {
    #[default]
    MsSsim,
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbeddingChoice {
    #[default]
    Oracle,
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureChoice {
    #[default]
    Oracle,
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JudgeChoice {
    #[default]
    Heuristic,
    Http {
        #[serde(flatten)]
        http: HttpBackendConfig,
        #[serde(default = "default_concurrency")]
        max_concurrent: usize,
    },
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SuccessProtocol {
    /// The oracle classifier must find the caption's category in the mask bbox.
    #[default]
    Oracle,
    /// Judge rating at or above `min_rating`.
    Judge { min_rating: u8 },
    /// Flags read from `<method>/success.json`.
    Manual,
}

/// Which records contribute to the four axis means.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScope {
    #[default]
    Successful,
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackendsConfig {
    pub perceptual: PerceptualChoice,
    pub embedding: EmbeddingChoice,
    pub features: FeatureChoice,
    pub judge: JudgeChoice,
    pub judge_template: String,
    pub judge_template_version: u32,
    pub judge_attempts: usize,
    /// Directory for persisted judge replies.
    pub judge_cache: Option<PathBuf>,
    pub success: SuccessProtocol,
    pub score_scope: ScoreScope,
    /// Worker threads for per-record metrics.
    pub threads: usize,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            perceptual: PerceptualChoice::default(),
            embedding: EmbeddingChoice::default(),
            features: FeatureChoice::default(),
            judge: JudgeChoice::default(),
            judge_template: DEFAULT_JUDGE_TEMPLATE.into(),
            judge_template_version: JUDGE_TEMPLATE_VERSION,
            judge_attempts: DEFAULT_JUDGE_ATTEMPTS,
            judge_cache: None,
            success: SuccessProtocol::default(),
            score_scope: ScoreScope::default(),
            threads: 1,
        }
    }
}

/// Instantiated backends.
pub struct Backends {
    pub perceptual: Box<dyn PerceptualBackend>,
    pub embedding: Box<dyn EmbeddingBackend>,
    pub features: Box<dyn FeatureBackend>,
    pub judge: Box<dyn JudgeBackend>,
}

impl Backends {
    pub fn from_config(cfg: &BackendsConfig) -> Self {
        let perceptual: Box<dyn PerceptualBackend> = match &cfg.perceptual {
            PerceptualChoice::MsSsim => Box::new(SsimDistance),
            PerceptualChoice::Http(h) => Box::new(HttpPerceptual::new(h.clone())),
        };
        let embedding: Box<dyn EmbeddingBackend> = match &cfg.embedding {
            EmbeddingChoice::Oracle => Box::new(OracleEmbedding::default()),
            EmbeddingChoice::Http(h) => Box::new(HttpEmbedding::new(h.clone())),
        };
        let features: Box<dyn FeatureBackend> = match &cfg.features {
            FeatureChoice::Oracle => Box::new(OracleFeatures::default()),
            FeatureChoice::Http(h) => Box::new(HttpFeatures::new(h.clone())),
        };
        let judge: Box<dyn JudgeBackend> = match &cfg.judge {
            JudgeChoice::Heuristic => Box::new(CachedJudge::new(HeuristicJudge::default(), cfg.judge_cache.clone())),
            JudgeChoice::Http { http, max_concurrent } => Box::new(CachedJudge::new(
                HttpJudge::new(http.clone(), *max_concurrent),
                cfg.judge_cache.clone(),
            )),
        };
        Self {
            perceptual,
            embedding,
            features,
            judge,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub input: RgbImage,
    pub caption: String,
    pub original: RgbImage,
    /// Object region in `original`; the method's output mask stands in
    /// when absent.
    pub original_mask: Option<BinaryMask>,
}

fn subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_evalset(dir: &Path) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for id in subdirs(dir)? {
        let d = dir.join(&id);
        let caption_path = d.join("caption.txt");
        let caption = std::fs::read_to_string(&caption_path)
            .map_err(|e| Error::io(&caption_path, e))?
            .trim()
            .to_string();
        let input = load_rgb(d.join("input.png"))?;
        let original = load_rgb(d.join("original.png"))?;
        crate::imaging::check_same_dims(&input, &original)?;
        let mask_path = d.join("mask.png");
        let original_mask = if mask_path.exists() {
            let m = BinaryMask::from_image(&load_gray(&mask_path)?);
            crate::imaging::check_mask_dims(&original, &m)?;
            Some(m)
        } else {
            None
        };
        items.push(EvalItem {
            id,
            input,
            caption,
            original,
            original_mask,
        });
    }
    if items.is_empty() {
        return Err(Error::EmptyInput(format!("no eval items under {}", dir.display())));
    }
    Ok(items)
}

/// Builds one record per eval item from a method's results directory.
pub fn load_method(dir: &Path, items: &[EvalItem]) -> Result<Vec<EvalRecord>> {
    items
        .iter()
        .map(|it| {
            let d = dir.join(&it.id);
            let output = load_rgb(d.join("output.png"))?;
            let mask = BinaryMask::from_image(&load_gray(d.join("mask.png"))?);
            EvalRecord::new(&it.id, it.input.clone(), &it.caption, output, mask)
        })
        .collect()
}

fn manual_flags(dir: &Path) -> Result<BTreeMap<String, bool>> {
    let p = dir.join("success.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: p.display().to_string(),
        message: e.to_string(),
    })
}

struct Scored {
    success: Option<bool>,
    scores: RecordScores,
    judge_reply: Option<String>,
    note: Option<String>,
}

fn score_one(rec: &EvalRecord, cfg: &BackendsConfig, be: &Backends, manual: &BTreeMap<String, bool>) -> Result<Scored> {
    let mut note = None;
    // The judge is needed for the judge protocol and for the axis anyway.
    let judgment = |rec: &EvalRecord| {
        location_reasonableness(
            &rec.input_image,
            &rec.output_image,
            &rec.caption,
            &cfg.judge_template,
            be.judge.as_ref(),
            cfg.judge_attempts,
        )
    };
    let mut judged = None;
    let mut success = match &cfg.success {
        SuccessProtocol::Oracle => Some(oracle_success(
            OracleClassifier::shared(),
            &rec.output_image,
            &rec.output_mask,
            &rec.caption,
        )?),
        SuccessProtocol::Judge { min_rating } => {
            let j = judgment(rec)?;
            let ok = j.rating >= *min_rating;
            judged = Some(j);
            Some(ok)
        }
        SuccessProtocol::Manual => manual.get(&rec.id).copied(),
    };
    if rec.output_mask.is_empty() && success == Some(true) {
        success = Some(false);
        note = Some("empty output mask counted as failure".to_string());
    }
    let mut scores = RecordScores::default();
    let in_scope = match cfg.score_scope {
        ScoreScope::All => true,
        ScoreScope::Successful => success == Some(true),
    };
    if in_scope {
        scores.consistency = Some(background_consistency(
            &rec.input_image,
            &rec.output_image,
            &rec.output_mask,
            be.perceptual.as_ref(),
        )?);
        let j = match judged.take() {
            Some(j) => j,
            None => judgment(rec)?,
        };
        scores.reasonableness = Some(j.rating as f64);
        judged = Some(j);
        match local_clip_score(&rec.caption, &rec.output_image, &rec.output_mask, be.embedding.as_ref()) {
            Ok(s) => scores.correlation = Some(s),
            Err(Error::UndefinedScore(m)) => note = Some(m),
            Err(e) => return Err(e),
        }
    }
    Ok(Scored {
        success,
        scores,
        judge_reply: judged.map(|j| format!("Rating: {} - {}", j.rating, j.justification)),
        note,
    })
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Scores every record of one method and aggregates the report. `unified`
/// is left empty.
pub fn evaluate_method(
    name: &str,
    items: &[EvalItem],
    records: &mut [EvalRecord],
    manual: &BTreeMap<String, bool>,
    cfg: &BackendsConfig,
    be: &Backends,
) -> Result<MethodReport> {
    if records.len() != items.len() {
        return Err(Error::contract("one record per eval item"));
    }
    let threads = cfg.threads.max(1);
    let chunk = records.len().div_ceil(threads).max(1);
    let mut scored: Vec<Scored> = Vec::with_capacity(records.len());
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|r| score_one(r, cfg, be, manual)).collect::<Result<Vec<_>>>()))
            .collect();
        for h in handles {
            scored.extend(h.join().expect("metric worker panicked")?);
        }
        Ok(())
    })?;
    for (r, s) in records.iter_mut().zip(&scored) {
        r.success = s.success;
        r.scores = s.scores;
    }
    let rate = success_rate(records)?;

    let in_scope: Vec<usize> = (0..records.len())
        .filter(|&i| cfg.score_scope == ScoreScope::All || records[i].success == Some(true))
        .filter(|&i| !records[i].output_mask.is_empty())
        .collect();
    let local_fid = if in_scope.is_empty() {
        None
    } else {
        let originals: Vec<(&RgbImage, &BinaryMask)> = in_scope
            .iter()
            .map(|&i| (&items[i].original, items[i].original_mask.as_ref().unwrap_or(&records[i].output_mask)))
            .collect();
        let outputs: Vec<(&RgbImage, &BinaryMask)> = in_scope
            .iter()
            .map(|&i| (&records[i].output_image, &records[i].output_mask))
            .collect();
        Some(local_fid(&originals, &outputs, be.features.as_ref())?)
    };

    let rows = records
        .iter()
        .zip(scored)
        .map(|(r, s)| RecordRow {
            id: r.id.clone(),
            caption: r.caption.clone(),
            success: r.success.unwrap_or(false),
            scores: r.scores,
            judge_reply: s.judge_reply,
            note: s.note,
        })
        .collect();
    Ok(MethodReport {
        method_name: name.to_string(),
        num_records: records.len(),
        success_rate: rate,
        mean_lpips: mean(records.iter().map(|r| r.scores.consistency)),
        mean_judge: mean(records.iter().map(|r| r.scores.reasonableness)),
        mean_local_clip: mean(records.iter().map(|r| r.scores.correlation)),
        local_fid,
        unified: None,
        records: rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedEntry {
    pub method_name: String,
    pub success_rate: f64,
    pub unified: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedReport {
    pub methods: Vec<UnifiedEntry>,
    pub tie_rule: String,
    pub judge_template_version: u32,
    /// Set when the unified score could not be computed.
    pub note: Option<String>,
}

/// Evaluates each method directory against the eval set and writes
/// `<out>/<method>/report.json` and `<out>/unified.json`.
pub fn run_eval(methods: &[PathBuf], evalset: &Path, cfg: &BackendsConfig, out: &Path) -> Result<Vec<MethodReport>> {
    if methods.is_empty() {
        return Err(Error::EmptyInput("no method directories".into()));
    }
    let names: Vec<String> = methods
        .iter()
        .map(|m| {
            m.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| Error::Config(format!("cannot name method directory {}", m.display())))
        })
        .collect::<Result<_>>()?;
    if names.iter().collect::<BTreeSet<_>>().len() != names.len() {
        return Err(Error::Config("method directory names must be distinct".into()));
    }
    let items = load_evalset(evalset)?;
    let be = Backends::from_config(cfg);
    let mut reports = Vec::with_capacity(methods.len());
    for (dir, name) in methods.iter().zip(&names) {
        log::info!("evaluating {name} on {} items", items.len());
        let mut records = load_method(dir, &items)?;
        let manual = match cfg.success {
            SuccessProtocol::Manual => manual_flags(dir)?,
            _ => BTreeMap::new(),
        };
        reports.push(evaluate_method(name, &items, &mut records, &manual, cfg, &be)?);
    }
    let note = match unified_metric(&reports) {
        Ok(u) => {
            for (r, v) in reports.iter_mut().zip(u) {
                r.unified = Some(v);
            }
            None
        }
        Err(e) => {
            log::warn!("unified metric not computed: {e}");
            Some(e.to_string())
        }
    };
    for r in &reports {
        let dir = out.join(&r.method_name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_atomic(dir.join("report.json"), &serde_json::to_vec_pretty(r)?)?;
    }
    let unified = UnifiedReport {
        methods: reports
            .iter()
            .map(|r| UnifiedEntry {
                method_name: r.method_name.clone(),
                success_rate: r.success_rate,
                unified: r.unified,
            })
            .collect(),
        tie_rule: "an axis that is constant across methods contributes 0.5".into(),
        judge_template_version: cfg.judge_template_version,
        note,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(out.join("unified.json"), &serde_json::to_vec_pretty(&unified)?)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::scene::{render_excluding, ObjectPlacement, SceneSpec};
    use crate::imaging::{save_gray, save_rgb};

    fn scene(with_object: bool) -> (RgbImage, BinaryMask) {
        let spec = SceneSpec {
            background_id: 1,
            supports: vec![],
            object_placements: vec![ObjectPlacement {
                category: "mug".into(),
                position: (16.0, 16.0),
                scale: 7.0,
                rotation: 0.0,
                z_order: 0,
            }],
            image_size: (32, 32),
            rng_seed: 3,
        };
        let (with, masks) = render_excluding(&spec, &[]).unwrap();
        let (without, _) = render_excluding(&spec, &[0]).unwrap();
        if with_object {
            (with, masks[0].clone())
        } else {
            (without, masks[0].clone())
        }
    }

    fn write_fixture(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
        let (original, mask) = scene(true);
        let (input, _) = scene(false);
        let evalset = root.join("evalset");
        let good = root.join("good");
        let bad = root.join("bad");
        for id in ["000", "001"] {
            let d = evalset.join(id);
            std::fs::create_dir_all(&d).unwrap();
            save_rgb(d.join("input.png"), &input).unwrap();
            save_rgb(d.join("original.png"), &original).unwrap();
            std::fs::write(d.join("caption.txt"), "a mug\n").unwrap();
            let g = good.join(id);
            std::fs::create_dir_all(&g).unwrap();
            save_rgb(g.join("output.png"), &original).unwrap();
            save_gray(g.join("mask.png"), &mask.to_image()).unwrap();
            let b = bad.join(id);
            std::fs::create_dir_all(&b).unwrap();
            save_rgb(b.join("output.png"), &input).unwrap();
            save_gray(b.join("mask.png"), &BinaryMask::new(32, 32).to_image()).unwrap();
        }
        (evalset, good, bad)
    }

    #[test]
    fn end_to_end_directory_run() {
        let dir = tempfile::tempdir().unwrap();
        let (evalset, good, bad) = write_fixture(dir.path());
        let out = dir.path().join("out");
        let reports = run_eval(&[good, bad], &evalset, &BackendsConfig::default(), &out).unwrap();
        assert_eq!(reports[0].success_rate, 1.0);
        assert_eq!(reports[1].success_rate, 0.0);
        assert_eq!(reports[0].mean_lpips, Some(0.0));
        assert!(reports[0].local_fid.unwrap() < 1e-3);
        assert_eq!(reports[1].unified, Some(0.0));
        assert!(reports[0].unified.unwrap() > 0.0);
        let back: MethodReport =
            serde_json::from_slice(&std::fs::read(out.join("good/report.json")).unwrap()).unwrap();
        assert_eq!(back, reports[0]);
        let u: UnifiedReport = serde_json::from_slice(&std::fs::read(out.join("unified.json")).unwrap()).unwrap();
        assert_eq!(u.methods.len(), 2);
    }

    #[test]
    fn manual_protocol_requires_every_flag() {
        let dir = tempfile::tempdir().unwrap();
        let (evalset, good, _) = write_fixture(dir.path());
        std::fs::write(good.join("success.json"), r#"{"000": true}"#).unwrap();
        let cfg = BackendsConfig {
            success: SuccessProtocol::Manual,
            ..Default::default()
        };
        let e = run_eval(&[good.clone()], &evalset, &cfg, &dir.path().join("o")).unwrap_err();
        assert!(matches!(e, Error::Contract(_)), "{e}");
        std::fs::write(good.join("success.json"), r#"{"000": true, "001": false}"#).unwrap();
        let r = run_eval(&[good], &evalset, &cfg, &dir.path().join("o")).unwrap();
        assert_eq!(r[0].success_rate, 0.5);
        assert_eq!(r[0].unified, None);
    }

    #[test]
    fn backends_config_parses_from_toml() {
        let cfg: BackendsConfig = toml::from_str(
            r#"
            score_scope = "all"
            threads = 2
            [judge]
            kind = "http"
            endpoint = "http://localhost:9/judge"
            auth_env = "JUDGE_TOKEN"
            max_concurrent = 2
            [success]
            kind = "judge"
            min_rating = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.score_scope, ScoreScope::All);
        assert!(matches!(cfg.judge, JudgeChoice::Http { max_concurrent: 2, .. }));
        assert_eq!(cfg.success, SuccessProtocol::Judge { min_rating: 3 });
        assert_eq!(cfg.perceptual, PerceptualChoice::MsSsim);
    }
}
