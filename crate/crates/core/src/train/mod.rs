//! Joint optimization of the denoiser and the mask head.
//!
//! All randomness of step `s` (timesteps, condition dropout, noise, the
//! batch itself) is drawn from streams keyed by `(seed, s)`, and the
//! optimizer state is checkpointed exactly, so a resumed run continues
//! bit-identically.

pub mod config;
pub mod data;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::dataset::DatasetDir;
use crate::diffusion::checkpoint::Checkpoint;
use crate::diffusion::dropout::{apply_batch_dropout, sample_drop};
use crate::diffusion::losses::{loss_total, LatentBatch, LossOptions};
use crate::diffusion::{rng, DiffusionModel};
use crate::error::{Error, Result};

pub use config::{AdamConfig, TrainConfig};
pub use data::{BatchOrder, EncodedDataset};
pub use optim::{clip_grad_norm, Adam, Ema};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Number of completed updates after this step.
    pub step: u64,
    pub loss_dm: f64,
    pub loss_omp: f64,
    /// `loss_dm + λ · loss_omp`, recomputed from the two values above.
    pub loss_total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub null_images: usize,
    pub null_texts: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss_dm: f64,
    pub loss_omp: f64,
    pub loss_total: f64,
    pub lr: f64,
    /// Seconds since this process started training.
    pub wallclock: f64,
    /// Nulled conditions seen since the previous record.
    pub null_images: usize,
    pub null_texts: usize,
}

/// A batch ready for the losses, before text embedding.
#[derive(Debug)]
pub struct PreparedBatch {
    pub clean: Tensor,
    pub cond: Tensor,
    pub mask_cond: Tensor,
    pub tokens: Vec<i64>,
    pub mask: Tensor,
    pub ts: Vec<usize>,
    pub noise: Tensor,
    pub null_images: usize,
    pub null_texts: usize,
}

pub fn prepare_batch(
    data: &EncodedDataset,
    idx: &[usize],
    cfg: &TrainConfig,
    step: u64,
    num_timesteps: usize,
    null_token: i64,
) -> PreparedBatch {
    let index = Tensor::from_slice(&idx.iter().map(|&i| i as i64).collect::<Vec<_>>());
    let clean = data.targets.index_select(0, &index);
    let inputs = data.inputs.index_select(0, &index);
    let mask = data.masks.index_select(0, &index);
    let tokens: Vec<i64> = idx.iter().map(|&i| data.tokens[i]).collect();

    let mut r = rng::stream("step", &[cfg.seed, step]);
    let ts: Vec<usize> = idx.iter().map(|_| r.gen_range(1..=num_timesteps)).collect();
    let decisions: Vec<_> = idx.iter().map(|_| sample_drop(&mut r, cfg.dropout_p)).collect();
    let noise = rng::randn(&mut r, &clean.size());
    let (cond, tokens) = apply_batch_dropout(&inputs, &tokens, &decisions, null_token);
    PreparedBatch {
        clean,
        cond,
        mask_cond: inputs,
        tokens,
        mask,
        ts,
        noise,
        null_images: decisions.iter().filter(|d| d.image).count(),
        null_texts: decisions.iter().filter(|d| d.text).count(),
    }
}

#[derive(Debug)]
pub struct TrainState {
    pub model: DiffusionModel,
    pub adam: Adam,
    pub ema: Option<Ema>,
    pub step: u64,
}

/// One gradient step on `loss_dm + λ · loss_omp`.
pub fn train_step(state: &mut TrainState, batch: &PreparedBatch, cfg: &TrainConfig) -> Result<StepReport> {
    let params = state.model.trainable();
    optim::zero_grads(&params);
    let lb = LatentBatch {
        clean: batch.clean.shallow_clone(),
        cond: batch.cond.shallow_clone(),
        mask_cond: batch.mask_cond.shallow_clone(),
        text: state.model.embed(&batch.tokens),
        mask: batch.mask.shallow_clone(),
        ts: batch.ts.clone(),
        noise: batch.noise.shallow_clone(),
    };
    let opts = LossOptions {
        lambda: cfg.lambda,
        clamp_x0: cfg.clamp_x0,
    };
    let model = &state.model;
    let losses = loss_total(&lb, &model.denoiser, &model.omp, &model.schedule, &opts).map_err(|e| with_step(e, state.step + 1))?;
    losses.total.backward();
    let grad_norm = clip_grad_norm(&params, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::Divergence {
            step: state.step + 1,
            detail: format!("gradient norm is {grad_norm}"),
        });
    }
    let lr = cfg.lr_at(state.step);
    state.adam.step(&params, lr);
    if let Some(ema) = &mut state.ema {
        ema.update(&state.model.denoiser_trainable());
    }
    state.step += 1;
    let (dm, omp, _) = losses.values();
    Ok(StepReport {
        step: state.step,
        loss_dm: dm,
        loss_omp: omp,
        loss_total: dm + cfg.lambda * omp,
        lr,
        grad_norm,
        null_images: batch.null_images,
        null_texts: batch.null_texts,
    })
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::Divergence { detail, .. } => Error::Divergence { step, detail },
        other => other,
    }
}

/// Training state together with its data and batch order.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub data: EncodedDataset,
    pub manifest_hash: Option<String>,
    order: BatchOrder,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: EncodedDataset, manifest_hash: Option<String>) -> Result<Self> {
        cfg.validate()?;
        let model = DiffusionModel::new(cfg.model.clone(), cfg.seed)?;
        let params = model.trainable();
        let adam = Adam::new(cfg.adam, &params);
        let ema = cfg.use_ema.then(|| Ema::new(cfg.ema_decay, &model.denoiser_trainable()));
        let order = BatchOrder::new(data.len(), cfg.seed);
        Ok(Self {
            cfg,
            state: TrainState { model, adam, ema, step: 0 },
            data,
            manifest_hash,
            order,
        })
    }

    /// Restores a run from a checkpoint written by [`Trainer::checkpoint`].
    /// The dataset must be the one the checkpoint was trained on.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, data: EncodedDataset, manifest_hash: Option<String>) -> Result<Self> {
        if ckpt.manifest_hash != manifest_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on dataset {:?}, refusing to resume on {:?}",
                ckpt.manifest_hash, manifest_hash
            )));
        }
        if ckpt.model != cfg.model {
            return Err(Error::Config("model configuration differs from the checkpoint's".into()));
        }
        let mut t = Self::new(cfg, data, manifest_hash)?;
        t.state.model.load_group(&ckpt.group("model"))?;
        let restore = |prefix: &str, into: &mut BTreeMap<String, Tensor>| -> Result<()> {
            let g = ckpt.group(prefix);
            for (k, v) in into.iter_mut() {
                let src = g.get(k).ok_or_else(|| Error::Checkpoint(format!("{prefix}/{k} missing")))?;
                if src.size() != v.size() {
                    return Err(Error::Checkpoint(format!("{prefix}/{k} has the wrong shape")));
                }
                *v = src.copy();
            }
            Ok(())
        };
        restore("adam.m", &mut t.state.adam.m)?;
        restore("adam.v", &mut t.state.adam.v)?;
        if let Some(ema) = &mut t.state.ema {
            restore("ema", &mut ema.shadow)?;
        }
        t.state.adam.t = ckpt.extra.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(ckpt.step);
        t.state.step = ckpt.step;
        Ok(t)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let idx = self.order.batch(self.state.step, self.cfg.batch_size);
        let batch = prepare_batch(
            &self.data,
            &idx,
            &self.cfg,
            self.state.step,
            self.state.model.schedule.num_steps(),
            self.state.model.null_token(),
        );
        train_step(&mut self.state, &batch, &self.cfg)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.state.model.config.clone());
        c.step = self.state.step;
        c.manifest_hash = self.manifest_hash.clone();
        c.extra = serde_json::json!({
            "train_config": self.cfg,
            "adam_t": self.state.adam.t,
        });
        c.insert_group("model", &self.state.model.variables());
        c.insert_group("adam.m", &self.state.adam.m);
        c.insert_group("adam.v", &self.state.adam.v);
        if let Some(ema) = &self.state.ema {
            c.insert_group("ema", &ema.shadow);
        }
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub last: Option<StepReport>,
}

pub const LOG_FILE: &str = "train_log.ndjson";
pub const LATEST: &str = "latest.ckpt";

fn periodic_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

/// Trains on a dataset directory, writing checkpoints and the NDJSON log
/// into `out_dir`.
pub fn train_loop(dataset_dir: &Path, cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = DatasetDir::open(dataset_dir)?;
    let tuples = dir.load_tuples()?;
    if tuples.is_empty() {
        return Err(Error::EmptyInput("dataset has no tuples".into()));
    }
    let vocab = crate::diffusion::Vocabulary::new(cfg.model.vocabulary.clone())?;
    let data = EncodedDataset::encode(&tuples, &vocab, cfg.model.image_size as u32)?;
    let hash = Some(dir.manifest.content_hash.clone());
    let trainer = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, cfg.clone(), data, hash)?,
        None => Trainer::new(cfg.clone(), data, hash)?,
    };
    run(trainer, out_dir)
}

/// Drives a trainer to `total_steps`.
pub fn run(mut trainer: Trainer, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let latest = out_dir.join(LATEST);
    let cfg = trainer.cfg.clone();
    let started = Instant::now();
    let mut last = None;
    let (mut nulls_i, mut nulls_t) = (0usize, 0usize);
    if trainer.state.step == 0 || trainer.state.step >= cfg.total_steps {
        trainer.checkpoint()?.save(&latest)?;
    }
    while trainer.state.step < cfg.total_steps {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e @ Error::Divergence { .. }) => {
                let report = serde_json::json!({
                    "error": e.to_string(),
                    "last_good_checkpoint": latest,
                    "last_report": last,
                });
                let p = out_dir.join("divergence.json");
                std::fs::write(&p, serde_json::to_vec_pretty(&report)?).map_err(|err| Error::io(&p, err))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        nulls_i += report.null_images;
        nulls_t += report.null_texts;
        if (report.step - 1) % cfg.log_every == 0 {
            let rec = LogRecord {
                step: report.step,
                loss_dm: report.loss_dm,
                loss_omp: report.loss_omp,
                loss_total: report.loss_total,
                lr: report.lr,
                wallclock: started.elapsed().as_secs_f64(),
                null_images: nulls_i,
                null_texts: nulls_t,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
            log::info!(
                "step {} loss {:.5} (dm {:.5}, omp {:.5}) lr {:.2e}",
                rec.step,
                rec.loss_total,
                rec.loss_dm,
                rec.loss_omp,
                rec.lr
            );
            nulls_i = 0;
            nulls_t = 0;
        }
        if report.step % cfg.checkpoint_every == 0 || report.step == cfg.total_steps {
            let c = trainer.checkpoint()?;
            c.save(out_dir.join(periodic_name(report.step)))?;
            c.save(&latest)?;
        }
        last = Some(report);
    }
    Ok(TrainOutcome {
        checkpoint: latest,
        step: trainer.state.step,
        last,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
