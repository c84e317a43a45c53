//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::DynamicImage;

use shapefree::config::{load_config, write_atomic};
use shapefree::dataset::{build_dataset, DatasetConfig, DatasetDir};
use shapefree::diffusion::checkpoint::file_hash;
use shapefree::diffusion::{Checkpoint, DiffusionModel};
use shapefree::eval::{run_eval, BackendsConfig};
use shapefree::imaging::{encode_png, load_rgb, save_gray, save_rgb, square_resize};
use shapefree::sampler::{random_seed, sample, EditSession, GuidanceConfig, MaskSource, SamplingRule};
use shapefree::train::{train_loop, TrainConfig};
use shapefree::{Error, Result};

use crate::server::{self, AppState, ServeConfig};

#[derive(Debug, Parser)]
#[command(name = "shapefree", version, about = "Mask-free object addition: data, training, editing, evaluation and serving")]
pub struct Cli {
    /// Log more (repeat for trace output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or inspect a training dataset.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the denoiser and mask head on a dataset directory.
    Train(TrainArgs),
    /// Add one object to an image, optionally continuing a saved session.
    Edit(EditArgs),
    /// Evaluate method outputs.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP inference service (bind address from SHAPEFREE_BIND).
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Run the curation pipeline and write tuples plus manifest.json.
    Build(DatasetBuildArgs),
    /// Print statistics for a built dataset as JSON.
    Stats {
        /// Dataset directory containing manifest.json.
        dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct DatasetBuildArgs {
    /// Pipeline configuration (.toml or .json).
    #[arg(long, conflicts_with = "synthetic")]
    pub config: Option<PathBuf>,
    /// Render this many synthetic scenes instead of reading a config.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training configuration (.toml or .json); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override `total_steps`.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct GuidanceArgs {
    /// Guidance settings file; the flags below override it.
    #[arg(long)]
    pub guidance: Option<PathBuf>,
    #[arg(long)]
    pub s_image: Option<f64>,
    #[arg(long)]
    pub s_text: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub mask_threshold: Option<f32>,
    /// `final`, `union` or `step:K` (1-based).
    #[arg(long, value_parser = parse_mask_source)]
    pub mask_source: Option<MaskSource>,
    /// Deterministic update instead of ancestral sampling.
    #[arg(long)]
    pub ddim: bool,
    /// Keep every connected component of the mask, not only the largest.
    #[arg(long)]
    pub all_components: bool,
    /// Noise seed; random when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl GuidanceArgs {
    pub fn resolve(&self) -> Result<GuidanceConfig> {
        let mut g: GuidanceConfig = match &self.guidance {
            Some(p) => load_config(p)?,
            None => GuidanceConfig::default(),
        };
        if let Some(v) = self.s_image {
            g.s_image = v;
        }
        if let Some(v) = self.s_text {
            g.s_text = v;
        }
        if let Some(v) = self.steps {
            g.steps = v;
        }
        if let Some(v) = self.mask_threshold {
            g.mask_threshold = v;
        }
        if let Some(v) = self.mask_source {
            g.mask_source = v;
        }
        if self.ddim {
            g.rule = SamplingRule::Ddim;
        }
        if self.all_components {
            g.single_component = false;
        }
        g.seed = match (self.seed, &self.guidance) {
            (Some(s), _) => s,
            (None, Some(_)) => g.seed,
            (None, None) => random_seed(),
        };
        g.validate()?;
        Ok(g)
    }
}

fn parse_mask_source(s: &str) -> std::result::Result<MaskSource, String> {
    match s {
        "final" => Ok(MaskSource::Final),
        "union" => Ok(MaskSource::Union),
        _ => s
            .strip_prefix("step:")
            .and_then(|k| k.parse().ok())
            .map(MaskSource::Fixed)
            .ok_or_else(|| format!("expected `final`, `union` or `step:K`, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image; resized to the model resolution. Not needed with --session.
    #[arg(long, required_unless_present = "session")]
    pub image: Option<PathBuf>,
    /// Object description, e.g. "a red apple".
    #[arg(long)]
    pub prompt: String,
    /// Continue the session saved in this directory.
    #[arg(long)]
    pub session: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Use raw weights rather than the moving average.
    #[arg(long)]
    pub no_ema: bool,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Score one or more method output directories against an eval set.
    Run(EvalRunArgs),
}

#[derive(Debug, Args)]
pub struct EvalRunArgs {
    /// Method directories (`<id>/output.png`, `<id>/mask.png`).
    #[arg(long, num_args = 1.., required = true)]
    pub methods: Vec<PathBuf>,
    /// Eval set directory (`<id>/input.png`, `<id>/caption.txt`, ...).
    #[arg(long)]
    pub evalset: PathBuf,
    /// Backend configuration (.toml or .json); built-in fallbacks otherwise.
    #[arg(long)]
    pub backends: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service configuration (.toml or .json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub queue_depth: Option<usize>,
    #[arg(long)]
    pub sessions_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(&a),
        Command::Dataset(DatasetCommand::Stats { dir }) => {
            let stats = DatasetDir::open(dir)?.stats()?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
        Command::Train(a) => train(&a),
        Command::Edit(a) => edit(&a),
        Command::Eval(EvalCommand::Run(a)) => eval_run(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn dataset_build(a: &DatasetBuildArgs) -> Result<()> {
    let cfg = match (&a.config, a.synthetic) {
        (Some(p), _) => load_config::<DatasetConfig>(p)?,
        (None, Some(n)) => DatasetConfig::synthetic(n, a.seed),
        (None, None) => return Err(Error::Config("pass --config or --synthetic N".into())),
    };
    let m = build_dataset(&cfg, &a.out)?;
    eprintln!("{} tuples written to {} (stage counts: {:?})", m.tuples.len(), a.out.display(), m.counts);
    println!("{}", m.content_hash);
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    let out = train_loop(&a.dataset, &cfg, &a.out, a.resume.as_deref())?;
    eprintln!("trained to step {}; checkpoint {}", out.step, out.checkpoint.display());
    Ok(())
}

fn edit(a: &EditArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let hash = file_hash(&a.checkpoint)?;
    let model = DiffusionModel::from_checkpoint(&ckpt, !a.no_ema)?;
    let size = model.config.image_size as u32;
    let mut session = match (&a.session, &a.image) {
        (Some(dir), _) => EditSession::load(dir)?.1,
        (None, Some(p)) => {
            let img = load_rgb(p)?;
            EditSession::new(if img.dimensions() == (size, size) { img } else { square_resize(&img, size) })
        }
        (None, None) => return Err(Error::Config("pass --image or --session".into())),
    };
    let g = a.guidance.resolve()?;
    let out = sample(&model, &session.current, &a.prompt, &g)?;
    session.commit(&a.prompt, g, out.image.clone(), out.mask.clone())?;
    write_edit_outputs(&a.out, &out, &session, &hash)?;
    eprintln!(
        "seed {}; mask area {} px; outputs in {}",
        out.seed,
        out.mask.area(),
        a.out.display()
    );
    Ok(())
}

/// `result.png`, `mask.png`, `blended.png`, one soft mask per step under
/// `steps/`, and the session log with its snapshots.
pub fn write_edit_outputs(dir: &Path, out: &shapefree::sampler::SampleOutput, session: &EditSession, ckpt_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir.join("steps")).map_err(|e| Error::Io {
        path: dir.join("steps"),
        source: e,
    })?;
    save_rgb(dir.join("result.png"), &out.image)?;
    save_gray(dir.join("mask.png"), &out.mask.to_image())?;
    write_atomic(dir.join("blended.png"), &encode_png(&DynamicImage::ImageRgb8(out.blended.clone()))?)?;
    for (i, m) in out.soft_masks.iter().enumerate() {
        save_gray(dir.join("steps").join(format!("step-{:04}.png", i + 1)), &m.to_image())?;
    }
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "session".into());
    session.save(dir, &id, Some(ckpt_hash))?;
    Ok(())
}

fn eval_run(a: &EvalRunArgs) -> Result<()> {
    let cfg: BackendsConfig = match &a.backends {
        Some(p) => load_config(p)?,
        None => BackendsConfig::default(),
    };
    let reports = run_eval(&a.methods, &a.evalset, &cfg, &a.out)?;
    for r in &reports {
        println!(
            "{}\tsuccess {:.3}\tunified {}",
            r.method_name,
            r.success_rate,
            r.unified.map_or("n/a".to_string(), |u| format!("{u:.2}"))
        );
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let mut cfg: ServeConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => ServeConfig::default(),
    };
    if let Some(c) = &a.checkpoint {
        cfg.checkpoint = c.clone();
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(q) = a.queue_depth {
        cfg.queue_depth = q;
    }
    if let Some(d) = &a.sessions_dir {
        cfg.sessions_dir = d.clone();
    }
    let addr = server::bind_address()?;
    let state = AppState::load(cfg)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
        path: PathBuf::from("tokio runtime"),
        source: e,
    })?;
    rt.block_on(server::serve(state, addr))
}
