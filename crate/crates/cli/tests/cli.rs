use std::path::Path;
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use shapefree::diffusion::{DiffusionModel, ModelConfig};
use shapefree::imaging::{load_gray, load_rgb, save_rgb};
use shapefree::mask::BinaryMask;
use shapefree::sampler::SessionLog;

fn shapefree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapefree"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_checkpoint(dir: &Path) -> String {
    let model = DiffusionModel::new(ModelConfig::tiny(), 3).unwrap();
    let p = dir.join("tiny.ckpt");
    model.to_checkpoint().save(&p).unwrap();
    p.display().to_string()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for args in [
        vec!["--help"],
        vec!["dataset", "--help"],
        vec!["dataset", "build", "--help"],
        vec!["dataset", "stats", "--help"],
        vec!["train", "--help"],
        vec!["edit", "--help"],
        vec!["eval", "run", "--help"],
        vec!["serve", "--help"],
    ] {
        let out = shapefree(&args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{args:?}");
    }
}

#[test]
fn usage_errors_exit_two() {
    for args in [vec!["--no-such-flag"], vec!["frobnicate"], vec!["dataset", "build"], vec![]] {
        let out = shapefree(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn runtime_failure_exits_one_with_diagnostic() {
    let out = shapefree(&["dataset", "stats", "/definitely/not/here"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn dataset_build_then_stats_then_train() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = shapefree(&["dataset", "build", "--synthetic", "8", "--seed", "1", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let n = manifest["tuples"].as_array().unwrap().len();
    assert!(n >= 8, "{n} tuples from 8 scenes");

    let out = shapefree(&["dataset", "stats", data.to_str().unwrap()]);
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["tuples"].as_u64().unwrap() as usize, n);

    let cfg = tmp.path().join("train.toml");
    std::fs::write(
        &cfg,
        r#"
batch_size = 2
total_steps = 2
checkpoint_every = 1
log_every = 1
[model]
image_size = 64
text_dim = 8
[model.denoiser]
channels = [8, 16]
attention = [false, true]
patch = 2
time_dim = 8
emb_dim = 16
heads = 2
[model.omp]
channels = 8
patch = 2
heads = 2
"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = shapefree(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("latest.ckpt").exists());
    let log = std::fs::read_to_string(run.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn edit_writes_outputs_and_continues_a_session() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let input = tmp.path().join("in.png");
    // Larger than the model: the command resizes to 16×16.
    save_rgb(&input, &RgbImage::from_fn(40, 40, |x, y| Rgb([(x * 6) as u8, (y * 6) as u8, 90]))).unwrap();
    let first = tmp.path().join("first");
    let out = shapefree(&[
        "edit", "--checkpoint", &ckpt, "--image", input.to_str().unwrap(), "--prompt", "an apple", "--out",
        first.to_str().unwrap(), "--steps", "4", "--seed", "9", "--mask-threshold", "0.3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["result.png", "mask.png", "blended.png", "session.json", "base.png", "current.png"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let steps: Vec<_> = std::fs::read_dir(first.join("steps")).unwrap().collect();
    assert_eq!(steps.len(), 4);

    let base = load_rgb(first.join("base.png")).unwrap();
    let blended = load_rgb(first.join("blended.png")).unwrap();
    let mask = BinaryMask::from_image(&load_gray(first.join("mask.png")).unwrap());
    assert_eq!(base.dimensions(), (16, 16));
    for (x, y, p) in base.enumerate_pixels() {
        if !mask.get(x as usize, y as usize) {
            assert_eq!(p, blended.get_pixel(x, y));
        }
    }
    let log = SessionLog::read(&first).unwrap();
    assert_eq!(log.rounds.len(), 1);
    assert_eq!(log.rounds[0].guidance.seed, 9);
    assert_eq!(log.rounds[0].guidance.steps, 4);

    let second = tmp.path().join("second");
    let out = shapefree(&[
        "edit", "--checkpoint", &ckpt, "--session", first.to_str().unwrap(), "--prompt", "mug", "--out",
        second.to_str().unwrap(), "--steps", "3", "--seed", "1", "--mask-source", "step:2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = SessionLog::read(&second).unwrap();
    assert_eq!(log.rounds.len(), 2);
    assert_eq!(log.rounds[1].caption, "mug");
    assert_eq!(log.base_digest, SessionLog::read(&first).unwrap().base_digest);
}

#[test]
fn edit_rejects_unknown_caption_and_bad_mask_source() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let input = tmp.path().join("in.png");
    save_rgb(&input, &RgbImage::new(16, 16)).unwrap();
    let out_dir = tmp.path().join("o");
    let base = ["edit", "--checkpoint", &ckpt, "--image", input.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
    let mut a = base.to_vec();
    a.extend(["--prompt", "a spaceship", "--steps", "2"]);
    let out = shapefree(&a);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
    let mut a = base.to_vec();
    a.extend(["--prompt", "apple", "--mask-source", "sometimes"]);
    assert_eq!(shapefree(&a).status.code(), Some(2));
}

#[test]
fn eval_run_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (tuples, _) = shapefree::dataset::pipeline::run_pipeline(&shapefree::dataset::DatasetConfig::synthetic(4, 2)).unwrap();
    let evalset = tmp.path().join("evalset");
    let good = tmp.path().join("good");
    let lazy = tmp.path().join("lazy");
    for (i, t) in tuples.iter().take(4).enumerate() {
        let id = format!("{i:03}");
        std::fs::create_dir_all(evalset.join(&id)).unwrap();
        save_rgb(evalset.join(&id).join("input.png"), &t.input_image).unwrap();
        std::fs::write(evalset.join(&id).join("caption.txt"), &t.caption).unwrap();
        save_rgb(evalset.join(&id).join("original.png"), &t.target_image).unwrap();
        for (dir, img, mask) in [
            (&good, &t.target_image, t.mask.clone()),
            (&lazy, &t.input_image, BinaryMask::new(t.mask.width(), t.mask.height())),
        ] {
            std::fs::create_dir_all(dir.join(&id)).unwrap();
            save_rgb(dir.join(&id).join("output.png"), img).unwrap();
            shapefree::imaging::save_gray(dir.join(&id).join("mask.png"), &mask.to_image()).unwrap();
        }
    }
    let out = tmp.path().join("report");
    let o = shapefree(&[
        "eval", "run", "--methods", good.to_str().unwrap(), lazy.to_str().unwrap(), "--evalset",
        evalset.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("good").join("report.json").exists());
    let unified: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("unified.json")).unwrap()).unwrap();
    let methods = unified["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 2);
    let score = |name: &str| {
        methods.iter().find(|m| m["method_name"] == name).unwrap()["unified"].as_f64().unwrap()
    };
    assert!(score("good") > score("lazy"));
    assert_eq!(score("lazy"), 0.0);
}
