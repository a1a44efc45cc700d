//! End-to-end behavior of training, checkpoints, evaluation and inference
//! on a tiny convolutional-encoder profile.

use std::path::{Path, PathBuf};
use std::process::Command;

use modot::config::{EncoderKind, ExperimentConfig};
use modot::data::{generate_dataset, read_rgb, DatasetManifest, Split};
use modot::model::STAGE1_PREFIX;
use modot::train::{
    evaluate, infer, train_stage1, train_stage2, write_report, Checkpoint, EvalOptions, TrainOptions,
};
use modot::Error;

fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 3;
    cfg.data.root = dir.join("data");
    cfg.data.num_samples = 4;
    cfg.data.split_fraction = 0.5;
    cfg.model.encoder.kind = EncoderKind::Conv;
    cfg.train.batch_size = 2;
    cfg.train.stage1_steps = 4;
    cfg.train.stage2_steps = 2;
    cfg.train.checkpoint_every = 2;
    cfg.train.log_every = 0;
    cfg.train.lr = 1e-3;
    cfg.train.out_dir = dir.join("run");
    cfg
}

fn dataset(cfg: &ExperimentConfig) -> DatasetManifest {
    generate_dataset(&cfg.data, cfg.seed, &cfg.data.root).unwrap()
}

fn with_out(cfg: &ExperimentConfig, out: PathBuf) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.out_dir = out;
    c
}

#[test]
fn stage_one_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = dataset(&cfg);

    let a = train_stage1(&with_out(&cfg, dir.path().join("a")), &manifest, &TrainOptions::default()).unwrap();
    let b = train_stage1(&with_out(&cfg, dir.path().join("b")), &manifest, &TrainOptions::default()).unwrap();
    assert_eq!(a.losses, b.losses);
    let (ca, cb) = (Checkpoint::load(&a.checkpoint).unwrap(), Checkpoint::load(&b.checkpoint).unwrap());
    assert_eq!(ca.checksums, cb.checksums);

    let resumed_cfg = with_out(&cfg, dir.path().join("c"));
    let resume = TrainOptions {
        resume: Some(dir.path().join("a/stage1_step000002.ckpt")),
        stage1_checkpoint: None,
    };
    let c = train_stage1(&resumed_cfg, &manifest, &resume).unwrap();
    assert_eq!(c.first_step, 2);
    assert_eq!(c.losses[..], a.losses[2..]);
    assert_eq!(Checkpoint::load(&c.checkpoint).unwrap().checksums, ca.checksums);
}

#[test]
fn stage_two_keeps_stage_one_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = dataset(&cfg);
    let s1 = train_stage1(&cfg, &manifest, &TrainOptions::default()).unwrap();
    let s2 = train_stage2(&cfg, &manifest, &TrainOptions::default()).unwrap();
    let (c1, c2) = (Checkpoint::load(&s1.checkpoint).unwrap(), Checkpoint::load(&s2.checkpoint).unwrap());
    assert_eq!(c2.stage, 2);
    assert_eq!(c1.checksums[STAGE1_PREFIX], c2.checksums[STAGE1_PREFIX]);

    let mut no_ssr = cfg.clone();
    no_ssr.model.use_ssr = false;
    assert!(matches!(
        train_stage2(&no_ssr, &manifest, &TrainOptions::default()),
        Err(Error::Config(_))
    ));
    let mut wider = cfg.clone();
    wider.model.encoder.base_channels = 32;
    assert!(matches!(
        train_stage2(&wider, &manifest, &TrainOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn tampered_stage_one_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = dataset(&cfg);
    let s1 = train_stage1(&cfg, &manifest, &TrainOptions::default()).unwrap();
    let mut ck = Checkpoint::load(&s1.checkpoint).unwrap();
    let (name, t) = ck.params.iter().find(|(k, _)| k.starts_with(STAGE1_PREFIX)).unwrap();
    let (name, t) = (name.clone(), (t + 1.0).unwrap());
    ck.params.insert(name, t);
    let bad = dir.path().join("bad.ckpt");
    ck.save(&bad).unwrap();
    let opts = TrainOptions {
        resume: None,
        stage1_checkpoint: Some(bad),
    };
    let err = train_stage2(&cfg, &manifest, &opts).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn evaluation_and_inference_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = dataset(&cfg);
    let s1 = train_stage1(&cfg, &manifest, &TrainOptions::default()).unwrap();
    let ck = Checkpoint::load(&s1.checkpoint).unwrap();

    let r1 = evaluate(&ck, &manifest, EvalOptions::default()).unwrap();
    let r2 = evaluate(&ck, &manifest, EvalOptions::default()).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.num_images, manifest.split(Split::Test).len());
    assert_eq!(r1.ob.threshold, 0.7);
    assert_eq!(r1.pr_curve.len(), 19);
    let (md, png) = write_report(&r1, &dir.path().join("report")).unwrap();
    assert!(std::fs::read_to_string(md).unwrap().contains("OB F-score"));
    assert!(png.exists());

    let entry = &manifest.split(Split::Test)[0];
    let image = manifest.paths(entry).rgb;
    let a = infer(&ck, &image, &dir.path().join("inf-a")).unwrap();
    let b = infer(&ck, &image, &dir.path().join("inf-b")).unwrap();
    for (x, y) in [(&a.depth, &b.depth), (&a.ob, &b.ob), (&a.depth_color, &b.depth_color)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let depth = image::open(&a.depth).unwrap().into_luma16();
    let max_mm = (cfg.model.max_depth * 1000.0) as u16;
    assert!(depth.pixels().all(|p| p.0[0] > 0 && p.0[0] <= max_mm));
    let ob = image::open(&a.ob).unwrap().into_luma8();
    let rgb = read_rgb(&image).unwrap();
    assert_eq!((ob.height() as usize, ob.width() as usize), (rgb.dim().0, rgb.dim().1));
}

#[test]
fn odd_sized_images_are_padded_and_cropped_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = dataset(&cfg);
    let s1 = train_stage1(&cfg, &manifest, &TrainOptions::default()).unwrap();
    let ck = Checkpoint::load(&s1.checkpoint).unwrap();
    let entry = &manifest.entries[0];
    let img = image::open(manifest.paths(entry).rgb).unwrap().into_rgb8();
    let cropped = image::imageops::crop_imm(&img, 3, 5, 50, 41).to_image();
    let path = dir.path().join("odd.png");
    cropped.save(&path).unwrap();
    let out = infer(&ck, &path, &dir.path().join("odd")).unwrap();
    let depth = image::open(out.depth).unwrap();
    assert_eq!((depth.width(), depth.height()), (50, 41));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_modot"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "no_such_key": 2}"#).unwrap();
    let out = dir.path().join("x").to_string_lossy().into_owned();
    let code = |args: &[&str]| cli(args).status.code();
    assert_eq!(code(&["gen-data", "--config", bad.to_str().unwrap(), "--out", &out]), Some(2));
    let missing = dir.path().join("missing.ckpt");
    let data = dir.path().to_string_lossy().into_owned();
    assert_eq!(
        code(&["eval", "--ckpt", missing.to_str().unwrap(), "--data", &data, "--out", "r.json"]),
        Some(3)
    );
}

#[test]
fn shipped_profiles_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}
