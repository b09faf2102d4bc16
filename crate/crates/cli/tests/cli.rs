mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vton_core::data::DatasetManifest;
use vton_core::imaging::ImageBuffer;

fn vton(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vton"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("VTON_")) {
        cmd.env_remove(k);
    }
    cmd.args(args).envs(env.iter().copied()).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let out = vton(&["synth-data", "--bogus"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(vton(&[], &[]).status.code(), Some(2));
    assert_eq!(vton(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(vton(&["synth-data", "--out", "x", "--set", "data.nope=1"], &[]).status.code(), Some(2));
    assert_eq!(vton(&["synth-data", "--out", "x"], &[("VTON_DATA_NOPE", "1")]).status.code(), Some(2));
    assert_eq!(vton(&["synth-data", "--out", "x", "--n", "0"], &[]).status.code(), Some(2));
}

#[test]
fn precedence_defaults_file_flags_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"data": {"n": 3, "size": 40, "split_fraction": 0.5}}"#).unwrap();
    let count = |out: &Path| DatasetManifest::load(out).unwrap().samples.len();

    let a = dir.path().join("a");
    stdout_json(&vton(&["--config", p(&cfg), "synth-data", "--out", p(&a)], &[]));
    assert_eq!(count(&a), 3);
    let b = dir.path().join("b");
    stdout_json(&vton(&["--config", p(&cfg), "synth-data", "--out", p(&b), "--n", "4"], &[]));
    assert_eq!(count(&b), 4);
    let c = dir.path().join("c");
    stdout_json(&vton(&["--config", p(&cfg), "synth-data", "--out", p(&c), "--n", "4"], &[("VTON_DATA_N", "5")]));
    assert_eq!(count(&c), 5);
    let m = DatasetManifest::load(&c).unwrap();
    let img = ImageBuffer::load(&m.root.join(&m.samples[0].image)).unwrap();
    assert_eq!(img.height(), 40);
}

#[test]
fn data_and_training_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let v = stdout_json(&vton(&["synth-data", "--out", p(&data), "--n", "4", "--size", "64", "--seed", "3"], &[]));
    assert_eq!(v["train"].as_u64().unwrap() + v["val"].as_u64().unwrap(), 4);

    let aug = dir.path().join("aug");
    let v = stdout_json(&vton(&["augment", "--data", p(&data), "--out", p(&aug), "--copies", "2", "--seed", "1"], &[]));
    assert_eq!(v["samples"], 4 + 4 * 2);

    let seg = dir.path().join("models/seg.ckpt");
    let bundle = dir.path().join("bundle");
    let v = stdout_json(&vton(
        &["train-seg", "--data", p(&data), "--out", p(&seg), "--iterations", "2", "--batch-size", "1", "--bundle", p(&bundle)],
        &[("VTON_SEG_SPEC", "small")],
    ));
    assert_eq!(v["steps"], 2);
    assert!(seg.is_file() && seg.with_extension("csv").is_file());

    let gan = dir.path().join("models/g1.ckpt");
    let args = [
        "train-gan", "--data", p(&data), "--out", p(&gan), "--epochs", "1", "--batch-size", "1",
        "--bundle", p(&bundle), "--garment", "g1",
        "--set", "gan.image_size=16", "--set", "gan.generator.base_channels=2", "--set", "gan.generator.global_downsamples=2",
        "--set", "gan.discriminator.num_scales=1", "--set", "gan.discriminator.base_channels=2",
    ];
    let v = stdout_json(&vton(&args, &[]));
    assert!(v["steps"].as_u64().unwrap() >= 1);
    assert!(gan.is_file());

    let person = dir.path().join("person.png");
    std::fs::write(&person, common::person_png(48, 40)).unwrap();
    let out = dir.path().join("out/result.png");
    let inter = dir.path().join("inter");
    stdout_json(&vton(
        &["tryon", "--bundle", p(&bundle), "--image", p(&person), "--garment", "g1", "--out", p(&out), "--intermediates", p(&inter)],
        &[],
    ));
    let res = ImageBuffer::load(&out).unwrap();
    assert_eq!((res.height(), res.width()), (48, 40));
    assert!(inter.join("person0_mask.png").is_file());
}

#[test]
fn tryon_errors() {
    let dir = tempfile::tempdir().unwrap();
    common::stub_bundle(dir.path(), "full-frame");
    let person = dir.path().join("person.png");
    std::fs::write(&person, common::person_png(32, 32)).unwrap();
    let out = dir.path().join("out.png");
    let run = |garment: &str| vton(&["tryon", "--bundle", p(dir.path()), "--image", p(&person), "--garment", garment, "--out", p(&out)], &[]);
    assert_eq!(run("g2").status.code(), Some(0));
    let missing = run("missing");
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("unknown garment"));
    assert_eq!(vton(&["tryon", "--image", p(&person), "--garment", "g1", "--out", p(&out)], &[]).status.code(), Some(2));
}

#[test]
fn eval_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, shift) in [("real", 0usize), ("fake", 1)] {
        let d = dir.path().join(sub);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..4 {
            let img = ImageBuffer::from_fn(24, 24, 3, |r, c, ch| ((r + c + ch + i + shift) % 9) as f32 / 8.0);
            img.save_png(&d.join(format!("{i}.png"))).unwrap();
        }
    }
    let v = stdout_json(&vton(&["eval", "--pairs", p(dir.path()), "--embedder", "randconv"], &[]));
    assert_eq!(v["n_pairs"], 4);
    assert!(v["ssim"].as_f64().unwrap() < 1.0);
    assert!(v["ms_ssim"].is_null());
    assert!(v["fid"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["kid"], v["kernel_inspection_distance"]);

    std::fs::remove_file(dir.path().join("fake/3.png")).unwrap();
    assert_eq!(vton(&["eval", "--pairs", p(dir.path())], &[]).status.code(), Some(1));
}
