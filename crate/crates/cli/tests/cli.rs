use std::path::{Path, PathBuf};
use std::process::Command;

use cooctex::cooc::storage;
use cooctex::synthesis::edit_bin;
use cooctex::{imageio, procedural, Checkpoint, CoocMatrix};
use ndarray::arr2;

const TINY: &[&str] = &[
    "--preset=desk",
    "--set=crops=12",
    "--set=crop_size=16",
    "--set=downsample=4",
    "--set=patch_size=5",
    "--set=window_size=3",
    "--set=sigma_sq=2",
    "--set=noise_channels=2",
    "--set=generator_widths=4,3",
    "--set=critic_widths=4,1",
    "--set=critic_inject_after=1",
    "--set=batch_size=4",
    "--set=train_fraction=0.75",
];

fn cooctex(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cooctex"))
        .args(args)
        .args(TINY)
        .arg("--out")
        .arg(dir)
        .env("COOCTEX_CACHE_DIR", dir.join("cache"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = cooctex(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn exemplar(dir: &Path) -> PathBuf {
    let path = dir.join("exemplar.png");
    imageio::save_png(procedural::graded(40, 64, 3).view(), &path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cooctex(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(cooctex(dir.path(), &["synth", "--checkpoint", "x"]).status.code(), Some(2));
    let out = cooctex(dir.path(), &["fit-palette", "--image", "missing.png"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = cooctex(dir.path(), &["fit-palette", "--image", "x.png", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# test\nk = 3\nseed = 11\n").unwrap();
    let img = exemplar(dir.path());
    ok(dir.path(), &["fit-palette", "--image", s(&img), "--config", s(&cfg), "--set", "k=2"]);
    let stats = cooctex::CoocStats::load(&dir.path().join("stats.bin")).unwrap();
    assert_eq!(stats.palette.k(), 2);
    assert_eq!(stats.seed, 11);
    let manifest = std::fs::read_to_string(dir.path().join("fit-palette.manifest.txt")).unwrap();
    assert!(manifest.contains("k = 2"));
    assert!(manifest.contains("seed = 11"));
}

#[test]
fn edit_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let m = CoocMatrix::new(arr2(&[[0.5, 0.2], [0.2, 0.1]])).unwrap();
    let input = dir.path().join("m.bin");
    storage::save_matrix(&m, &input).unwrap();
    ok(dir.path(), &["edit", "--input", s(&input), "--bin", "0,0", "--factor", "2"]);
    let got = storage::load_matrix(&dir.path().join("edited.bin")).unwrap();
    assert_eq!(got, edit_bin(&m, 0, 0, 2.0).unwrap());
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let img = exemplar(d);
    ok(d, &["build-dataset", "--image", s(&img), "--export", "2"]);
    assert!(d.join("cache").is_dir());
    let t0 = d.join("tensors/test_000.bin");
    let t1 = d.join("tensors/test_001.bin");
    assert!(t0.exists() && t1.exists());

    ok(d, &["train", "--image", s(&img), "--epochs", "1"]);
    let ckpt_path = d.join("checkpoint.ckpt");
    let log = std::fs::read_to_string(d.join("train_log.csv")).unwrap();
    assert!(log.lines().count() >= 2);
    ok(d, &["train", "--image", s(&img), "--epochs", "2", "--resume"]);
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    assert_eq!(ckpt.training.as_ref().unwrap().epochs_done, 2);
    let c = s(&ckpt_path);

    ok(d, &["synth", "--checkpoint", c, "--tensor", s(&t0), "--seed", "7", "--name", "a.png"]);
    ok(d, &["synth", "--checkpoint", c, "--tensor", s(&t0), "--seed", "7", "--name", "b.png"]);
    let a = std::fs::read(d.join("a.png")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.png")).unwrap());
    let direct = cooctex::synthesis::synthesize(&ckpt, &storage::load_tensor(&t0).unwrap(), 7).unwrap();
    assert_eq!(a, imageio::encode_png(direct.view()).unwrap());

    ok(d, &["synth", "--checkpoint", c, "--image", s(&img), "--name", "from_image.png"]);
    assert_eq!(imageio::load(&d.join("from_image.png")).unwrap().dim(), (40, 64, 3));

    ok(d, &["interp", "--checkpoint", c, "--a", s(&t0), "--b", s(&t1), "--t", "-0.5"]);
    storage::load_tensor(&d.join("interp.bin")).unwrap().validate(1e-6).unwrap();

    ok(d, &["morph", "--checkpoint", c, "--a", s(&t0), "--b", s(&t1), "--frames", "3", "--gif-delay-ms", "50"]);
    assert!(d.join("frames/frame_002.png").exists());
    assert!(d.join("frames/frame.gif").exists());

    ok(d, &["grid", "--checkpoint", c, "--a", s(&t0), "--b", s(&t1), "--steps", "3", "--seeds", "1,2"]);
    assert_eq!(imageio::load(&d.join("grid.png")).unwrap().dim(), (32, 48, 3));

    std::fs::copy(&t0, d.join("left.bin")).unwrap();
    std::fs::copy(&t1, d.join("right.bin")).unwrap();
    std::fs::write(d.join("layout.txt"), "source L = left.bin\nsource R = right.bin\ngrid:\nLLRR\nLLRR\nLRRR\n").unwrap();
    ok(d, &["tile", "--checkpoint", c, "--layout", s(&d.join("layout.txt"))]);
    assert_eq!(imageio::load(&d.join("tile.png")).unwrap().dim(), (12, 16, 3));

    ok(d, &["edit", "--input", s(&t0), "--bin", "0,1", "--factor", "3", "--cell", "0,0"]);
    storage::load_tensor(&d.join("edited.bin")).unwrap().validate(1e-6).unwrap();

    ok(d, &["eval-stability", "--checkpoint", c, "--tensor", s(&t0), "--image", s(&img), "--limit", "2", "--iters", "3"]);
    let csv = std::fs::read_to_string(d.join("stability.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);

    ok(d, &["eval-novelty", "--checkpoint", c, "--image", s(&img), "--samples", "1", "--top", "2"]);
    let novelty: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("novelty.json")).unwrap()).unwrap();
    assert_eq!(novelty[0]["rgb_l1"].as_array().unwrap().len(), 2);
    assert!(d.join("novelty_000_cooc_l1_nn.png").exists());
}
