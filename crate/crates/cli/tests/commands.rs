use std::path::Path;
use std::process::Command;

use touchprint::checkpoint::checkpoint_load;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_touchprint")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn offline_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, support, test) = (tmp.path().join("train"), tmp.path().join("support"), tmp.path().join("test"));
    for (dir, n, seed) in [(&train, "3", "1"), (&support, "2", "2"), (&test, "2", "3")] {
        run(&["gen-data", "--out", p(dir), "--scenes", n, "--seed", seed, "--width", "48", "--height", "40"]);
    }
    assert!(train.join("scene_002/meta.json").is_file());

    let ckpt = tmp.path().join("model.ckpt");
    run(&["pretrain", "--data", p(&train), "--margin", "0.1", "--scale", "16", "--epochs", "3", "--out", p(&ckpt)]);
    let model = checkpoint_load(&ckpt).unwrap();
    assert_eq!(model.head.class_count(), 3);
    assert_eq!(model.head.scale(), 16.0);

    // one support scene gets a hand-drawn mask covering everything
    let full = image::GrayImage::from_pixel(48, 40, image::Luma([255]));
    full.save(support.join("scene_000/mask.png")).unwrap();
    let refined = tmp.path().join("refined.ckpt");
    let imprint = Command::new(env!("CARGO_BIN_EXE_touchprint"))
        .args(["imprint", "--ckpt", p(&ckpt), "--support", p(&support), "--method", "rap", "--out", p(&refined)])
        .output()
        .unwrap();
    if imprint.status.success() {
        let model = checkpoint_load(&refined).unwrap();
        assert_eq!(model.head.class_count(), 4);
        assert_eq!(model.head.parents()[3], Some(0));
    } else {
        // a barely trained model may predict no plant inside the masks
        assert!(String::from_utf8_lossy(&imprint.stderr).contains("mask selects no pixels"));
    }

    let json = run(&["eval", "--ckpt", p(&ckpt), "--test", p(&test), "--json"]);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["classes"].as_array().unwrap().len(), 3);
    let text = run(&["eval", "--ckpt", p(&ckpt), "--test", p(&test)]);
    assert!(text.contains("mean IoU"));
}

#[test]
fn bad_arguments_fail() {
    let out = Command::new(env!("CARGO_BIN_EXE_touchprint"))
        .args(["imprint", "--ckpt", "x", "--support", "y", "--method", "median", "--out", "z"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_touchprint"))
        .args(["eval", "--ckpt", "/nonexistent.ckpt", "--test", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
