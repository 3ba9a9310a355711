use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
image_side = 100
tile_side = 25
[segmentation]
n_superpixels = 100
max_iters = 15
[finetune]
epochs = 40
"#;

fn weedmap(args: &[&str], output_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weedmap"))
        .args(args)
        .env("WEEDMAP_OUTPUT_ROOT", output_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn weedmap")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
    model: PathBuf,
    image: PathBuf,
    annotation: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let config = root.join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    ok(weedmap(
        &["synth-gen", "--out", &s(&data), "--n-train", "8", "--n-test", "1", "--size", "100", "--seed", "40"],
        &root,
    ));
    ok(weedmap(
        &["train", "-c", &s(&config), "--dataset-root", &s(&data), "--out", &s(&root.join("model"))],
        &root,
    ));
    let stem = "synth_00000030";
    Fixture {
        model: root.join("model").join("model.safetensors"),
        image: data.join("images").join(format!("{stem}.png")),
        annotation: data.join("annotations").join(format!("{stem}.png")),
        _dir: dir,
        root,
        data,
        config,
    }
}

#[test]
fn stages_compose_to_the_pipeline_byte_for_byte() {
    let f = fixture();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (cfg, model, image) = (s(&f.config), s(&f.model), s(&f.image));
    ok(weedmap(&["pipeline", "-c", &cfg, "--model", &model, "--image", &image, "--annotation", &s(&f.annotation)], &f.root));
    let whole = f.root.join("synth_00000030");
    for file in ["config.toml", "mask.png", "tiles.json", "predictions.json", "density.json", "heatmap.png", "provenance.json", "report.json"] {
        assert!(whole.join(file).exists(), "pipeline did not write {file}");
    }

    let staged = f.root.join("staged");
    let out = s(&staged);
    for stage in ["segment", "tile", "predict", "density"] {
        ok(weedmap(&[stage, "-c", &cfg, "--model", &model, "--image", &image, "--out", &out], &f.root));
    }
    for file in ["mask.png", "segmentation.json", "tiles.json", "predictions.json", "density.json", "heatmap.png"] {
        assert_eq!(
            std::fs::read(whole.join(file)).unwrap(),
            std::fs::read(staged.join(file)).unwrap(),
            "{file} differs between pipeline and stages"
        );
    }

    ok(weedmap(&["evaluate", "-c", &cfg, "--run", &out, "--annotation", &s(&f.annotation)], &f.root));
    assert_eq!(
        std::fs::read(whole.join("report.json")).unwrap(),
        std::fs::read(staged.join("report.json")).unwrap()
    );

    ok(weedmap(&["extract-features", "-c", &cfg, "--image", &image, "--out", &out], &f.root));
    let features: serde_json::Value = serde_json::from_slice(&std::fs::read(staged.join("features.json")).unwrap()).unwrap();
    assert!(features.as_array().is_some_and(|a| !a.is_empty()));

    let timing = ok(weedmap(&["timing", "-c", &cfg, "--model", &model, "--image", &image, "--out", &out, "--sides", "25,50"], &f.root));
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(staged.join("timing.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["raw_tiles"], 16);
    assert_eq!(rows[1]["raw_tiles"], 4);
    assert!(String::from_utf8_lossy(&timing.stdout).contains("kept tiles"));

    ok(weedmap(&["evaluate", "-c", &cfg, "--model", &model, "--dataset-root", &s(&f.data), "--dataset"], &f.root));
    assert!(f.root.join("report.json").exists());
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let img = root.join("field.png");
    weedmap_core::image::FieldImage::filled(100, 100, [90, 140, 60], "field").save_png(&img).unwrap();

    let bad_config = root.join("bad.toml");
    std::fs::write(&bad_config, "tile_side = 30\n").unwrap();
    let out = weedmap(&["segment", "-c", &s(&bad_config), "--image", &s(&img)], root);
    assert_eq!(out.status.code(), Some(2));

    let out = weedmap(&["segment", "--image", &s(&root.join("absent.png"))], root);
    assert_eq!(out.status.code(), Some(2));

    let out = weedmap(&["predict", "--set", "image_side=100", "--image", &s(&img), "--mask", &s(&root.join("absent_mask.png"))], root);
    assert_eq!(out.status.code(), Some(3));

    let out = weedmap(&["pipeline", "--set", "image_side=100", "--model", &s(&root.join("none.safetensors")), "--image", &s(&img)], root);
    assert_eq!(out.status.code(), Some(3));

    // Neither a model nor a dataset to train from.
    let out = weedmap(&["pipeline", "--set", "image_side=100", "--set", "segmentation.max_iters=2", "--image", &s(&img)], root);
    assert_eq!(out.status.code(), Some(3));
}
