use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn polyalign(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyalign"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
[dataset]
scenes = 2

[dataset.scene]
height = 64
width = 64
buildings = [2, 3]
size = [8.0, 14.0]
seed = 3

[training]
steps = 3
batch_size = 2
patch_size = 16
widths = [4, 4]

[pipeline]
rounds = 2
seed = 9

[output]
dir = "out"
"#;

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&polyalign(&[], tmp.path())), 1);
    assert_eq!(code(&polyalign(&["frobnicate"], tmp.path())), 1);
    assert_eq!(code(&polyalign(&["run", "--mode", "AS3"], tmp.path())), 1);
    assert_eq!(code(&polyalign(&["--help"], tmp.path())), 0);

    fs::write(tmp.path().join("bad.toml"), "[pipeline]\nroundz = 2\n").unwrap();
    assert_eq!(code(&polyalign(&["--config", "bad.toml", "run"], tmp.path())), 1);
    assert_eq!(code(&polyalign(&["--config", "missing.toml", "run"], tmp.path())), 1);
    fs::write(tmp.path().join("zero.toml"), "[pipeline]\nrounds = 0\n").unwrap();
    assert_eq!(code(&polyalign(&["--config", "zero.toml", "run"], tmp.path())), 1);
}

#[test]
fn deterministic_mode_needs_explicit_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let o = polyalign(&["--deterministic", "synth"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    assert_eq!(code(&polyalign(&["--deterministic", "--seed", "4", "synth", "--out", "d"], tmp.path())), 0);
    assert!(tmp.path().join("d/data/manifest.json").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = polyalign(&["gradcheck"], tmp.path());
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("PASS"));
    assert_eq!(code(&polyalign(&["gradcheck", "--corrupt"], tmp.path())), 4);
    assert_eq!(code(&polyalign(&["gradcheck", "--epsilon", "0.5"], tmp.path())), 1);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = polyalign(&["run", "--out", "nowhere"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth"));
}

#[test]
fn eval_compares_files_and_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let square = |dx: f64| {
        format!(
            r#"{{"image_id":"a","extent":[32,32],"polygons":[[[4,4],[{x},4],[{x},12],[4,12]]]}}"#,
            x = 12.0 + dx
        )
    };
    fs::create_dir_all(dir.join("pred")).unwrap();
    fs::create_dir_all(dir.join("gt")).unwrap();
    fs::write(dir.join("pred/a.json"), square(3.0)).unwrap();
    fs::write(dir.join("gt/a.json"), square(0.0)).unwrap();

    let o = polyalign(&["eval", "--pred", "pred/a.json", "--gt", "gt/a.json", "--out", "e1"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("q50 1.500"), "{}", stdout(&o));
    for f in ["cdf.csv", "quantiles.csv", "cdf.svg", "distances.csv"] {
        assert!(dir.join("e1").join(f).exists(), "{f}");
    }
    assert_eq!(code(&polyalign(&["eval", "--pred", "pred", "--gt", "gt", "--out", "e2"], dir)), 0);

    fs::write(dir.join("tri.json"), r#"{"image_id":"a","extent":[32,32],"polygons":[[[4,4],[12,4],[8,12]]]}"#).unwrap();
    assert_eq!(code(&polyalign(&["eval", "--pred", "tri.json", "--gt", "gt/a.json"], dir)), 2);
    assert_eq!(code(&polyalign(&["eval", "--pred", "nope.json", "--gt", "gt/a.json"], dir)), 2);
    assert_eq!(code(&polyalign(&["eval", "--pred", "pred", "--gt", "gt/a.json"], dir)), 1);
}

#[test]
fn synth_run_and_align_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.toml"), TINY).unwrap();
    assert_eq!(code(&polyalign(&["--config", "exp.toml", "synth"], dir)), 0);
    let o = polyalign(&["--config", "exp.toml", "--deterministic", "--threads", "1", "run"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().contains("q50"));
    assert_eq!(table.lines().count(), 4, "{table}");

    let out = dir.join("out");
    for f in ["config.toml", "report/cdf.csv", "report/quantiles.csv", "report/cdf.svg", "rounds/r2/metrics.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpts = out.join("rounds/r2/checkpoints");
    assert_eq!(fs::read_dir(&ckpts).unwrap().count(), 4);

    let data = out.join("data");
    let o = polyalign(
        &[
            "align",
            "--checkpoints",
            ckpts.to_str().unwrap(),
            "--image",
            data.join("images/scene_000.png").to_str().unwrap(),
            "--annotations",
            data.join("annotations/scene_000.json").to_str().unwrap(),
            "--output",
            "aligned.json",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let aligned = fs::read_to_string(dir.join("aligned.json")).unwrap();
    assert!(aligned.contains("\"scene_000\""));

    let o = polyalign(
        &[
            "align",
            "--checkpoints",
            ckpts.to_str().unwrap(),
            "--image",
            data.join("images/scene_000.png").to_str().unwrap(),
            "--annotations",
            "missing.json",
            "--output",
            "x.json",
        ],
        dir,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = TINY.replace("widths = [4, 4]", "widths = [4, 4]\nlearning_rate = 1e38\nsteps = 20").replace("steps = 3\n", "");
    fs::write(dir.join("exp.toml"), cfg).unwrap();
    assert_eq!(code(&polyalign(&["--config", "exp.toml", "synth"], dir)), 0);
    let o = polyalign(&["--config", "exp.toml", "run"], dir);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
