//! End-to-end tests of the `semloc` binary: artifact round trips,
//! determinism of every command, exit codes, and the localize golden file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn semloc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semloc"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn semloc");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                entries.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    entries.sort();
    entries
}

/// Small-world config keeps these tests fast: 250 m maps, 60 m windows.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "map_spec": { "extent_m": 250.0, "resolution": 0.5, "grid_dim": 5, "window_m": 60.0 },
  "worldgen": { "seed": 0, "road_graph_density": 260.0, "lane_width": 3.5,
                "crosswalk_probability": 0.85, "carpark_count": 10, "divider_probability": 0.8 },
  "train": { "epochs": 2, "lr": 0.003, "batch": 16, "eval_rotations": 2,
             "descriptor": { "dim": 32, "token_px": 20, "proj_seed": 7 } },
  "eval": { "rotations": 2, "thresholds": [1.0, 2.0, 5.0, 10.0], "seed": 0 }
}"#,
    )
    .unwrap();
    path
}

#[test]
fn worldgen_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    for out in ["a", "b"] {
        run_ok(semloc()
            .args(["worldgen", "--seed", "7", "--count", "2", "--out"])
            .arg(tmp.path().join(out))
            .arg("--config")
            .arg(&config));
    }
    let a = dir_bytes(&tmp.path().join("a"));
    let b = dir_bytes(&tmp.path().join("b"));
    assert_eq!(a.len(), 4, "expected 2 maps with sidecars");
    assert_eq!(a, b, "reruns must produce identical bytes");
}

#[test]
fn worldgen_zero_count_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = semloc()
        .args(["worldgen", "--seed", "1", "--count", "0", "--out"])
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn json_errors_flag_emits_machine_readable_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = semloc()
        .args(["--json-errors", "worldgen", "--count", "0", "--out"])
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let value: serde_json::Value = serde_json::from_str(stderr.trim()).expect("stderr is JSON");
    assert_eq!(value["error"]["kind"], "usage");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.json");
    fs::write(&config, r#"{ "tain": { "epochs": 1 } }"#).unwrap();
    let out = semloc()
        .args(["worldgen", "--count", "1", "--out"])
        .arg(tmp.path().join("x"))
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

/// Build maps + a small dataset once for the pipeline tests.
fn build_fixture(tmp: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let config = small_config(tmp);
    let maps = tmp.join("maps");
    let dataset = tmp.join("dataset");
    run_ok(semloc()
        .args(["worldgen", "--seed", "5", "--count", "2", "--out"])
        .arg(&maps)
        .arg("--config")
        .arg(&config));
    run_ok(semloc()
        .args(["dataset", "--n", "40", "--frames", "1", "--seed", "9", "--contexts", "clean"])
        .arg("--maps")
        .arg(&maps)
        .arg("--out")
        .arg(&dataset)
        .arg("--config")
        .arg(&config));
    (config, maps, dataset)
}

#[test]
fn dataset_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let maps = tmp.path().join("maps");
    run_ok(semloc()
        .args(["worldgen", "--seed", "5", "--count", "1", "--out"])
        .arg(&maps)
        .arg("--config")
        .arg(&config));
    for (out, workers) in [("d1", "1"), ("d2", "4")] {
        run_ok(semloc()
            .args(["--workers", workers, "dataset", "--n", "12", "--seed", "3", "--contexts", "clean"])
            .args(["--frames", "2"])
            .arg("--maps")
            .arg(&maps)
            .arg("--out")
            .arg(tmp.path().join(out))
            .arg("--config")
            .arg(&config));
    }
    assert_eq!(
        dir_bytes(&tmp.path().join("d1")),
        dir_bytes(&tmp.path().join("d2")),
        "dataset bytes must not depend on worker count"
    );
}

#[test]
fn train_zero_epochs_returns_seeded_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, maps, dataset) = build_fixture(tmp.path());
    let params_path = tmp.path().join("init.bmmp");
    run_ok(semloc()
        .args(["train", "--epochs", "0", "--seed", "21"])
        .arg("--dataset")
        .arg(&dataset)
        .arg("--maps")
        .arg(&maps)
        .arg("--out")
        .arg(&params_path)
        .arg("--config")
        .arg(&config));
    let (params, header) = semloc::formats::read_params(&params_path).unwrap();
    let init = semloc_core::retrieval::RetrievalParams::init(
        header.dim,
        header.heads,
        header.query_rows,
        header.query_cols,
        header.grid_dim,
        21,
    )
    .unwrap();
    // Values round-trip through f32 on disk.
    for (a, b) in params.w_query.iter().zip(&init.w_query) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    for (a, b) in params.base_pos.iter().zip(&init.base_pos) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, maps, dataset) = build_fixture(tmp.path());

    // Train twice; parameter files must match byte for byte.
    let p1 = tmp.path().join("run1.bmmp");
    let p2 = tmp.path().join("run2.bmmp");
    for p in [&p1, &p2] {
        run_ok(semloc()
            .args(["train", "--seed", "4"])
            .arg("--dataset")
            .arg(&dataset)
            .arg("--maps")
            .arg(&maps)
            .arg("--out")
            .arg(p)
            .arg("--config")
            .arg(&config));
    }
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "training must be bit-stable");
    assert!(p1.with_extension("csv").exists(), "learning curve CSV expected");

    // Evaluate twice with different worker counts; reports must match.
    for (out, workers) in [("e1", "1"), ("e2", "3")] {
        run_ok(semloc()
            .args(["--workers", workers, "eval"])
            .arg("--dataset")
            .arg(&dataset)
            .arg("--maps")
            .arg(&maps)
            .arg("--params")
            .arg(&p1)
            .arg("--out")
            .arg(tmp.path().join(out))
            .arg("--config")
            .arg(&config));
    }
    let r1 = fs::read(tmp.path().join("e1").join("report.json")).unwrap();
    let r2 = fs::read(tmp.path().join("e2").join("report.json")).unwrap();
    assert_eq!(r1, r2, "report must not depend on worker count");
    for file in ["records.csv", "error_histogram.svg", "error_vs_displacement.svg", "context_bars.svg"] {
        assert!(tmp.path().join("e1").join(file).exists(), "{file} missing");
    }

    // Localize one stored sample; output is a single JSON object.
    let map_png = semloc::formats::list_maps(&maps).unwrap().remove(0);
    let sample_dir = dataset.join("samples").join("sample_000000");
    let out = run_ok(semloc()
        .args(["localize"])
        .arg("--sample")
        .arg(&sample_dir)
        .arg("--map")
        .arg(&map_png)
        .arg("--params")
        .arg(&p1)
        .arg("--config")
        .arg(&config));
    let text = String::from_utf8(out.stdout).unwrap();
    let value: serde_json::Value = serde_json::from_str(text.trim()).expect("localize prints JSON");
    assert!(value["est_pose"]["x"].is_number());
    assert!(value["coarse_cell"]["row"].is_number());
}

#[test]
fn eval_with_empty_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, maps, dataset) = build_fixture(tmp.path());
    let params_path = tmp.path().join("p.bmmp");
    run_ok(semloc()
        .args(["train", "--epochs", "0"])
        .arg("--dataset")
        .arg(&dataset)
        .arg("--maps")
        .arg(&maps)
        .arg("--out")
        .arg(&params_path)
        .arg("--config")
        .arg(&config));

    // Rewrite the index to claim zero samples.
    let index_path = dataset.join("dataset.json");
    let mut index: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&index_path).unwrap()).unwrap();
    index["n"] = serde_json::json!(0);
    fs::write(&index_path, serde_json::to_string_pretty(&index).unwrap()).unwrap();

    let out = semloc()
        .args(["eval"])
        .arg("--dataset")
        .arg(&dataset)
        .arg("--maps")
        .arg(&maps)
        .arg("--params")
        .arg(&params_path)
        .arg("--out")
        .arg(tmp.path().join("e"))
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "undefined metric must exit 3");
}

#[test]
fn corrupt_params_magic_reports_expected_and_found() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, maps, dataset) = build_fixture(tmp.path());
    let bogus = tmp.path().join("bogus.bmmp");
    fs::write(&bogus, b"XXXX0123456789").unwrap();
    let out = semloc()
        .args(["--json-errors", "eval"])
        .arg("--dataset")
        .arg(&dataset)
        .arg("--maps")
        .arg(&maps)
        .arg("--params")
        .arg(&bogus)
        .arg("--out")
        .arg(tmp.path().join("e"))
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let value: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(value["error"]["expected"], "BMMP");
    assert_eq!(value["error"]["found"], "XXXX");
}

/// The committed golden file pins the localize output for a fixture
/// sample; regenerate with UPDATE_GOLDEN=1 when the pipeline genuinely
/// changes.
#[test]
fn localize_matches_committed_golden_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, maps, dataset) = build_fixture(tmp.path());
    let params_path = tmp.path().join("g.bmmp");
    run_ok(semloc()
        .args(["train", "--seed", "4"])
        .arg("--dataset")
        .arg(&dataset)
        .arg("--maps")
        .arg(&maps)
        .arg("--out")
        .arg(&params_path)
        .arg("--config")
        .arg(&config));

    let map_png = semloc::formats::list_maps(&maps).unwrap().remove(0);
    let sample_dir = dataset.join("samples").join("sample_000002");
    let out = run_ok(semloc()
        .args(["localize", "--seed", "11"])
        .arg("--sample")
        .arg(&sample_dir)
        .arg("--map")
        .arg(&map_png)
        .arg("--params")
        .arg(&params_path)
        .arg("--config")
        .arg(&config));
    let text = String::from_utf8(out.stdout).unwrap();

    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/localize.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden_path.parent().unwrap()).unwrap();
        fs::write(&golden_path, &text).unwrap();
    }
    let golden = fs::read_to_string(&golden_path).expect("committed golden file");
    assert_eq!(text, golden, "localize output drifted from the golden file");
}
