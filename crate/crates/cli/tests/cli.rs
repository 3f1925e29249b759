use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbf")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cbf(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn simulate(dir: &Path, seed: &str, mics: &str) {
    let d = dir.to_str().unwrap();
    ok(&["simulate", "--mics", mics, "--sources", "2", "--taps", "300", "--decay-ms", "100", "--seed", seed, "--duration", "1.5", "--out", d]);
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn nn_guided_without_prior_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "1", "3");
    let input = dir.path().join("mixture.wav");
    let out = cbf(&["separate", "--input", input.to_str().unwrap(), "--out-dir", "x", "--sources", "2", "--mode", "nn-guided"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--prior"));
}

#[test]
fn too_many_sources_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "1", "3");
    let input = dir.path().join("mixture.wav");
    let out_dir = dir.path().join("sep");
    let out = cbf(&["separate", "--input", input.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap(), "--sources", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());

    let out = cbf(&["simulate", "--mics", "2", "--sources", "2", "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), "7", "3");
    simulate(b.path(), "7", "3");
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let expected = ["dry_1.wav", "dry_2.wav", "image_1.wav", "image_2.wav", "mixture.wav", "prior.cbfp"];
    assert_eq!(names, expected.map(std::ffi::OsString::from));
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn separate_is_deterministic_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "3", "3");
    let input = dir.path().join("mixture.wav");
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let report = dir.path().join(format!("{name}.json"));
        ok(&[
            "separate", "--input", input.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap(), "--sources", "2",
            "--wpe-iters", "2", "--ive-iters", "6", "--seed-report", report.to_str().unwrap(),
        ]);
        (out_dir, report)
    };
    let (a, ra) = run("a");
    let (b, rb) = run("b");
    for name in ["source_1.wav", "source_2.wav"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let (mut ja, mut jb) = (json(&ra), json(&rb));
    for key in ["likelihood", "passes", "wall_ms", "config"] {
        assert!(ja.get(key).is_some(), "missing {key}");
    }
    assert_eq!(ja["passes"], 6);
    assert_eq!(ja["likelihood"].as_array().unwrap().len(), 6);
    ja.as_object_mut().unwrap().remove("wall_ms");
    jb.as_object_mut().unwrap().remove("wall_ms");
    assert_eq!(ja, jb);
}

#[test]
fn default_iteration_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&["simulate", "--mics", "2", "--sources", "1", "--taps", "50", "--seed", "2", "--duration", "0.3", "--out", d]);
    let input = dir.path().join("mixture.wav");
    let out_dir = dir.path().join("sep");
    ok(&["separate", "--input", input.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap(), "--sources", "1"]);
    let report = json(&out_dir.join("diagnostics.json"));
    assert_eq!(report["config"]["wpe_iters"], 10);
    assert_eq!(report["config"]["ive_iters"], 100);
    assert_eq!(report["passes"], 100);
    assert_eq!(report["wpe_passes"], 10);
}

#[test]
fn nn_guided_with_simulated_prior() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "4", "3");
    let input = dir.path().join("mixture.wav");
    let prior = dir.path().join("prior.cbfp");
    let out_dir = dir.path().join("sep");
    ok(&[
        "separate", "--input", input.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap(), "--sources", "2",
        "--mode", "nn-guided", "--prior", prior.to_str().unwrap(), "--wpe-iters", "1", "--ive-iters", "3",
    ]);
    assert!(out_dir.join("source_2.wav").exists());
    assert_eq!(json(&out_dir.join("diagnostics.json"))["config"]["mode"], "nn-guided");

    // A prior whose dimensions do not match the input is rejected.
    let wrong = cbf(&[
        "separate", "--input", input.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap(), "--sources", "1",
        "--mode", "nn-guided", "--prior", prior.to_str().unwrap(),
    ]);
    assert!(!wrong.status.success());
}

#[test]
fn evaluate_prints_metrics() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "5", "3");
    let dry = dir.path().join("dry_1.wav");
    let out = ok(&["evaluate", "--estimate", dry.to_str().unwrap(), "--reference", dry.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let scores = &v["channels"][0];
    assert_eq!(scores["si_sdr"], 60.0);
    assert_eq!(scores["fwssnr"], 35.0);
    assert_eq!(scores["cd"], 0.0);

    let image = dir.path().join("image_1.wav");
    let mismatch = cbf(&["evaluate", "--estimate", image.to_str().unwrap(), "--reference", dry.to_str().unwrap()]);
    assert!(!mismatch.status.success());

    let out = ok(&["evaluate", "--estimate", dry.to_str().unwrap(), "--reference", dry.to_str().unwrap(), "--metrics", "cd"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["channels"][0].as_object().unwrap().len(), 1);
}
