use std::path::Path;
use std::process::{Command, Output};

fn p3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p3d"))
        .args(args)
        .output()
        .expect("spawn p3d")
}

fn ok(args: &[&str]) -> Output {
    let out = p3d(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn probe_fixture(dir: &Path) -> std::path::PathBuf {
    ok(&["fixture", "probe", "--out", s(dir), "--train", "4", "--test", "2"]);
    dir.join("manifest.json")
}

#[test]
fn missing_feature_dir_is_a_data_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = probe_fixture(&tmp.path().join("data"));
    let missing = tmp.path().join("no_such_features");
    let out = p3d(&[
        "probe-train",
        "--manifest",
        s(&manifest),
        "--features",
        s(&missing),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains(s(&missing)), "{}", stderr(&out));
}

#[test]
fn corrupt_feature_file_reports_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = probe_fixture(&tmp.path().join("data"));
    let f = tmp.path().join("data/features/img0000.p3df");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() - 7]).unwrap();
    let out = p3d(&[
        "probe-train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("o")),
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("byte offset"), "{}", stderr(&out));
}

#[test]
fn same_seed_reproduces_metrics_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = probe_fixture(&tmp.path().join("data"));
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "probe-train",
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--hidden",
            "8",
            "--epochs",
            "2",
            "--seed",
            seed,
        ]);
        (
            std::fs::read(out.join("metrics.csv")).unwrap(),
            std::fs::read(out.join("probe.p3dc")).unwrap(),
        )
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a.1, run("c", "6").1);
}

#[test]
fn config_file_supplies_paths_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    probe_fixture(&tmp.path().join("data"));
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "manifest = \"data/manifest.json\"\nout = \"from_config\"\n[probe]\ntask = \"normals\"\nhidden_width = 8\n[optim]\ntotal_epochs = 1\n",
    )
    .unwrap();
    ok(&["probe-train", "--config", s(&cfg)]);
    let metrics = std::fs::read_to_string(tmp.path().join("from_config/metrics.csv")).unwrap();
    assert!(metrics.contains(",normals,data,"), "{metrics}");

    let flagged = tmp.path().join("flagged");
    ok(&[
        "probe-train",
        "--config",
        s(&cfg),
        "--out",
        s(&flagged),
        "--task",
        "depth",
    ]);
    let metrics = std::fs::read_to_string(flagged.join("metrics.csv")).unwrap();
    assert!(metrics.contains(",depth,data,,,delta1,"), "{metrics}");
    let log = std::fs::read_to_string(flagged.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = probe_fixture(&tmp.path().join("data"));
    let o = tmp.path().join("o");
    assert_eq!(p3d(&["probe-train", "--manifest", s(&manifest)]).status.code(), Some(2));
    assert_eq!(
        p3d(&["corr-eval", "--manifest", s(&manifest), "--out", s(&o), "--bins", "nyu"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(p3d(&["selftest", "--jobs", "0"]).status.code(), Some(2));
    assert_eq!(p3d(&["probe-train", "--bogus"]).status.code(), Some(2));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seeed = 1\n").unwrap();
    assert_eq!(p3d(&["selftest", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn analyze_rates_models_and_excludes_incomplete_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("r.csv");
    std::fs::write(
        &report,
        "model_id,task_id,domain_id,block_id,bin_id,metric,value,higher_is_better\n\
         a,depth,nyu,,,delta1,90,true\na,depth,nyu,,,rmse,0.3,false\n\
         b,depth,nyu,,,delta1,80,true\nb,depth,nyu,,,rmse,0.4,false\n\
         c,depth,nyu,,,delta1,70,true\nc,depth,nyu,,,rmse,0.5,false\n\
         d,depth,nyu,,,delta1,99,true\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("an");
    let out = ok(&[
        "analyze",
        "--input",
        s(&report),
        "--out",
        s(&out_dir),
        "--task",
        "depth/nyu/delta1",
        "--task",
        "depth/nyu/rmse",
    ]);
    assert!(stderr(&out).contains("`d`"), "{}", stderr(&out));
    let ratings = std::fs::read_to_string(out_dir.join("ratings.csv")).unwrap();
    assert_eq!(ratings, "model_id,rating\na,1\nb,0.5\nc,0\n");
    let corr = std::fs::read_to_string(out_dir.join("correlation.csv")).unwrap();
    assert_eq!(corr.lines().nth(1).unwrap(), "depth/nyu/delta1,1,-1");

    let lone = tmp.path().join("lone.csv");
    std::fs::write(
        &lone,
        "model_id,task_id,domain_id,block_id,bin_id,metric,value,higher_is_better\na,depth,nyu,,,delta1,90,true\n",
    )
    .unwrap();
    let out = p3d(&["analyze", "--input", s(&lone), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(
        p3d(&[
            "analyze",
            "--input",
            s(&report),
            "--out",
            s(&out_dir),
            "--task",
            "depth"
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn corr_eval_needs_pair_angles() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("c");
    ok(&["fixture", "correspondence", "--out", s(&data)]);
    let path = data.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    for item in m["items"].as_array_mut().unwrap() {
        item.as_object_mut().unwrap().remove("pose");
    }
    m["pairs"][0].as_object_mut().unwrap().remove("angle_deg");
    std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
    let out = p3d(&["corr-eval", "--manifest", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("angle"), "{}", stderr(&out));
}

#[test]
fn selftest_fault_injection_fails_with_exit_1() {
    let out = p3d(&["selftest", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL grad/conv2d"), "{stdout}");
    assert!(stderr(&out).contains("grad/conv2d"));
}
