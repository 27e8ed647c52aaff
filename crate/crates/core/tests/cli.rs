use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn swsl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swsl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = swsl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

fn small_synth(dir: &Path, extra: &str) {
    std::fs::write(
        dir.join("s.json"),
        format!(
            r#"{{"num_supervised_pos":10,"num_supervised_neg":10,"num_pos_bags":6,"num_neg_bags":6,"bag_size":5{extra}}}"#
        ),
    )
    .unwrap();
    ok(
        dir,
        &[
            "synth", "--config", "s.json", "--seed", "9", "--out", "d.json", "--truth", "t.json",
        ],
    );
}

#[test]
fn missing_file_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = swsl(
        dir.path(),
        &[
            "train",
            "--method",
            "graphswsl",
            "--data",
            "absent.json",
            "--out",
            "m.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        swsl(dir.path(), &["train", "--method", "bpmil"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(swsl(dir.path(), &["frobnicate"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), r#"{"kernal":{}}"#).unwrap();
    small_synth(dir.path(), "");
    let out = swsl(
        dir.path(),
        &[
            "train", "--method", "svm", "--data", "d.json", "--config", "bad.json", "--out",
            "m.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}

#[test]
fn train_graphswsl_trace_is_nonincreasing() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), r#","bag_label_noise":0.2"#);
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"graph":{"k":5},"solver":{"lambda1":0.1}}"#,
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "train",
            "--method",
            "graphswsl",
            "--data",
            "d.json",
            "--config",
            "c.json",
            "--out",
            "m.json",
        ],
    );
    let model = json(dir.path(), "m.json");
    assert_eq!(model["method"], "graphswsl");
    let trace: Vec<f64> = model["meta"]["objective_trace"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(!trace.is_empty());
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-8, "{trace:?}");
    }
}

#[test]
fn naive_swsl_without_bags_matches_svm() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("s.json"),
        r#"{"num_supervised_pos":15,"num_supervised_neg":15,"num_pos_bags":0,"num_neg_bags":0}"#,
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "synth", "--config", "s.json", "--out", "d.json", "--truth", "t.json",
        ],
    );
    for m in ["naive_swsl", "svm"] {
        ok(
            dir.path(),
            &[
                "train",
                "--method",
                m,
                "--data",
                "d.json",
                "--out",
                &format!("{m}.json"),
            ],
        );
        ok(
            dir.path(),
            &[
                "predict",
                "--model",
                &format!("{m}.json"),
                "--data",
                "d.json",
                "--out",
                &format!("p_{m}.json"),
            ],
        );
    }
    let a = json(dir.path(), "p_naive_swsl.json");
    let b = json(dir.path(), "p_svm.json");
    let (a, b) = (
        a["instances"].as_object().unwrap(),
        b["instances"].as_object().unwrap(),
    );
    assert_eq!(a.len(), 30);
    for (id, s) in a {
        let d = s.as_f64().unwrap() - b[id].as_f64().unwrap();
        assert!(d.abs() <= 1e-6, "{id}: {d}");
    }
}

#[test]
fn eval_localize_and_cv_reports() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "");
    ok(
        dir.path(),
        &[
            "train", "--method", "misvm", "--data", "d.json", "--out", "m.json",
        ],
    );
    ok(
        dir.path(),
        &[
            "eval", "--model", "m.json", "--data", "d.json", "--truth", "t.json", "--out", "e.json",
        ],
    );
    ok(
        dir.path(),
        &[
            "localize", "--model", "m.json", "--data", "d.json", "--truth", "t.json", "--class",
            "bark", "--out", "l.json",
        ],
    );
    let e = json(dir.path(), "e.json");
    let l = json(dir.path(), "l.json");
    assert_eq!(e["level"], "bag");
    assert_eq!(l["level"], "instance");
    let ap = l["per_class_ap"]["bark"].as_f64().unwrap();
    assert_eq!(l["map_value"].as_f64().unwrap(), ap);
    assert!((0.0..=1.0).contains(&ap));

    std::fs::write(
        dir.path().join("g.json"),
        r#"{"lambda1_values":[0.1,1.0],"lambda2_values":[1.0],"selection_metric":"AP"}"#,
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "cv",
            "--data",
            "d.json",
            "--folds",
            "3",
            "--method",
            "graphswsl",
            "--grid",
            "g.json",
            "--out",
            "cv.json",
        ],
    );
    let cv = json(dir.path(), "cv.json");
    assert_eq!(cv["table"].as_array().unwrap().len(), 2);
    assert_eq!(cv["num_folds"], 3);
}

#[test]
fn benchmark_has_one_row_per_method_and_noise() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("b.json"),
        r#"{"synth":{"num_supervised_pos":6,"num_supervised_neg":6,"num_pos_bags":5,"num_neg_bags":5,"bag_size":4},
            "noise_levels":[0.0,0.2,0.4],"num_runs":1,"test_pos_bags":4,"test_neg_bags":4}"#,
    )
    .unwrap();
    let out = ok(
        dir.path(),
        &[
            "benchmark",
            "--config",
            "b.json",
            "--seed",
            "2",
            "--out",
            "r.json",
        ],
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("graphswsl") && stdout.contains("seconds"));
    let r = json(dir.path(), "r.json");
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|row| row.get("seconds").is_none()));
}

#[test]
fn gmm_train_and_featurize() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("frames")).unwrap();
    for (s, offset) in [("a", 0.0), ("b", 5.0)] {
        let rows: Vec<String> = (0..20)
            .map(|i| format!("{},{}", offset + (i % 5) as f64 * 0.1, (i % 3) as f64 * 0.2))
            .collect();
        std::fs::write(dir.path().join(format!("frames/{s}.csv")), rows.join("\n")).unwrap();
    }
    ok(
        dir.path(),
        &[
            "gmm-train",
            "--frames",
            "frames",
            "--components",
            "2",
            "--seed",
            "1",
            "--out",
            "g.json",
        ],
    );
    ok(
        dir.path(),
        &[
            "featurize",
            "--gmm",
            "g.json",
            "--frames",
            "frames/a.csv",
            "--out",
            "f.json",
        ],
    );
    let f = json(dir.path(), "f.json");
    let seg = &f["segments"][0];
    assert_eq!(seg["id"], "a");
    let h: f64 = seg["histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((h - 1.0).abs() < 1e-12);
}
