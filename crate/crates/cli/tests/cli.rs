use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn oodkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!(
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const QUICK: [&str; 4] = ["--set", "train.epochs=3", "--set", "generation.num_seeds=300"];

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = oodkit(&["synth", "--out-dir", s(&data)]);
    assert!(out.status.success(), "{}", text(&out));
    data
}

#[test]
fn synth_pipeline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let config = data.join("config.toml");
    let runs = dir.path().join("runs");
    let mut args = vec!["pipeline", "--config", s(&config), "--out-dir", s(&runs), "--seed", "2"];
    args.extend(QUICK);
    let out = oodkit(&args);
    assert!(out.status.success(), "{}", text(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for tag in ["MSP", "MSP+ER", "MSP+ER+PPLM"] {
        assert!(stdout.contains(tag), "{stdout}");
    }
    for sub in ["msp", "msp-er", "msp-er-pplm"] {
        for f in ["config.resolved.json", "scores.csv", "metrics.json", "calibration.json", "report.csv", "experiment.json"] {
            assert!(runs.join(sub).join(f).is_file(), "{sub}/{f}");
        }
    }
    for f in ["candidates.jsonl", "filter.json", "bow.txt"] {
        assert!(runs.join("msp-er-pplm").join(f).is_file(), "{f}");
    }
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs.join("msp").join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 2);
    assert_eq!(resolved["train"]["epochs"], 3);

    let table = dir.path().join("table");
    let out = oodkit(&["report", s(&runs.join("msp")), s(&runs.join("msp-er-pplm")), "--out-dir", s(&table)]);
    assert!(out.status.success(), "{}", text(&out));
    let csv = std::fs::read_to_string(table.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let config = data.join("config.toml");
    let c = s(&config);
    let step = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--config", c]);
        all.extend(QUICK);
        let out = oodkit(&all);
        assert!(out.status.success(), "{args:?}\n{}", text(&out));
        out
    };
    let gen_dir = dir.path().join("gen");
    step(&["generate", "--out-dir", s(&gen_dir)]);
    let cands = gen_dir.join("candidates.jsonl");
    let filt = dir.path().join("filt");
    step(&["filter", "--candidates", s(&cands), "--out-dir", s(&filt)]);
    let kept = filt.join("kept.jsonl");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(filt.join("filter.json")).unwrap()).unwrap();
    assert_eq!(report["bypassed"], false);

    let bypass = dir.path().join("bypass");
    step(&["filter", "--candidates", s(&cands), "--skip-filter", "--out-dir", s(&bypass)]);
    let all = std::fs::read_to_string(bypass.join("kept.jsonl")).unwrap().lines().count();
    assert_eq!(all, std::fs::read_to_string(&cands).unwrap().lines().count());

    let model_dir = dir.path().join("model");
    step(&["train", "--ood", s(&kept), "--out-dir", s(&model_dir)]);
    let model = model_dir.join("model.json");
    let det = dir.path().join("det");
    step(&["detect", "--model", s(&model), "--out-dir", s(&det)]);
    let ev = dir.path().join("ev");
    let out = oodkit(&["evaluate", "--scores", s(&det.join("scores.csv")), "--out-dir", s(&ev)]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(ev.join("metrics.json").is_file());
    step(&["detect", "--model", s(&model), "--input", s(&data.join("ood_eval.jsonl")), "--out-dir", s(&det)]);
    assert!(det.join("detections.csv").is_file());
    let full = dir.path().join("full");
    step(&["evaluate", "--model", s(&model), "--out-dir", s(&full)]);
    assert!(full.join("calibration.json").is_file());
}

#[test]
fn calibrate_from_text_files() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.txt");
    let labels = dir.path().join("labels.txt");
    let mut p = String::new();
    let mut l = String::new();
    for i in 0..60 {
        let y = i % 3;
        let row: Vec<String> = (0..3).map(|c| if c == y { "0.8" } else { "0.1" }.to_string()).collect();
        p.push_str(&row.join(" "));
        p.push('\n');
        l.push_str(&format!("{}\n", if i % 5 == 0 { (y + 1) % 3 } else { y }));
    }
    std::fs::write(&preds, p).unwrap();
    std::fs::write(&labels, l).unwrap();
    let out_dir = dir.path().join("cal");
    let out = oodkit(&["calibrate", "--preds", s(&preds), "--labels", s(&labels), "--auto-lambda", "--out-dir", s(&out_dir)]);
    assert!(out.status.success(), "{}", text(&out));
    let cal: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(cal["k"], 3);
    assert!(cal["val_nll"].as_f64().unwrap().is_finite());
    assert!([0.0, 1e-3, 1e-2, 1e-1].contains(&cal["lambda"].as_f64().unwrap()));

    let out = oodkit(&["calibrate", "--preds", s(&preds), "--labels", s(&labels), "--lambda", "-1", "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = oodkit(&["pipeline", "--config", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));

    let data = synth(dir.path());
    let config = data.join("config.toml");
    let out = oodkit(&["pipeline", "--config", s(&config), "--set", "train.learning_rate=-1", "--out-dir", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    let out = oodkit(&["pipeline", "--config", s(&config), "--method", "ODIN", "--out-dir", s(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));

    let mut args = vec![
        "pipeline", "--config", s(&config), "--method", "MSP+ER+PPLM",
        "--set", "filter.mode=\"absolute\"", "--set", "filter.width=1e-12",
        "--out-dir",
    ];
    let z = dir.path().join("z");
    args.push(s(&z));
    args.extend(QUICK);
    let out = oodkit(&args);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
}

#[test]
fn leakage_is_flagged_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let config = data.join("config.toml");
    let eval = data.join("ood_eval.jsonl");
    let set = format!("data.ood_train=\"{}\"", s(&eval));
    let mut args = vec!["pipeline", "--config", s(&config), "--method", "MSP+ER", "--set", &set, "--out-dir"];
    let out_dir = dir.path().join("runs");
    args.push(s(&out_dir));
    args.extend(QUICK);
    let out = oodkit(&args);
    assert!(out.status.success(), "{}", text(&out));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data leakage"), "{}", text(&out));
}

#[test]
fn sweep_tabulates_each_value() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let config = data.join("config.toml");
    let out_dir = dir.path().join("sweep");
    let mut args = vec![
        "sweep", "--config", s(&config), "--key", "train.alpha", "--values", "0,1",
        "--method", "MSP+ER", "--out-dir", s(&out_dir),
    ];
    args.extend(QUICK);
    let out = oodkit(&args);
    assert!(out.status.success(), "{}", text(&out));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[1].starts_with("train.alpha,0,MSP+ER,"));
    assert!(out_dir.join("train.alpha=1").join("experiment.json").is_file());
}

#[test]
fn generate_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let bow = dir.path().join("bow.txt");
    std::fs::write(&bow, "star1 2.0\nstar2\n").unwrap();
    let out_dir = dir.path().join("gen");
    let out = oodkit(&[
        "generate", "--config", s(&data.join("config.toml")),
        "--n", "40", "--samples", "2", "--beta", "3", "--max-len", "10",
        "--bow-file", s(&bow), "--out-dir", s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let lines = std::fs::read_to_string(out_dir.join("candidates.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 80);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["text"].as_str().unwrap().split_whitespace().count() <= 10);
        assert!(v["seed_source_id"].is_u64() && v["rng_stream"].is_u64());
    }
    let resolved = std::fs::read_to_string(out_dir.join("config.resolved.json")).unwrap();
    assert!(resolved.contains("\"beta\": 3.0"), "{resolved}");
}
