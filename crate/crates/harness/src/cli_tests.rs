//! Command-line behaviour, driven in process.

use std::path::{Path, PathBuf};

use moeulab::bench::Benchmark;

use crate::cli::main_with;
use crate::report::{self, TableKind};
use crate::ExperimentConfig;

struct Output {
    code: i32,
    stdout: String,
}

impl Output {
    fn success(&self) -> bool {
        self.code == 0
    }
}

fn moeulab(args: &[&str]) -> Output {
    let mut buf = Vec::new();
    let code = main_with(std::iter::once("moeulab").chain(args.iter().copied()), &mut buf);
    Output {
        code,
        stdout: String::from_utf8(buf).unwrap(),
    }
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn small_config(dir: &Path, pretrain_steps: u64, gate: f64) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {"vocab_size": 40, "embed_dim": 8, "num_layers": 2, "experts_per_layer": 4, "top_k": 2, "ffn_hidden": 8},
        "bench": {"topics": 3, "facts_per_topic": 6, "paraphrases": 2, "vocab_size": 40, "band_width": 8,
                  "question_len": 6, "key_tokens": 2},
        "pretrain": {"max_steps": pretrain_steps, "eval_interval": 10, "batch_size": 8, "gate": gate},
        "unlearn": {"steps": 4, "batch_size": 4, "calibration_tokens": 30, "overlap_top": 2, "rmu_layer": 1},
        "eval_interval": 2
    });
    let path = dir.join(format!("small_{pretrain_steps}_{gate}.json"));
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(moeulab(&[]).code, 1);
    assert_eq!(moeulab(&["frobnicate"]).code, 1);
    assert_eq!(moeulab(&["--help"]).code, 0);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"unlern": {}}"#).unwrap();
    assert_eq!(moeulab(&["pretrain", "--config", &p(&bad), "--out", &p(tmp.path())]).code, 1);
    let missing = tmp.path().join("nope.bin");
    assert_eq!(
        moeulab(&["unlearn", "--ckpt", &p(&missing), "--out", &p(&tmp.path().join("u"))]).code,
        1
    );
    // A file where a directory is expected cannot be written into.
    let blocker = tmp.path().join("blocker");
    std::fs::write(&blocker, "x").unwrap();
    assert_eq!(moeulab(&["gen-data", "--seed", "1", "--out", &p(&blocker)]).code, 2);
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(moeulab(&["gen-data", "--seed", "7", "--out", &p(&a)]).success());
    assert!(moeulab(&["gen-data", "--seed", "7", "--out", &p(&b)]).success());
    let text = std::fs::read_to_string(a.join("benchmark.json")).unwrap();
    assert_eq!(text, std::fs::read_to_string(b.join("benchmark.json")).unwrap());
    let bench = Benchmark::from_json(&text).unwrap();
    assert_eq!(bench.params.topics, 8);
    assert_eq!(bench.facts.len(), 8 * 64);
    assert_eq!(bench.to_json().unwrap(), text);
}

#[test]
fn defaults_dump_parses_back() {
    let out = moeulab(&["defaults"]);
    assert!(out.success());
    let cfg = ExperimentConfig::from_json(&out.stdout.clone()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn pretrain_resume_is_bit_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let full = small_config(tmp.path(), 40, 0.0);
    let half = small_config(tmp.path(), 20, 0.0);
    let (direct, resumed) = (tmp.path().join("direct"), tmp.path().join("resumed"));
    assert!(moeulab(&["pretrain", "--config", &p(&full), "--out", &p(&direct)]).success());
    assert!(moeulab(&["pretrain", "--config", &p(&half), "--out", &p(&resumed)]).success());
    assert!(moeulab(&["pretrain", "--config", &p(&full), "--out", &p(&resumed), "--resume"]).success());
    for f in ["model.bin", "adam_m.bin", "adam_v.bin", "curve.csv"] {
        assert_eq!(std::fs::read(direct.join(f)).unwrap(), std::fs::read(resumed.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn pretrain_seed_changes_weights_and_gate_failure_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 10, 0.0);
    let mut other: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    other["init"] = serde_json::json!({"seed": 2});
    let other_path = tmp.path().join("other.json");
    std::fs::write(&other_path, other.to_string()).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(moeulab(&["pretrain", "--config", &p(&cfg), "--out", &p(&a)]).success());
    assert!(moeulab(&["pretrain", "--config", &p(&other_path), "--out", &p(&b)]).success());
    assert_ne!(std::fs::read(a.join("model.bin")).unwrap(), std::fs::read(b.join("model.bin")).unwrap());

    let strict = small_config(tmp.path(), 10, 1.0);
    let out = moeulab(&["pretrain", "--config", &p(&strict), "--out", &p(&tmp.path().join("c"))]);
    assert_eq!(out.code, 2);
    let state = std::fs::read_to_string(tmp.path().join("c/state.json")).unwrap();
    assert!(state.contains("\"passed_gate\": false"));
}

#[test]
fn attribute_unlearn_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 20, 0.0);
    let data = tmp.path().join("data");
    assert!(moeulab(&["gen-data", "--seed", "7", "--config", &p(&cfg), "--out", &p(&data)]).success());
    let bench = p(&data.join("benchmark.json"));
    let pre = tmp.path().join("pre");
    assert!(moeulab(&["pretrain", "--config", &p(&cfg), "--bench", &bench, "--out", &p(&pre)]).success());
    let ckpt = p(&pre.join("model.bin"));

    let att = tmp.path().join("att");
    let out = moeulab(&["attribute", "--ckpt", &ckpt, "--bench", &bench, "--tokens", "30", "--out", &p(&att)]);
    assert!(out.success());
    let line = out.stdout.clone();
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(fields.len(), 3, "{line}");
    assert!(fields[0].parse::<usize>().is_ok() && fields[1].parse::<usize>().is_ok() && fields[2].parse::<f64>().is_ok());
    for f in ["affinity.json", "assignment.csv", "long_tail.json", "plan.json"] {
        assert!(att.join(f).exists(), "{f}");
    }

    let seuf = tmp.path().join("ga_seuf");
    let naive = tmp.path().join("ga_naive");
    let random = tmp.path().join("ga_random");
    let base = ["unlearn", "--ckpt", ckpt.as_str(), "--bench", bench.as_str(), "--config"];
    let run = |extra: &[&str], out: &Path| {
        let mut args = base.to_vec();
        let c = p(&cfg);
        let o = p(out);
        args.push(&c);
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", &o]);
        moeulab(&args)
    };
    assert!(run(&["--algorithm", "ga", "--seuf"], &seuf).success());
    assert!(run(&["--algorithm", "ga", "--seuf", "false"], &naive).success());
    assert!(run(&["--algorithm", "ga", "--select", "random"], &random).success());
    for f in ["model.bin", "metrics.csv", "evals.csv", "report.json", "config.json"] {
        assert!(seuf.join(f).exists(), "{f}");
    }
    let row: crate::ReportRow =
        serde_json::from_str(&std::fs::read_to_string(naive.join("report.json")).unwrap()).unwrap();
    assert_eq!(row.method, "GA");
    assert_eq!(row.param_fraction, 1.0);

    let missing = tmp.path().join("never_ran");
    let out = moeulab(&["report", "--table", "main", "--runs", &p(&seuf), &p(&naive), &p(&missing)]);
    assert!(out.success());
    let table = out.stdout.clone();
    assert_eq!(table.lines().count(), 2 + 8);
    assert!(table.contains("absent"));
    let mut warnings = Vec::new();
    let records = report::load_runs(&[seuf.clone(), naive.clone(), missing], &mut warnings);
    assert_eq!(warnings.len(), 1);
    let t = report::build(TableKind::Main, &records, warnings);
    assert_eq!(t.rows.len(), 8);
    assert!(t.warnings.len() > 1);

    let out = moeulab(&["report", "--table", "topm", "--runs", &p(&seuf)]);
    let table = out.stdout.clone();
    for col in ["top-1 same-layer", "top-3 same-layer", "top-6 same-layer", "top-1 cross-layer", "top-3 cross-layer", "top-6 cross-layer"] {
        assert!(table.lines().next().unwrap().contains(col), "{col}");
    }
}

#[test]
fn sweep_configs_run_into_numbered_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 10, 0.0);
    let pre = tmp.path().join("pre");
    assert!(moeulab(&["pretrain", "--config", &p(&cfg), "--out", &p(&pre)]).success());
    let one: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    let mut two = one.clone();
    two["unlearn"]["algorithm"] = "npo".into();
    let sweep = tmp.path().join("sweep.json");
    std::fs::write(&sweep, serde_json::Value::Array(vec![one, two]).to_string()).unwrap();
    let out_dir = tmp.path().join("runs");
    let out = moeulab(&["unlearn", "--ckpt", &p(&pre.join("model.bin")), "--config", &p(&sweep), "--out", &p(&out_dir)]);
    assert!(out.success());
    assert!(out_dir.join("000/report.json").exists() && out_dir.join("001/report.json").exists());
}
