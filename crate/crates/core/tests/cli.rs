mod common;

use std::fs;
use std::path::Path;

use mamba_desk::bench::{read_report, ReportFormat, CSV_HEADER};
use mamba_desk::cli::run;

fn invoke(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("mamba-desk").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const TINY: &str = r#"{
  "model": { "n_layers": 1, "d_model": 8, "d_state": 4, "dt_rank": 2 },
  "schedule": { "eta_max": 1e-2, "t_warmup": 64, "t_total": 1280, "t_rampup": 256, "b_min": 2, "b_max": 4 },
  "stages": [
    { "name": "main", "tokens": 1152, "seq_len": 16 },
    { "name": "decay", "tokens": 128, "seq_len": 16, "decay": true }
  ],
  "bench": { "repetitions": 1, "warmup": 2 }
}"#;

#[test]
fn help_matches_golden_files() {
    assert_eq!(invoke(&["--help"]), (0, golden("help.txt"), String::new()));
    for sub in ["train", "generate", "bench", "schedule"] {
        let (code, out, _) = invoke(&[sub, "--help"]);
        assert_eq!(code, 0);
        assert_eq!(out, golden(&format!("{sub}-help.txt")), "{sub} --help drifted");
    }
    let (code, out, _) = invoke(&["--version"]);
    assert_eq!((code, out.trim()), (0, "mamba-desk 0.1.0"));
}

#[test]
fn usage_errors_exit_one() {
    let (code, _, err) = invoke(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"));
    let (code, _, _) = invoke(&["schedule", "--config", "x.json"]);
    assert_eq!(code, 1);
    let (code, _, _) = invoke(&["bench", "--model", "rnn", "--tokens", "4", "--record-every", "2", "--out", "x"]);
    assert_eq!(code, 1);
}

#[test]
fn config_problems_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"n_layer": 2}}"#).unwrap();
    let out = dir.path().join("s.csv");
    let (code, _, err) = invoke(&["schedule", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("n_layer"), "{err}");

    fs::write(&cfg, r#"{"schedule": {"b_min": 0}}"#).unwrap();
    let (code, _, _) = invoke(&["schedule", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);
}

#[test]
fn missing_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let missing = dir.path().join("nope.json");
    let (code, _, err) = invoke(&["schedule", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn paper_schedule_trace_ends_at_the_floor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper.json");
    let out = dir.path().join("schedule.csv");
    let (code, _, err) = invoke(&["schedule", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["t", "lr", "batch", "noise_temp"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1001);
    let last = rows.last().unwrap();
    let lr: f64 = last[1].parse().unwrap();
    assert!((lr - 2.5e-6).abs() <= 1e-12 * 2.5e-6);
    assert_eq!(&last[2], "2048");
}

#[test]
fn train_generate_and_bench_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    fs::write(p("tiny.json"), TINY).unwrap();
    fs::write(p("corpus.txt"), common::synthetic_corpus(8_000, 3)).unwrap();
    let (code, _, err) = invoke(&["train", "--config", &p("tiny.json"), "--corpus", &p("corpus.txt"), "--out", &p("run")]);
    assert_eq!(code, 0, "{err}");
    for f in ["metrics.jsonl", "pre-decay.ckpt", "final.ckpt"] {
        assert!(dir.path().join("run").join(f).exists(), "{f} missing");
    }

    let (code, _, err) = invoke(&[
        "train", "--config", &p("tiny.json"), "--corpus", &p("corpus.txt"), "--out", &p("resumed"),
        "--resume", &p("run/pre-decay.ckpt"),
    ]);
    assert_eq!(code, 0, "{err}");
    let full = fs::read_to_string(p("run/metrics.jsonl")).unwrap();
    let tail = fs::read_to_string(p("resumed/metrics.jsonl")).unwrap();
    assert!(full.ends_with(&tail) && !tail.is_empty());

    fs::write(p("prompts.txt"), "The state\nA\n").unwrap();
    for extra in [&[][..], &["--prefill", "sequential", "--chunk", "3"][..], &["--temperature", "0.7", "--seed", "4"][..]] {
        let mut args = vec!["generate", "--checkpoint", &p("run/final.ckpt"), "--prompts", &p("prompts.txt"), "--max-new", "5"]
            .into_iter()
            .map(str::to_owned)
            .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, out, err) = invoke(&refs);
        assert_eq!(code, 0, "{err}");
        let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["prompt"], "The state");
        assert!(lines[0]["completion"].is_string());
    }

    for (model, format, file) in [("mamba", "csv", "m.csv"), ("attention", "json", "a.json")] {
        let (code, _, err) = invoke(&[
            "bench", "--model", model, "--tokens", "8", "--record-every", "4", "--out", &p(file), "--format", format,
            "--config", &p("tiny.json"),
        ]);
        assert_eq!(code, 0, "{err}");
        let fmt = if format == "csv" { ReportFormat::Csv } else { ReportFormat::Json };
        let recs = read_report(Path::new(&p(file)), fmt).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(Path::new(&format!("{}.protocol.json", p(file))).exists());
    }
    let header = fs::read_to_string(p("m.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), CSV_HEADER.join(","));
}
