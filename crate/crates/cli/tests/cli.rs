use std::path::Path;
use std::process::{Command, Output};

fn exprtree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exprtree"))
        .args(args)
        .env("EXPRTREE_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: &str) -> std::path::PathBuf {
    let data = dir.join("d.jsonl");
    let o = exprtree(&["synth", "--n", n, "--seed", "7", "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    data
}

#[test]
fn synth_then_compile_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "100");
    let mix = stdout(&exprtree(&["synth", "--n", "100", "--seed", "7", "--out", p(&dir.path().join("e.jsonl"))]));
    assert!(mix.starts_with("structure,fraction\n"));
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(dir.path().join("e.jsonl")).unwrap());

    let o = exprtree(&["compile-labels", "--k", "6", "--input", p(&data)]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 100);
    let first: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert!(first["layers"][0].as_array().unwrap().len() == 6);

    let labels = dir.path().join("labels.jsonl");
    let o = exprtree(&["compile-labels", "--k", "2", "--input", p(&data), "--out", p(&labels)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(labels).unwrap().lines().count(), 100);
}

#[test]
fn stats_prints_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "50");
    let o = exprtree(&["stats", "--input", p(&data)]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "method,avg,std,max");
    assert_eq!(lines.len(), 5);
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["seq2seq", "seq2tree", "seq2exp", "exprtree"]);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(exprtree(&["eval", "--input", "x.jsonl"]).status.code(), Some(1));
    assert_eq!(exprtree(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(exprtree(&[]).status.code(), Some(1));
    assert_eq!(exprtree(&["stats", "--input", "x", "--k", "0"]).status.code(), Some(1));
    assert_eq!(exprtree(&["eval", "--checkpoint", "/nonexistent/ckpt", "--input", "x"]).status.code(), Some(1));
    assert_eq!(exprtree(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"x\",\"text\":\"N0 N1\",\"numbers\":[2,3],\"equation\":\"N0+N1\",\"answer\":6}\n").unwrap();
    assert_eq!(exprtree(&["stats", "--input", p(&bad)]).status.code(), Some(2));
    std::fs::write(&bad, "not json\n").unwrap();
    assert_eq!(exprtree(&["compile-labels", "--input", p(&bad)]).status.code(), Some(2));
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(exprtree(&["stats", "--input", p(&missing)]).status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let o = exprtree(&["grad-check", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let out = stdout(&o);
    assert!(out.starts_with("checked,max_rel_error,worst_param,verdict\n"));
    assert!(out.trim_end().ends_with(",pass"));
}

#[test]
fn train_then_analyse() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "40");
    let config = dir.path().join("config.txt");
    std::fs::write(&config, "d=16\nn_heads=2\nencoder_depth=1\nk=4\nmax_layers=5\nepochs=2\nbatch_size=8\n").unwrap();
    let ckpt = dir.path().join("ckpt");
    let o = exprtree(&["train", "--config", p(&config), "--data", p(&data), "--dev", p(&data), "--out", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).starts_with("seed,best_epoch,best_dev_accuracy\n"));
    for f in ["model.ckpt", "config.txt", "vocab.txt", "constants.txt", "report.json"] {
        assert!(ckpt.join(f).exists(), "{f}");
    }

    let eval = exprtree(&["eval", "--checkpoint", p(&ckpt), "--input", p(&data)]);
    assert_eq!(eval.status.code(), Some(0));
    let report = stdout(&eval);
    assert!(report.starts_with("metric,value\ninstances,40\n"));
    assert!(report.contains("\ntree_answer_accuracy,"));
    // Byte-identical on a second run.
    assert_eq!(stdout(&exprtree(&["eval", "--checkpoint", p(&ckpt), "--input", p(&data)])), report);

    let infer = stdout(&exprtree(&["infer", "--checkpoint", p(&ckpt), "--input", p(&data)]));
    assert_eq!(infer.lines().count(), 40);
    for line in infer.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["id"].is_string());
    }

    let demo = exprtree(&["match-demo", "--checkpoint", p(&ckpt), "--input", p(&data), "--layer", "0"]);
    assert_eq!(demo.status.code(), Some(0), "{demo:?}");
    let text = stdout(&demo);
    assert!(text.starts_with("gold,p0,p1,p2,p3\n"));
    assert!(text.contains("\nmatching,total_cost,set_loss\nbipartite,"));
    let far = exprtree(&["match-demo", "--checkpoint", p(&ckpt), "--input", p(&data), "--layer", "9"]);
    assert_eq!(far.status.code(), Some(1));
    let unknown = exprtree(&["match-demo", "--checkpoint", p(&ckpt), "--input", p(&data), "--id", "nope"]);
    assert_eq!(unknown.status.code(), Some(2));

    let attn = dir.path().join("attn");
    let o = exprtree(&["export-attn", "--checkpoint", p(&ckpt), "--input", p(&data), "--out", p(&attn)]);
    let files = stdout(&o).lines().count() - 1;
    match o.status.code() {
        Some(0) => assert_eq!(std::fs::read_dir(&attn).unwrap().count(), files),
        // An untrained decoder may emit nothing at its first layer.
        other => assert_eq!(other, Some(3), "{o:?}"),
    }
}

#[test]
fn sweep_writes_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "20");
    let config = dir.path().join("config.txt");
    std::fs::write(&config, "d=8\nn_heads=2\nencoder_depth=1\nmax_layers=5\nepochs=1\n").unwrap();
    let out = dir.path().join("sweep");
    let o = exprtree(&[
        "train", "--config", p(&config), "--data", p(&data), "--dev", p(&data), "--out", p(&out), "--sweep-k", "1,3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("k,dev_accuracy,error\n1,"));
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap(), csv);
}
