use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slimkws::checkpoint::{Container, CONFIG_KEY};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_slimkws"));
    c.env("RUST_LOG", "warn").env_remove("SLNK_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

const SMALL: &str = "\
[model]
preset = desk-cnn

[train]
epochs = 2
batch_size = 16
lr = 0.003
log_every = 1
out_dir = run

[data]
source = synth
synth_classes = 4
per_class = 12
test_fraction = 0.25
validation_fraction = 0.2

[profile]
batch_size = 2
warmup_steps = 1
timed_steps = 3
";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report_rows(p: &Path) -> Vec<serde_json::Value> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
    v["rows"].as_array().unwrap().clone()
}

fn metric_rows(report: &Path) -> Vec<(f64, f64)> {
    report_rows(report)
        .iter()
        .map(|r| (r["loss"].as_f64().unwrap(), r["accuracy"].as_f64().unwrap()))
        .collect()
}

#[test]
fn synth_data_writes_a_deterministic_tree() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ok(run(&["synth-data", "--out", path(out), "--classes", "4", "--per-class", "10", "--seed", "3"]));
        assert!(stdout(&o).contains("40"));
    }
    let mut labels: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    labels.sort();
    assert_eq!(labels, vec!["class_00", "class_01", "class_02", "class_03"]);
    for l in &labels {
        let files: Vec<_> = fs::read_dir(a.join(l)).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(files.len(), 10);
        for f in files {
            let twin = b.join(l).join(f.file_name().unwrap());
            assert_eq!(fs::read(&f).unwrap(), fs::read(twin).unwrap());
        }
    }
    let listing = slimkws::data::list_speech_commands(&a, None).unwrap();
    assert_eq!(listing.classes.len(), 4);
    assert_eq!(listing.total(), 40);

    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = run(&["synth-data", "--out", path(&blocker.join("sub")), "--per-class", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.ini", SMALL);
    let o = ok(run(&["train", "--config", path(&cfg)]));
    let out = dir.path().join("run");
    let ckpt = out.join("model.slnk");
    assert!(ckpt.exists() && out.join("model.slnk.best").exists());
    assert_eq!(report_rows(&out.join("report.json")).len(), 4);
    assert!(out.join("report.txt").exists());
    assert!(stdout(&o).contains("width"));
    let log = fs::read_to_string(out.join("train.jsonl")).unwrap();
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    let c = Container::read(&ckpt).unwrap();
    assert!(c.get_text(CONFIG_KEY).unwrap().unwrap().contains("[train]"));

    // eval is repeatable
    let (r1, r2) = (dir.path().join("e1.json"), dir.path().join("e2.json"));
    for r in [&r1, &r2] {
        ok(run(&["eval", "--config", path(&cfg), "--ckpt", path(&ckpt), "--width", "all", "--report", path(r)]));
    }
    assert_eq!(report_rows(&r1).len(), 4);
    assert_eq!(metric_rows(&r1), metric_rows(&r2));
    let super_rows = metric_rows(&r1);

    // exported sub-networks evaluate like the super-network at their width
    for (i, w) in ["1.0", "0.75", "0.5", "0.25"].iter().enumerate() {
        let sub = dir.path().join(format!("sub{w}.slnk"));
        let o = ok(run(&["export", "--ckpt", path(&ckpt), "--width", w, "--out", path(&sub)]));
        assert!(stdout(&o).contains("params"));
        let r = dir.path().join(format!("sub{w}.json"));
        ok(run(&["eval", "--config", path(&cfg), "--ckpt", path(&sub), "--width", "1.0", "--report", path(&r)]));
        assert_eq!(metric_rows(&r), vec![super_rows[i]], "width {w}");
    }

    // re-exporting an export is byte-identical
    let once = dir.path().join("sub0.5.slnk");
    let twice = dir.path().join("again.slnk");
    ok(run(&["export", "--ckpt", path(&once), "--width", "1", "--out", path(&twice)]));
    assert_eq!(fs::read(&once).unwrap(), fs::read(&twice).unwrap());

    let o = run(&["eval", "--config", path(&cfg), "--ckpt", path(&ckpt), "--width", "0.3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("0.75"), "{}", stderr(&o));
    let o = run(&["export", "--ckpt", path(&ckpt), "--width", "0.6", "--out", path(&dir.path().join("x.slnk"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn binary_task_reports_false_accepts() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("synth_classes = 4", "synth_classes = 2\npositive_class = class_01\ntarget_miss = 0.1");
    let cfg = write_config(dir.path(), "bin.ini", &text);
    ok(run(&["train", "--config", path(&cfg)]));
    let rows = report_rows(&dir.path().join("run/report.json"));
    assert!(rows.iter().all(|r| r["false_accepts"].is_u64()));
    assert_eq!(rows[0]["relative_fa"].as_f64(), Some(1.0));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = write_config(dir.path(), "full.ini", &SMALL.replace("out_dir = run", "out_dir = full"));
    let part = write_config(dir.path(), "part.ini", &SMALL.replace("out_dir = run", "out_dir = part"));
    ok(run(&["train", "--config", path(&full)]));
    ok(run(&["train", "--config", path(&part), "--max-steps", "3"]));
    let ckpt = dir.path().join("part/model.slnk");
    assert_eq!(Container::read(&ckpt).unwrap().get_u64("meta/step").unwrap(), Some(3));
    ok(run(&["train", "--config", path(&part), "--resume", path(&ckpt)]));

    let a = Container::read(&dir.path().join("full/model.slnk")).unwrap();
    let b = Container::read(&ckpt).unwrap();
    let tensors = |c: &Container| -> Vec<(String, Vec<u32>)> {
        c.entries()
            .iter()
            .filter(|(n, _)| n != CONFIG_KEY)
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    assert_eq!(tensors(&a), tensors(&b));
    assert_eq!(metric_rows(&dir.path().join("full/report.json")), metric_rows(&dir.path().join("part/report.json")));
}

#[test]
fn user_errors_exit_with_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "missing.ini",
        "[data]\nsource = speech_commands\nroot = no/such/dir\n[train]\nout_dir = out\n",
    );
    let o = run(&["train", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("no/such/dir"));
    assert!(!dir.path().join("out").exists());

    let cfg = write_config(dir.path(), "typo.ini", "[train]\nepochs = 1\nbatchsize = 4\n");
    let o = run(&["train", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = run(&["train", "--config", path(&dir.path().join("absent.ini"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["synth-data", "--out", path(&dir.path().join("t")), "--per-class", "1"]).env("SLNK_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(0), "synth-data does not featurize");
    let o = bin().args(["train", "--config", path(&write_config(dir.path(), "ok.ini", SMALL))]).env("SLNK_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn profile_reports_unit_ratio_for_one_width() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.ini", SMALL);
    let report = dir.path().join("profile.json");
    let o = ok(run(&["profile", "--config", path(&cfg), "--widths", "1,2", "--report", path(&report)]));
    assert!(stdout(&o).contains("1.000"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["ratio"].as_f64(), Some(1.0));
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for t in ["1", "3"] {
        let cfg = write_config(dir.path(), &format!("t{t}.ini"), &SMALL.replace("out_dir = run", &format!("out_dir = t{t}")));
        let o = bin().args(["train", "--config", path(&cfg)]).env("SLNK_THREADS", t).output().unwrap();
        ok(o);
        reports.push(metric_rows(&dir.path().join(format!("t{t}/report.json"))));
    }
    assert_eq!(reports[0], reports[1]);
}
