use std::path::Path;
use std::process::{Command, Output};

use affinitynet_cli::report::read_table;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_affinitynet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn table(dir: &Path, name: &str) -> (Vec<String>, Vec<Vec<String>>) {
    read_table(&std::fs::read_to_string(dir.join(name)).unwrap())
}

const SMALL_SYNTHETIC: &str = "n_per_cluster = 30\ntrain_fraction = 0.1\n[model]\nhidden = 8\nk = 5\n[train]\nepochs = 5\n";

#[test]
fn gradcheck_passes_and_reports_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = run(&["gradcheck", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = table(&out, "summary.tsv");
    assert_eq!(header, ["check", "max_rel_error", "passed"]);
    assert_eq!(rows.len(), affinitynet::gradsuite::check_names().len());
    for r in rows {
        assert!(r[1].parse::<f64>().unwrap() <= 1e-4);
        assert_eq!(r[2], "true");
    }
    let (_, checks) = table(&out, "checks.tsv");
    assert_eq!(checks.len(), 3 * affinitynet::gradsuite::check_names().len());
}

#[test]
fn corrupted_gradient_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", "corrupt = \"knn_pooling_perceptron\"\n");
    let out = dir.path().join("g");
    let o = run(&["gradcheck", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL\tknn_pooling_perceptron"));
    assert!(stdout.contains("PASS\tcox_nll"));
}

#[test]
fn unknown_keys_and_bad_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    for (cmd, text) in [
        ("synthetic", "sed = 1\n"),
        ("classify", "[data]\nsource = \"two_class\"\nwidth = 3\n"),
        ("survival", "[train]\nlr = 0.1\n"),
        ("cluster", "train_fraction = 0.0\n"),
        ("classify", "reps = 3\ntop = 4\n"),
        ("gradcheck", "corrupt = \"no_such_check\"\n"),
    ] {
        let cfg = write(dir.path(), "bad.toml", text);
        let o = run(&[cmd, "--config", &cfg, "--out", out]);
        assert_eq!(code(&o), 1, "{cmd}: {text}");
    }
    assert_eq!(code(&run(&["synthetic", "--reps", "many"])), 1);
    assert_eq!(code(&run(&["nonsense"])), 1);
    assert!(!Path::new(out).exists(), "nothing is written before validation");
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "d.toml",
        &format!("{SMALL_SYNTHETIC}learning_rate = 1e300\n[train.optimizer]\nkind = \"sgd\"\n"),
    );
    let out = dir.path().join("o");
    let o = run(&["synthetic", "--config", &cfg, "--reps", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn failed_threshold_exits_3_only_with_assert() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", "n_per_cluster = 30\n[model]\nhidden = 4\nk = 3\n[train]\nepochs = 1\nlearning_rate = 1e-6\n");
    let out = dir.path().join("o");
    let args = ["synthetic", "--config", &cfg, "--reps", "1", "--out", out.to_str().unwrap()];
    assert_eq!(code(&run(&args)), 0);
    let mut with_assert = args.to_vec();
    with_assert.push("--assert");
    let o = run(&with_assert);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL_SYNTHETIC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["synthetic", "--config", &cfg, "--reps", "3", "--seed", "11", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for name in names {
        let x = std::fs::read(a.join(&name)).unwrap();
        let y = std::fs::read(b.join(&name)).unwrap();
        assert_eq!(x, y, "{name:?} differs");
    }
}

#[test]
fn synthetic_report_contents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL_SYNTHETIC);
    let out = dir.path().join("o");
    let o = run(&["synthetic", "--config", &cfg, "--reps", "2", "--seed", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let echoed = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 5") && echoed.contains("reps = 2") && echoed.contains("n_per_cluster = 30"));
    let runs = std::fs::read_to_string(out.join("runs.tsv")).unwrap();
    assert!(runs.contains("#   seed = 5"), "config echoed into tables");
    let (header, rows) = read_table(&runs);
    assert_eq!(header[..3], ["rep", "seed", "model"]);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[2][1], "6");
    let (_, weights) = table(&out, "feature_weights.tsv");
    assert_eq!(weights.len(), 2 * 42);
    let total: f64 = weights[..42].iter().map(|r| r[3].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(weights.iter().filter(|r| r[2] == "signal").count(), 4);
    let (_, history) = table(&out, "history.tsv");
    assert_eq!(history.len(), 2 * 2 * 5);
}

fn labeled_csv(dir: &Path) -> String {
    let d = affinitynet::data::gen_two_class((40, 20), 4, 3.0, 9).unwrap();
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    write(dir, "data.csv", std::str::from_utf8(&buf).unwrap())
}

#[test]
fn classify_from_csv_notes_protocol_and_absent_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let csv = labeled_csv(dir.path());
    let header = std::fs::read_to_string(&csv).unwrap();
    let label = header.lines().next().unwrap().split(',').last().unwrap().to_string();
    let cfg = write(
        dir.path(),
        "c.toml",
        &format!(
            "reps = 2\ntop = 2\nfractions = [0.1, 0.5]\n[data]\nsource = \"csv\"\npath = {csv:?}\nlabel_column = {label:?}\n[model]\nhidden = 6\nk = 4\n[train]\nepochs = 10\n"
        ),
    );
    let out = dir.path().join("o");
    let o = run(&["classify", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.tsv")).unwrap();
    assert!(summary.contains("absent"));
    assert!(summary.contains("plain mean"));
    let (_, rows) = read_table(&summary);
    assert_eq!(rows.len(), 4);
    let (_, runs) = table(&out, "runs.tsv");
    assert_eq!(runs.len(), 2 * 2 * 2);
    for r in &runs {
        let ami: f64 = r[4].parse().unwrap();
        assert!(ami <= 1.0 + 1e-9);
    }
}

#[test]
fn cluster_defaults_k_to_label_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "k.toml",
        "reps = 2\ntrain_fraction = 0.05\n[data]\nsource = \"synthetic\"\nn_per_cluster = 25\n[model]\nhidden = 8\nk = 5\n[train]\nepochs = 10\n",
    );
    let out = dir.path().join("o");
    let o = run(&["cluster", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = table(&out, "runs.tsv");
    assert_eq!(header, ["rep", "seed", "clusters", "transformed_ami", "raw_ami"]);
    assert!(rows.iter().all(|r| r[2] == "4"));
}

#[test]
fn survival_writes_km_tables_per_group() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "v.toml",
        "reps = 2\ngroup_proportions = [0.25, 0.5, 0.25]\n[data]\nsource = \"synthetic\"\nn = 120\n[model]\nhidden = 8\nk = 5\n[train]\nepochs = 10\n",
    );
    let out = dir.path().join("o");
    let o = run(&["survival", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, runs) = table(&out, "runs.tsv");
    assert_eq!(runs.len(), 2);
    for r in &runs {
        let c: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&c));
        assert_eq!(r[5], "2", "three groups give two degrees of freedom");
    }
    let (header, km) = table(&out, "kaplan_meier.tsv");
    assert_eq!(header, ["rep", "group", "time", "at_risk", "events", "survival"]);
    for g in ["0", "1", "2"] {
        assert!(km.iter().any(|r| r[0] == "0" && r[1] == g));
    }
    let bad = write(dir.path(), "b.toml", "baseline_columns = [99]\n[data]\nsource = \"synthetic\"\nn = 50\n");
    assert_eq!(code(&run(&["survival", "--config", &bad, "--reps", "1", "--out", out.to_str().unwrap()])), 1);
}
