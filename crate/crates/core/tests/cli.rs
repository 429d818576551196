use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mtlstm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlstm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MTLSTM_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Generates the multi-domain preset once and returns its directory.
fn synth(dir: &Path) -> PathBuf {
    let o = mtlstm(
        &["synth", "--scenario", "multi-domain", "--samples", "40", "--seed", "3", "--out", "data", "--run-name", "md"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("data/md")
}

fn two_task_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"version = 1
seed = 11

[[data.datasets]]
name = "books"
path = "{}"
class_count = 2

[[data.datasets]]
name = "dvds"
path = "{}"
class_count = 2

[train]
epochs = 1
embed_dim = 4
hidden = 4
{extra}"#,
        data.join("books.tsv").display(),
        data.join("dvds.tsv").display()
    );
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_writes_datasets_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    for name in ["books", "dvds", "kitchen"] {
        let text = fs::read_to_string(data.join(format!("{name}.tsv"))).unwrap();
        assert_eq!(text.lines().count(), 40);
        assert!(text.lines().all(|l| l.split_once('\t').is_some()));
    }
    let manifest = fs::read_to_string(data.join("datasets.toml")).unwrap();
    assert!(manifest.contains("[[data.datasets]]"));
    assert!(data.join("config.toml").is_file());
}

#[test]
fn train_writes_checkpoint_metrics_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = two_task_config(tmp.path(), &data, "");
    let o = mtlstm(&["train", "--config", cfg.to_str().unwrap(), "--out", "runs", "--run-name", "a"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("runs/a");
    for f in ["config.toml", "metrics_books.csv", "metrics_dvds.csv", "model_books.json", "model_dvds.json", "accuracy.csv", "report.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics_books.csv")).unwrap();
    assert!(metrics.starts_with("step,joint_loss,books_loss,dvds_loss\n"));
    assert!(!metrics.contains('\r'));
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().starts_with("task"));
    assert!(table.contains("books") && table.contains("average"));
}

#[test]
fn reruns_are_bitwise_identical_and_config_echo_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = two_task_config(tmp.path(), &data, "");
    for name in ["a", "b"] {
        let o = mtlstm(&["train", "--config", cfg.to_str().unwrap(), "--out", "runs", "--run-name", name], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let echoed = tmp.path().join("runs/a/config.toml");
    let o = mtlstm(&["train", "--config", echoed.to_str().unwrap(), "--out", "runs", "--run-name", "c"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics_books.csv", "metrics_dvds.csv", "model_books.json", "accuracy.csv"] {
        let a = fs::read(tmp.path().join("runs/a").join(f)).unwrap();
        assert_eq!(a, fs::read(tmp.path().join("runs/b").join(f)).unwrap(), "{f}");
        assert_eq!(a, fs::read(tmp.path().join("runs/c").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = two_task_config(tmp.path(), &data, "");
    let o = mtlstm(&["train", "--config", cfg.to_str().unwrap(), "--seed", "99", "--out", "runs", "--run-name", "s"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let echoed = fs::read_to_string(tmp.path().join("runs/s/config.toml")).unwrap();
    assert!(echoed.contains("seed = 99"));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mtlstm"))
        .args(["synth", "--scenario", "multi-objective", "--samples", "10"])
        .current_dir(tmp.path())
        .env("MTLSTM_OUTPUT_ROOT", tmp.path().join("envroot"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(tmp.path().join("envroot")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name().into_string().unwrap();
    assert!(name.ends_with("-seed0"), "{name}");
}

#[test]
fn missing_dataset_path_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = two_task_config(tmp.path(), Path::new("/nonexistent"), "");
    let o = mtlstm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.datasets[0].path"), "{}", stderr(&o));
}

#[test]
fn bad_field_value_reports_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = two_task_config(tmp.path(), &data, "learning_rate = \"fast\"\n");
    let o = mtlstm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));
    let cfg = two_task_config(tmp.path(), &data, "lerning_rate = 0.1\n");
    let o = mtlstm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lerning_rate"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = two_task_config(tmp.path(), &data, "learning_rate = 1e200\n");
    let o = mtlstm(&["train", "--config", cfg.to_str().unwrap(), "--out", "runs"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn gradcheck_passes_and_fails_when_corrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mtlstm(&["gradcheck"], tmp.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let report = stdout(&o);
    assert!(report.contains("overall: PASS"));
    let groups: Vec<&str> = report.lines().filter(|l| !l.starts_with("overall")).map(|l| l.split_whitespace().next().unwrap()).collect();
    let mut unique = groups.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), groups.len());
    assert!(groups.contains(&"global.U_c") && groups.contains(&"coupling.1->0.U_c"));

    let o = mtlstm(&["gradcheck", "--tasks", "3", "--corrupt", "task2.W_gf"], tmp.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn sweep_n0_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = two_task_config(tmp.path(), &data, "");
    let run = |name: &str| {
        let o = mtlstm(
            &["sweep-n0", "--config", cfg.to_str().unwrap(), "--n0", "1,2", "--out", "runs", "--run-name", name],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(tmp.path().join("runs").join(name).join("sweep_n0.csv")).unwrap()
    };
    let a = run("x");
    assert_eq!(a.lines().count(), 3);
    assert_eq!(a.lines().next(), Some("n0,books_accuracy,dvds_accuracy"));
    assert_eq!(a, run("y"));
    let o = mtlstm(&["sweep-n0", "--config", cfg.to_str().unwrap(), "--n0", "0"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ppg_writes_symmetric_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = two_task_config(tmp.path(), &data, "");
    let o = mtlstm(&["ppg", "--config", cfg.to_str().unwrap(), "--out", "runs", "--run-name", "p"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("runs/p/ppg.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["task", "books", "dvds"]);
    assert_eq!(rows[1][1], "1.000000");
    assert_eq!(rows[1][2], rows[2][1]);
    assert!(rows[1][2].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn scenario_config_and_unknown_preset() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("s.toml"),
        "version = 1\n[data]\nscenario = \"multi-objective\"\nsamples_per_task = 30\n[train]\nepochs = 1\nembed_dim = 3\nhidden = 3\n[eval]\noriented = [2]\nbaseline = false\n",
    )
    .unwrap();
    let o = mtlstm(&["train", "--config", "s.toml", "--out", "runs", "--run-name", "s"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let acc = fs::read_to_string(tmp.path().join("runs/s/accuracy.csv")).unwrap();
    let row = acc.lines().nth(3).unwrap();
    let value: f64 = row.strip_prefix("question,,").expect(&acc).parse().unwrap();
    assert!((0.0..=1.0).contains(&value));
    assert_eq!(acc.lines().nth(1), Some("sentiment,,"));

    fs::write(tmp.path().join("bad.toml"), "version = 1\n[data]\nscenario = \"multi-lingual\"\n").unwrap();
    let o = mtlstm(&["train", "--config", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.scenario"), "{}", stderr(&o));
}

#[test]
fn synth_manifest_keeps_config_settings() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("desk.toml"),
        "version = 1\nseed = 4\n[data]\nscenario = \"multi-domain\"\nsamples_per_task = 20\n[train]\nepochs = 1\nembed_dim = 3\nhidden = 5\n[eval]\noriented = [1]\n",
    )
    .unwrap();
    let o = mtlstm(&["synth", "--config", "desk.toml", "--out", "data", "--run-name", "m"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(tmp.path().join("data/m/datasets.toml")).unwrap();
    assert!(manifest.contains("hidden = 5") && manifest.contains("embed_dim = 3"), "{manifest}");
    assert!(!manifest.contains("scenario"));
    let o = mtlstm(&["train", "--config", "data/m/datasets.toml", "--out", "runs", "--run-name", "t"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("runs/t/model_dvds.json").is_file());
    assert!(!tmp.path().join("runs/t/model_books.json").exists());
}
