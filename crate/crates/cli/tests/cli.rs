use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "datasets": ["quadratic-uniform"],
  "seeds": [1],
  "hidden": [4],
  "obs_var_grid": [0.01, 0.1],
  "methods": ["map", "full-hessian", "regvar-amortized"],
  "train": {"adam_steps": 200}
}"#;

fn regvar(dir: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_regvar"));
    cmd.args(args).arg("--out").arg(dir.join("out")).env_remove("REGVAR_THREADS");
    if let Some(t) = threads {
        cmd.env("REGVAR_THREADS", t);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write_config(tmp.path(), "bad.json", r#"{"sedes": [1]}"#);
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--config", &unknown],
        vec!["train", "--config", "/nonexistent/config.json"],
        vec!["gen-data", "--dataset", "circles"],
        vec!["evaluate", "--method", "dropout"],
        vec!["evaluate", "--lambda", "0.5"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = regvar(tmp.path(), &args, None);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = regvar(tmp.path(), &["gen-data", "--dataset", "sin-uniform", "--seed", "0"], Some("zero"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("REGVAR_THREADS"));
}

#[test]
fn numerical_failure_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    // 1 / prior_var overflows
    let cfg = write_config(
        tmp.path(),
        "inf.json",
        r#"{"datasets": ["quadratic-uniform"], "seeds": [0], "prior_var": 1e-310}"#,
    );
    let out = regvar(tmp.path(), &["train", "--config", &cfg], None);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_writes_every_split() {
    let tmp = tempfile::tempdir().unwrap();
    let out = regvar(tmp.path(), &["gen-data", "--dataset", "sin-inbetween", "--seed", "4"], None);
    assert!(out.status.success());
    let dir = String::from_utf8(out.stdout).unwrap();
    let cell = Path::new(dir.trim()).join("sin-inbetween_seed4");
    for split in ["train", "val", "test_id", "test_ood"] {
        assert!(cell.join(format!("{split}.csv")).is_file());
        assert!(cell.join(format!("{split}.json")).is_file());
    }
    let train = std::fs::read_to_string(cell.join("train.csv")).unwrap();
    assert_eq!(train.lines().count(), 161);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", SMALL);
    let one = regvar(tmp.path(), &["benchmark", "--config", &cfg], Some("1"));
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    let dir = String::from_utf8(one.stdout).unwrap().trim().to_string();
    let first = std::fs::read(Path::new(&dir).join("results.csv")).unwrap();
    let summary = std::fs::read(Path::new(&dir).join("summary.json")).unwrap();

    let two = regvar(tmp.path(), &["benchmark", "--config", &cfg], Some("3"));
    assert!(two.status.success());
    assert_eq!(String::from_utf8(two.stdout).unwrap().trim(), dir);
    assert_eq!(std::fs::read(Path::new(&dir).join("results.csv")).unwrap(), first);
    assert_eq!(std::fs::read(Path::new(&dir).join("summary.json")).unwrap(), summary);

    let text = String::from_utf8(first).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    for col in ["schema_version", "method", "dataset", "split", "seed", "prior_var", "lambda", "config_hash"] {
        assert!(header.contains(&col), "missing {col}");
    }
    // 3 methods x 3 splits
    assert_eq!(text.lines().count(), 10);
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", SMALL);
    let out = regvar(tmp.path(), &["evaluate", "--config", &cfg, "--method", "map", "--seed", "2"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = String::from_utf8(out.stdout).unwrap();
    let text = std::fs::read_to_string(Path::new(dir.trim()).join("metrics.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[col("method")] == "map" && r[col("seed")] == "2"));
}
