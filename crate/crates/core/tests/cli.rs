use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 1

[pretrain]
steps = 100

[eval]
held_out = 16
interval = 2

[[stages]]
name = "mpo"
kind = "mpo"
steps = 3
prompts_per_step = 4
group_size = 4

[[stages]]
name = "grpo"
kind = "grpo"
steps = 4
prompts_per_step = 4
group_size = 4
"#;

fn hybridrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridrl"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(extra);
    hybridrl(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Dotted paths of every leaf that differs between two TOML values.
fn diff(a: &toml::Value, b: &toml::Value, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (toml::Value::Table(x), toml::Value::Table(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff(u, v, &format!("{path}.{k}"), out),
                    _ => out.push(format!("{path}.{k}")),
                }
            }
        }
        (toml::Value::Array(x), toml::Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                diff(u, v, &format!("{path}.{i}"), out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

fn manifest(dir: &Path) -> toml::Value {
    let text = std::fs::read_to_string(dir.join("manifest.toml")).unwrap();
    toml::Value::Table(toml::from_str(&text).unwrap())
}

#[test]
fn missing_config_names_the_path() {
    let o = hybridrl(&["run", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/cfg.toml"));
}

#[test]
fn invalid_config_reports_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("group_size = 4\n\n[[stages]]", "group_size = 1\n\n[[stages]]"));
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stages[0].group_size"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), &format!("{CONFIG}\n[stages.bufer]\n"));
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bufer"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(hybridrl(&["run"]).status.code(), Some(1));
    assert_eq!(hybridrl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hybridrl(&["--help"]).status.code(), Some(0));
}

#[test]
fn same_seed_gives_byte_identical_metrics_and_manifest_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(run(&cfg, &a, &["--seed", "7"]).status.code(), Some(0));
    assert_eq!(run(&cfg, &b, &["--seed", "7"]).status.code(), Some(0));
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(manifest(&a).get("seed").unwrap().as_integer(), Some(7));

    assert_eq!(run(&a.join("manifest.toml"), &c, &[]).status.code(), Some(0));
    assert_eq!(ma, std::fs::read(c.join("metrics.csv")).unwrap());

    for f in ["timings.csv", "pairs.jsonl", "rollouts.jsonl", "buffer.jsonl", "checkpoints/mpo.ckpt", "checkpoints/grpo.ckpt"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert!(!a.join("failure.txt").exists());
}

#[test]
fn ssb_switch_flips_exactly_one_manifest_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&cfg, &a, &[]).status.code(), Some(0));
    assert_eq!(run(&cfg, &b, &["--stage", "grpo", "--ssb", "off"]).status.code(), Some(0));
    let mut fields = Vec::new();
    diff(&manifest(&a), &manifest(&b), "", &mut fields);
    assert_eq!(fields, vec![".stages.1.buffer.enabled".to_string()]);

    let o = run(&cfg, &dir.path().join("x"), &["--stage", "mpo", "--ssb", "off"]);
    assert_eq!(o.status.code(), Some(1));

    let report = hybridrl(&[
        "report",
        a.join("metrics.csv").to_str().unwrap(),
        b.join("metrics.csv").to_str().unwrap(),
        "--out",
        dir.path().join("report").to_str().unwrap(),
    ]);
    assert_eq!(report.status.code(), Some(0), "{}", stderr(&report));
    let table = stdout(&report);
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.contains("delta vs first"));
    assert!(dir.path().join("report/summary.txt").exists());
    assert!(dir.path().join("report/0_a.eval_accuracy.csv").exists());
}

#[test]
fn report_of_one_file_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    run(&cfg, &a, &[]);
    let o = hybridrl(&["report", a.join("metrics.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn report_rejects_empty_and_foreign_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let o = hybridrl(&["report", empty.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));

    let foreign = dir.path().join("foreign.csv");
    std::fs::write(&foreign, "a,b\n1,2\n").unwrap();
    let o = hybridrl(&["report", foreign.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("schema mismatch"));
}

#[test]
fn mid_run_failure_leaves_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{CONFIG}\n[check]\nevery = 2\ntolerance = 1e-30\n"));
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let failure = std::fs::read_to_string(out.join("failure.txt")).unwrap();
    assert!(failure.contains("gradient check failed"), "{failure}");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);
}
