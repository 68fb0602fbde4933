use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SYNTHETIC: &str = r#"
seed = 5

[dataset]
kind = "synthetic"
num_classes = 3
feature_dim = 4
num_examples = 300

[partition]
num_clients = 5
labels_per_client = 2

[model]
kind = "mlr"

[train]
rounds = 8
clients_per_round = 3
batch_size = 16
variant = "wafl"

[surrogate]
gamma = 2.0

[attack]
epsilon = 0.3
alpha = 0.05
steps = 5
attacked_fraction = 0.4
"#;

fn wafl_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wafl-sim"))
        .args(args)
        .output()
        .expect("spawn wafl-sim")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_in(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    wafl_sim(&args)
}

#[test]
fn run_writes_three_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let out = tmp.path().join("out");
    let o = run_in(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["rounds.csv", "summary.json", "checkpoint.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let rounds = fs::read_to_string(out.join("rounds.csv")).unwrap();
    let mut lines = rounds.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,variant,clean_acc,clean_loss,shifted_acc,shifted_loss,surrogate_loss,rho_hat_optional,lambda_json_optional"
    );
    assert_eq!(lines.count(), 8);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["variant"], "wafl");
}

#[test]
fn same_config_twice_gives_identical_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_in(&cfg, &a, &["--workers", "1"]).status.success());
    assert!(run_in(&cfg, &b, &["--workers", "3"]).status.success());
    for f in ["summary.json", "rounds.csv", "checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_in(&cfg, &a, &[]).status.success());
    assert!(run_in(&cfg, &b, &["--seed", "6"]).status.success());
    assert_ne!(fs::read(a.join("rounds.csv")).unwrap(), fs::read(b.join("rounds.csv")).unwrap());
}

#[test]
fn json_config_is_equivalent() {
    let tmp = tempfile::tempdir().unwrap();
    let toml_cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let value: toml::Value = toml::from_str(SYNTHETIC).unwrap();
    let json_cfg = write_config(tmp.path(), "c.json", &serde_json::to_string(&value).unwrap());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_in(&toml_cfg, &a, &[]).status.success());
    let o = run_in(&json_cfg, &b, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("rounds.csv")).unwrap(), fs::read(b.join("rounds.csv")).unwrap());
}

#[test]
fn missing_dataset_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[dataset]\nkind = \"idx\"\nimages = \"absent-images.gz\"\nlabels = \"absent-labels.gz\"\n",
    );
    let o = run_in(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset.images"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_section_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "seed = 1\n[model]\nkind = \"mlr\"\n");
    let o = run_in(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected_with_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &format!("{SYNTHETIC}\n[output]\ndirr = \"x\"\n"));
    let o = run_in(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    let line = SYNTHETIC.lines().count() + 3;
    assert!(err.contains(&format!("line {line}")) && err.contains("dirr"), "{err}");
}

#[test]
fn invalid_value_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &SYNTHETIC.replace("gamma = 2.0", "gamma = -1.0"));
    let o = run_in(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn dry_run_prints_resolved_config_and_computes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let out = tmp.path().join("out");
    for cmd in ["run", "sweep-gamma", "sweep-attack", "dataset"] {
        let o = wafl_sim(&[cmd, "--dry-run", "--seed", "9", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        let text = stdout(&o);
        assert!(text.starts_with("# resolved config (dry run)"), "{cmd}");
        assert!(text.contains("seed = 9"), "{cmd}");
        assert!(text.contains("lambda_lr = 0.01"), "{cmd}: defaults are filled in");
    }
    assert!(!out.exists());
}

#[test]
fn sweep_attack_has_one_row_per_fraction_and_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let out = tmp.path().join("out");
    let o = wafl_sim(&[
        "sweep-attack",
        "--fractions",
        "0,0.2,0.4,0.6,0.8",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep_attack.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "fraction,variant,clean_acc,clean_loss,shifted_acc,shifted_loss,rho_hat");
    assert_eq!(rows.len(), 1 + 5 * 5);
    let variants: Vec<&str> = rows[1..6].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(variants, ["fedavg", "wafl", "fedfgsm", "fedpgd", "agnostic"]);
    for r in &rows[1..6] {
        let c: Vec<&str> = r.split(',').collect();
        assert_eq!(c[2], c[4], "fraction 0 equals clean accuracy");
        assert_eq!(c[3], c[5], "fraction 0 equals clean loss");
    }
}

#[test]
fn sweep_attack_rejects_out_of_range_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let o = wafl_sim(&["sweep-attack", "--fractions", "0,1.5", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_gamma_writes_rho_column() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let out = tmp.path().join("out");
    let o = wafl_sim(&[
        "sweep-gamma",
        "--gamma-grid",
        "0.5,5",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep_gamma.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "0.5");
    assert!(rows[1][4].is_empty(), "no attack, no shifted columns");
    let rho: Vec<f64> = rows[1..].iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(rho[0] > rho[1], "{rho:?}");

    let o = wafl_sim(&["sweep-gamma", "--gamma-grid", "5,0.5", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

const DOMAIN: &str = r#"
seed = 3

[model]
kind = "mlr"

[train]
rounds = 10
eta = 0.1
clients_per_round = 2
batch_size = 16

[surrogate]
gamma = 5.0

[ot]
entropic_reg = 0.01

[domain_adapt]
distance_subsample = 40

[[domain_adapt.sources]]
kind = "synthetic"
num_classes = 2
feature_dim = 2
num_examples = 60
seed_offset = 1

[[domain_adapt.sources]]
kind = "synthetic"
num_classes = 2
feature_dim = 2
num_examples = 120
shift = [30.0, -30.0]
seed_offset = 2

[domain_adapt.target]
kind = "synthetic"
num_classes = 2
feature_dim = 2
num_examples = 80
seed_offset = 3
"#;

#[test]
fn domain_adapt_selects_the_matching_source() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "d.toml", DOMAIN);
    let out = tmp.path().join("out");
    let o = wafl_sim(&["domain-adapt", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("domain_adapt.json")).unwrap()).unwrap();
    assert_eq!(report["lambda_star"], serde_json::json!([1.0, 0.0]));
    let csv = fs::read_to_string(out.join("domain_adapt.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,target_acc,target_loss,lambda_json");
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn domain_adapt_needs_two_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let start = DOMAIN.rfind("[[domain_adapt.sources]]").unwrap();
    let end = DOMAIN.find("[domain_adapt.target]").unwrap();
    let one = format!("{}{}", &DOMAIN[..start], &DOMAIN[end..]);
    let cfg = write_config(tmp.path(), "d.toml", &one);
    let o = wafl_sim(&["domain-adapt", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("need ≥ 2 sources"), "{}", stderr(&o));
}

#[test]
fn ot_check_reports_max_relative_error() {
    let o = wafl_sim(&["ot-check", "--sizes", "4,8", "--trials", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    let err: f64 = last.strip_prefix("max relative error: ").unwrap().parse().unwrap();
    assert!(err <= 0.01, "{err}");
}

#[test]
fn ot_check_fails_when_regularization_is_too_coarse() {
    let o = wafl_sim(&["ot-check", "--sizes", "6", "--trials", "5", "--entropic-reg", "0.5"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn dataset_writes_partition_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let out = tmp.path().join("out");
    let o = wafl_sim(&["dataset", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("partition.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    let weights: f64 = rows.iter().map(|r| r[3].parse::<f64>().unwrap()).sum();
    assert!((weights - 1.0).abs() < 1e-12);
    assert!(rows.iter().all(|r| r[4].split(' ').count() == 2));
}

#[test]
fn bundled_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (cmd, name) in [("run", "synthetic.toml"), ("run", "mnist-small.toml"), ("domain-adapt", "domain-adapt.toml")] {
        let o = wafl_sim(&[cmd, "--dry-run", "--config", root.join(name).to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}
