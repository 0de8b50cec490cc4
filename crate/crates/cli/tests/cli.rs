use std::path::Path;
use std::process::{Command, Output};

fn grid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grid")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &["--n-samples", "200", "--epochs", "2", "--batch-size", "32", "--latent-dim", "8"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn train_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = grid(&with(&["train"], &with(SMALL, &["--output-dir", dir.to_str().unwrap()])));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("final val_ndcg@20"));
    for f in ["config.toml", "metrics.csv", "summary.json", "params.json", "checkpoint.bin"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,metric,value"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "schema_version = 1\nepochs = 7\nmode = \"gen_only\"\n").unwrap();
    let dir = tmp.path().join("run");
    let out = grid(&with(
        &["train", "--config", cfg.to_str().unwrap()],
        &with(SMALL, &["--output-dir", dir.to_str().unwrap()]),
    ));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(written.contains("epochs = 2"));
    assert!(written.contains("mode = \"gen_only\""));
}

#[test]
fn invalid_settings_fail_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = grid(&["train", "--slnir", "0.9", "--output-dir", dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("slnir"));
    assert!(!dir.exists());

    let tmp_cfg = tmp.path().join("bad.toml");
    std::fs::write(&tmp_cfg, "epochz = 3\n").unwrap();
    let out = grid(&["train", "--config", tmp_cfg.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn train_requires_output_dir() {
    let out = grid(&with(&["train"], SMALL));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("output"));
}

#[test]
fn generate_then_evaluate_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let out = grid(&with(&["generate-data"], &with(SMALL, &["--output-dir", data.to_str().unwrap()])));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.json", "validation.json", "test.json"] {
        assert!(data.join(f).is_file());
    }
    assert!(grid(&with(&["train"], &with(SMALL, &["--output-dir", run.to_str().unwrap()]))).status.success());

    let ckpt = run.join("checkpoint.bin");
    let q = data.join("validation.json");
    let a = data.join("test.json");
    let out = grid(&[
        "evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--queries", q.to_str().unwrap(),
        "--archive", a.to_str().unwrap(), "--k", "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: f64 = stdout(&out).trim().strip_prefix("ndcg@5: ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&v));

    let out = grid(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--queries", q.to_str().unwrap()]);
    assert!(out.status.success());
}

#[test]
fn sweep_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sweep");
    let out = grid(&with(
        &["sweep", "--axis", "lambda", "--values", "0,50", "--replicates", "2"],
        &with(SMALL, &["--output-dir", dir.to_str().unwrap()]),
    ));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("lambda,mean_ndcg,std_ndcg,replicates"));
    assert_eq!(text.lines().count(), 3);
    assert!(dir.join("sweep.csv").is_file());

    let plots = tmp.path().join("plots");
    let out = grid(&["emit-plot-data", "--metrics-dir", dir.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().count() >= 3);
    assert!(Path::new(stdout(&out).lines().next().unwrap()).is_file());
}

#[test]
fn emit_plot_data_without_runs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = grid(&["emit-plot-data", "--metrics-dir", tmp.path().to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn count_params_totals_add_up() {
    let out = grid(&["count-params", "--latent-dim", "16"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let get = |k: &str| -> usize {
        text.lines().find_map(|l| l.strip_prefix(&format!("{k}: "))).unwrap().parse().unwrap()
    };
    assert_eq!(get("hybrid_total"), get("disc_only_total") + get("beta_total"));
    assert_eq!(get("vae_encoder"), 64 * 64 + 64 + 2 * (64 * 16 + 16));
}
