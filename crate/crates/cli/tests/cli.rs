use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "
[data]
n_total = 160
n_labeled = 6
n_test = 60

[model]
hidden = 8

[schedule]
eta0 = 0.05
ell0 = 6
ell = 4
cycle_len = 2

[consistency]
noise_sigma = 0.2

[run]
epochs = 6
seed = 2
output = run
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fastswa"))
}

fn run_in(root: &Path, args: &[&str]) -> Output {
    bin()
        .args(args)
        .env("FASTSWA_OUTPUT_ROOT", root)
        .current_dir(root)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Nonzero exit with exactly one `error: <kind>: ...` line.
fn assert_fails(o: &Output, kind: &str) {
    assert!(!o.status.success(), "expected failure, stdout: {}", stdout(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr not one line: {err:?}");
    assert!(lines[0].starts_with(&format!("error: {kind}: ")), "{err:?}");
}

fn setup(cfg: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.cfg");
    fs::write(&path, cfg).unwrap();
    (dir, path)
}

fn trained() -> (tempfile::TempDir, PathBuf) {
    let (dir, cfg) = setup(SMALL);
    let o = run_in(dir.path(), &["train", cfg.to_str().unwrap(), "--swa", "--fast-swa", "--stride", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("run");
    (dir, out)
}

#[test]
fn train_writes_metrics_and_checkpoints_under_output_root() {
    let (_dir, out) = trained();
    for f in ["metrics.csv", "student.fswa", "teacher.fswa", "swa.fswa", "fast_swa.fswa"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "epoch,lr,lambda,train_ce,train_cons,grad_norm_ce,grad_norm_cons,test_err_student,\
         test_err_teacher,test_err_swa,test_err_fast_swa,diversity_vs_prev_epoch"
    );
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn repeated_runs_give_identical_metrics() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    assert!(run_in(dir.path(), &["train", c, "--fast-swa", "-o", "a"]).status.success());
    assert!(run_in(dir.path(), &["train", c, "--fast-swa", "-o", "b"]).status.success());
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("a/fast_swa.fswa")).unwrap(),
        fs::read(dir.path().join("b/fast_swa.fswa")).unwrap()
    );
}

#[test]
fn zero_epochs_gives_header_only_csv() {
    let (dir, cfg) = setup(&SMALL.replace("epochs = 6", "epochs = 0"));
    let o = run_in(dir.path(), &["train", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn divergence_exits_nonzero_and_flags_partial_artifacts() {
    let (dir, cfg) = setup(&SMALL.replace("eta0 = 0.05", "eta0 = 1e200"));
    let o = run_in(dir.path(), &["train", cfg.to_str().unwrap()]);
    assert_fails(&o, "diverged");
    assert_eq!(o.status.code(), Some(3));
    assert!(dir.path().join("run/PARTIAL").exists());
    assert!(dir.path().join("run/last_good.fswa").exists());
    let i = run_in(dir.path(), &["inspect", "run/last_good.fswa"]);
    assert!(i.status.success());
}

#[test]
fn config_errors_name_the_line() {
    let (dir, cfg) = setup("epochs = 2\n[schedule]\neta0 = fast\n");
    let o = run_in(dir.path(), &["train", cfg.to_str().unwrap()]);
    assert_fails(&o, "config");
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(stderr(&o).contains("eta0"));
    let (dir, cfg) = setup("seed = 1\n");
    assert_fails(&run_in(dir.path(), &["train", cfg.to_str().unwrap()]), "config");
}

#[test]
fn usage_errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["train"]);
    assert_fails(&o, "usage");
    assert_eq!(o.status.code(), Some(2));
    assert_fails(&run_in(dir.path(), &["frobnicate"]), "usage");
    assert_fails(&run_in(dir.path(), &["train", "x", "--stride", "2", "--stride-epochs", "1"]), "usage");
    assert_fails(&run_in(dir.path(), &["analyze", "gains", "--config", "c", "only_one.fswa"]), "usage");
    assert!(run_in(dir.path(), &["--help"]).status.success());
}

#[test]
fn averaging_overrides_need_a_cyclic_schedule() {
    let cosine = SMALL.replace("ell = 4\n", "").replace("cycle_len = 2\n", "");
    let (dir, cfg) = setup(&cosine);
    assert_fails(&run_in(dir.path(), &["train", cfg.to_str().unwrap(), "--swa"]), "argument");
}

#[test]
fn inspect_prints_header_fields() {
    let (dir, _) = trained();
    let o = run_in(dir.path(), &["inspect", "run/fast_swa.fswa"]);
    assert!(o.status.success());
    let s = stdout(&o);
    for want in ["role=fast-swa", "widths=2,8,2", "epoch=6", "seed=2", "param_count=42"] {
        assert!(s.lines().any(|l| l == want), "{want} missing in {s}");
    }
}

#[test]
fn bad_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk.fswa"), b"NOTACHECKPOINT").unwrap();
    assert_fails(&run_in(dir.path(), &["inspect", "junk.fswa"]), "checkpoint");
    assert_fails(&run_in(dir.path(), &["inspect", "missing.fswa"]), "io");
}

#[test]
fn avg_of_one_checkpoint_twice_is_bit_identical() {
    let (dir, out) = trained();
    let o = run_in(dir.path(), &["avg", "run/student.fswa", "run/student.fswa", "-o", "mean.fswa"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read(out.join("student.fswa")).unwrap();
    let b = fs::read(dir.path().join("mean.fswa")).unwrap();
    // identical payloads; the header role changes
    assert_eq!(a[a.len() - 42 * 8..], b[b.len() - 42 * 8..]);
}

#[test]
fn avg_rejects_mismatched_architectures() {
    let (dir, _) = trained();
    let (_d2, cfg2) = setup(&SMALL.replace("hidden = 8", "hidden = 4"));
    let o = run_in(dir.path(), &["train", cfg2.to_str().unwrap(), "-o", "other"]);
    assert!(o.status.success());
    let o = run_in(dir.path(), &["avg", "run/student.fswa", "other/student.fswa", "-o", "m.fswa"]);
    assert_fails(&o, "checkpoint");
}

#[test]
fn analyses_emit_csv() {
    let (dir, _) = trained();
    let cfg = dir.path().join("exp.cfg");
    let c = cfg.to_str().unwrap();
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["rays", "--config", c, "run/student.fswa"], "t_or_s,distance,train_err,test_err"),
        (
            vec!["rays", "--config", c, "run/student.fswa", "--to", "run/swa.fswa", "--grid", "0,0.5,1"],
            "t_or_s,distance,train_err,test_err",
        ),
        (
            vec!["rays", "--config", c, "run/student.fswa", "--adversarial", "test"],
            "t_or_s,distance,train_err,test_err",
        ),
        (
            vec!["diversity", "--config", c, "run/student.fswa", "run/swa.fswa"],
            "model,student,swa",
        ),
        (
            vec!["gains", "--config", c, "run/student.fswa", "run/fast_swa.fswa"],
            "model_a,model_b,ensemble_gain,average_gain",
        ),
        (
            vec!["trace", "--config", c, "run/student.fswa", "--exact"],
            "q_hat,exact,stderr,probes_per_point,points,epsilon",
        ),
        (
            vec!["simiter", "--n", "10", "--m", "10,30", "--eta1", "1", "--eta2", "3", "--sigma", "1", "--trials", "200"],
            "m,swa_mse",
        ),
    ];
    for (args, header) in cases {
        let mut full = vec!["analyze"];
        full.extend(&args);
        let o = run_in(dir.path(), &full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        assert!(stdout(&o).starts_with(header), "{args:?}: {}", stdout(&o));
    }
    let rays = stdout(&run_in(dir.path(), &["analyze", "rays", "--config", c, "run/student.fswa", "--grid", "0,1,2"]));
    assert_eq!(rays.lines().count(), 4);
}

#[test]
fn analysis_output_file_goes_under_output_root() {
    let (dir, _) = trained();
    let cfg = dir.path().join("exp.cfg");
    let o = run_in(
        dir.path(),
        &["analyze", "diversity", "--config", cfg.to_str().unwrap(), "run/student.fswa", "run/teacher.fswa", "-o", "rep/div.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let s = fs::read_to_string(dir.path().join("rep/div.csv")).unwrap();
    assert!(s.starts_with("model,student,teacher"));
}

#[test]
fn hessian_needs_smooth_network() {
    let (dir, _) = trained();
    let cfg = dir.path().join("exp.cfg");
    let o = run_in(dir.path(), &["analyze", "hessian", "--config", cfg.to_str().unwrap(), "run/student.fswa"]);
    assert_fails(&o, "argument");

    let smooth = SMALL.replace("hidden = 8", "hidden = 8\nactivation = softplus");
    let (d2, cfg2) = setup(&smooth);
    assert!(run_in(d2.path(), &["train", cfg2.to_str().unwrap()]).status.success());
    let o = run_in(
        d2.path(),
        &["analyze", "hessian", "--config", cfg2.to_str().unwrap(), "run/student.fswa", "--points", "2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn analyses_reject_checkpoints_that_do_not_fit_the_data() {
    let (dir, _) = trained();
    let (_d, blobs) = setup(&SMALL.replace("[data]", "[data]\ndataset = blobs\nblob_classes = 3"));
    let o = run_in(dir.path(), &["analyze", "trace", "--config", blobs.to_str().unwrap(), "run/student.fswa"]);
    assert_fails(&o, "usage");
}
