//! End-to-end command-line tests at miniature scale.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn g2d() -> Command {
    Command::new(env!("CARGO_BIN_EXE_g2d"))
}

const MINI_CONFIG: &str = "\
seed = 5

[synthesis]
identities = 4
views = 14
templates = 3
image_size = 16

[teacher]
epochs = 2
batch = 8
optimizer = adam
lr = 0.002
feature_dim = 12

[encoder]
epochs = 2
batch = 8
hidden_channels = 6
grid_channels = 8
decoder_channels = 6

[reformer]
epochs = 2
batch = 8
optimizer = sgd
lr = 0.001
channels = 8
blocks = 1
embed_dim = 12

[classifier]
epochs = 2
batch = 8
optimizer = adam
lr = 0.002
ce_epochs = 2

[eval]
genuine_pairs = 6
impostor_pairs = 10
bins = 10
";

struct Experiment {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Experiment {
    fn new() -> Experiment {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("exp.ini");
        fs::write(&config, MINI_CONFIG).unwrap();
        Experiment { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn run(&self, args: &[&str]) -> Output {
        g2d()
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.out())
            .args(args)
            .output()
            .expect("spawn g2d")
    }

    fn run_ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "g2d {args:?} failed:\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_pipeline_end_to_end() {
    let exp = Experiment::new();
    exp.run_ok(&["synth"]);
    let out = exp.out();
    assert!(out.join("dataset/manifest.tsv").exists());
    assert!(out.join("dataset/config.resolved.ini").exists());

    exp.run_ok(&["train", "teacher"]);
    exp.run_ok(&["train", "encoder"]);
    exp.run_ok(&["train", "reformer"]);
    exp.run_ok(&["train", "classifier"]);
    for model in [
        "teacher.g2dm",
        "encoder.g2dm",
        "reformer.g2dm",
        "classifier.g2dm",
    ] {
        assert!(out.join("models").join(model).exists(), "{model}");
    }
    assert!(out.join("models/teacher_log.csv").exists());
    assert!(out.join("models/config.resolved.ini").exists());

    // Ablations: DIS retrains the reformer with L1 only; CE trains
    // reformer and classifier jointly.
    exp.run_ok(&["train", "reformer", "--ablation", "dis"]);
    exp.run_ok(&["train", "classifier", "--ablation", "dis"]);
    exp.run_ok(&["train", "classifier", "--ablation", "ce"]);
    assert!(out.join("models/reformer_dis.g2dm").exists());
    assert!(out.join("models/reformer_ce.g2dm").exists());
    assert!(out.join("models/classifier_ce.g2dm").exists());

    exp.run_ok(&["embed"]);
    let emb = out.join("embeddings/full_val.emb");
    assert!(emb.exists());
    assert!(out.join("embeddings/full_val.emb.manifest").exists());

    // Embedding is deterministic: re-embedding with --force reproduces the
    // same bytes.
    let before = read(&emb);
    exp.run_ok(&["--force", "embed"]);
    assert_eq!(before, read(&emb));

    let stdout = exp.run_ok(&["eval", "--protocol", "mr-mp"]);
    assert!(stdout.contains("ACC"), "stdout: {stdout}");
    let eval_dir = out.join("eval/full_mr-mp");
    for f in ["report.csv", "roc.csv", "histogram.csv", "scores.csv"] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }
    // Both protocols run from the same embeddings.
    exp.run_ok(&["eval", "--protocol", "umr-mp"]);
    assert!(out.join("eval/full_umr-mp/report.csv").exists());

    // Identical seeds give identical CSV bytes.
    let scores_before = read(&eval_dir.join("scores.csv"));
    let report_before = read(&eval_dir.join("report.csv"));
    exp.run_ok(&["--force", "eval", "--protocol", "mr-mp"]);
    assert_eq!(scores_before, read(&eval_dir.join("scores.csv")));
    assert_eq!(report_before, read(&eval_dir.join("report.csv")));

    // DIS variant embeddings and eval.
    exp.run_ok(&["embed", "--variant", "dis"]);
    exp.run_ok(&["eval", "--protocol", "mr-mp", "--variant", "dis"]);
    assert!(out.join("eval/dis_mr-mp/report.csv").exists());

    // report subcommand recomputes from scores.csv.
    exp.run_ok(&[
        "report",
        "--scores",
        eval_dir.join("scores.csv").to_str().unwrap(),
    ]);
    assert!(out.join("report/report.csv").exists());
    assert_eq!(report_before, read(&out.join("report/report.csv")));
}

#[test]
fn stage_order_is_enforced_with_named_artifacts() {
    let exp = Experiment::new();
    exp.run_ok(&["synth"]);
    let out = exp.run(&["train", "reformer"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("teacher") || stderr.contains("encoder"),
        "stderr should name the missing artifact: {stderr}"
    );

    // Training without a dataset names the manifest.
    let exp2 = Experiment::new();
    let out2 = exp2.run(&["train", "teacher"]);
    assert!(!out2.status.success());
    assert!(String::from_utf8_lossy(&out2.stderr).contains("manifest"));
}

#[test]
fn synth_refuses_overwrite_without_force() {
    let exp = Experiment::new();
    exp.run_ok(&["synth"]);
    let out = exp.run(&["synth"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    exp.run_ok(&["--force", "synth"]);
}

#[test]
fn seed_flag_overrides_config_deterministically() {
    let exp = Experiment::new();
    let a = exp.dir.path().join("a");
    let b = exp.dir.path().join("b");
    let c = exp.dir.path().join("c");
    for (dir, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        let out = g2d()
            .arg("--config")
            .arg(&exp.config)
            .arg("--out")
            .arg(dir)
            .args(["--seed", seed, "synth"])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let manifest = |d: &Path| read(&d.join("dataset/manifest.tsv"));
    assert_eq!(manifest(&a), manifest(&b));
    let face = |d: &Path| read(&d.join("dataset/images/id000_v000_face.ppm"));
    assert_eq!(face(&a), face(&b));
    assert_ne!(face(&a), face(&c));
}

#[test]
fn gradcheck_passes_and_corruption_is_reported() {
    let out = g2d().args(["gradcheck"]).output().unwrap();
    assert!(
        out.status.success(),
        "gradcheck failed: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("op,max_rel_err,status"));
    assert!(stdout.contains("conv2d_s1,"));
    assert!(!stdout.contains("FAIL"));

    let out = g2d()
        .args(["gradcheck", "--corrupt", "linear"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stdout.contains("linear") && stdout.contains("FAIL"));
    assert!(stderr.contains("linear"));
}
