use std::path::Path;
use std::process::Command;

use lir::cli::{self, RunConfig};
use lir::data::{self, extract_energies, gen_task, TaskSpec};
use lir::detectors::Detector;
use lir::Net;

const SMALL: &str = "\
task.n_train = 300
task.n_eval = 100
task.n_seen_ood = 300
train.epochs = 5
vae.epochs = 5
seeds = 3
out = run
";

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

fn lir(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lir")).args(args).output().unwrap()
}

#[test]
fn threshold_at_fifth_percentile_accepts_fresh_id() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("seeds = 0\n", dir.path()).unwrap();
    let out = dir.path().join("run");
    cli::cmd_eval(&cfg, &out).unwrap();
    let seed_dir = cli::seed_dir(&out, 0);

    // Fresh ID samples: the blob means do not depend on the seed.
    let net = Net::from_bytes(&std::fs::read(seed_dir.join("net.lirn")).unwrap()).unwrap();
    let fresh = gen_task(&TaskSpec::default(), 1).unwrap().test_id.x;
    let fresh_path = dir.path().join("fresh.lire");
    data::write_energy_file(&extract_energies(&net, &fresh).unwrap(), &fresh_path).unwrap();

    let test_id = data::read_energy_file(&seed_dir.join("energies_test_id.lire")).unwrap();
    for name in ["ebo", "ag_md", "ag_knn", "ag_vae"] {
        let det_path = seed_dir.join(format!("detector_{name}.lird"));
        let det = Detector::load(&det_path).unwrap();
        let mut oriented: Vec<f64> = det
            .score_matrix(&test_id)
            .unwrap()
            .into_iter()
            .map(|s| det.id_score(s))
            .collect();
        oriented.sort_by(f64::total_cmp);
        let q = oriented[(0.05 * oriented.len() as f64).floor() as usize];
        let threshold = if det.orientation().high_is_id { q } else { -q };

        let mut csv = Vec::new();
        cli::cmd_score(&det_path, &fresh_path, Some(threshold), &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("index,score,verdict"));
        let verdicts: Vec<&str> = lines.map(|l| l.rsplit(',').next().unwrap()).collect();
        assert_eq!(verdicts.len(), fresh.len());
        let accepted = verdicts.iter().filter(|&&v| v == "ID").count() as f64 / verdicts.len() as f64;
        assert!(accepted >= 0.93, "{name}: accepted {accepted}");
    }
}

#[test]
fn report_has_bhl_at_least_ebo_with_logits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("seeds = 1\ninclude_logits = true\ndetectors = ebo,bhl\n", dir.path()).unwrap();
    let evals = cli::cmd_eval(&cfg, &dir.path().join("run")).unwrap();
    let csv = std::fs::read_to_string(cli::seed_dir(&dir.path().join("run"), 1).join("eval_report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("detector,layer,split_name,auroc,fpr_at_tpr95,n_id,n_ood")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let splits: Vec<&str> = rows.iter().filter(|r| r[0] == "ebo").map(|r| r[2]).collect();
    assert_eq!(splits.len(), 9);
    for s in splits {
        let get = |d: &str| -> f64 {
            rows.iter().find(|r| r[0] == d && r[2] == s).unwrap()[3].parse().unwrap()
        };
        assert!(get("bhl") >= get("ebo"), "{s}");
    }
    assert_eq!(evals[0].rows.len(), 18);
}

#[test]
fn binary_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    for cmd in ["gen", "train", "eval"] {
        let o = lir(&[cmd, "--config", cfg]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let run = dir.path().join("run");
    let seed = run.join("seed_3");
    for f in [
        "task/train_id.csv",
        "task/far_ood.csv",
        "task/gaussian_noise_2.csv",
        "net.lirn",
        "train_log.csv",
        "eval_report.csv",
        "eval_summary.json",
        "layer_profile.svg",
        "detector_ag_md.lird",
        "energies_far_ood.lire",
    ] {
        assert!(seed.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest_eval.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([3]));
    assert_eq!(manifest["formats"]["LIRE"], 1);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    // --seed overrides the config and --out relocates the run.
    let other = dir.path().join("other");
    let o = lir(&["train", "--config", cfg, "--seed", "5", "--seed", "6", "--out", other.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(other.join("seed_5/net.lirn").exists() && other.join("seed_6/net.lirn").exists());
    assert!(!other.join("seed_3").exists());

    let det = seed.join("detector_ebo.lird");
    let energies = seed.join("energies_test_id.lire");
    let o = lir(&[
        "score",
        "--detector",
        det.to_str().unwrap(),
        "--energies",
        energies.to_str().unwrap(),
        "--threshold",
        "0",
    ]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 101);
    assert!(stdout.lines().skip(1).all(|l| l.ends_with(",ID") || l.ends_with(",OOD")));
}

#[test]
fn eval_reuses_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(SMALL, dir.path()).unwrap();
    let out = dir.path().join("run");
    let trained = cli::cmd_train(&cfg, &out).unwrap();
    let ckpt = std::fs::read(cli::seed_dir(&out, 3).join("net.lirn")).unwrap();
    assert_eq!(ckpt, trained[0].0.to_bytes());
    cli::cmd_eval(&cfg, &out).unwrap();
    assert_eq!(std::fs::read(cli::seed_dir(&out, 3).join("net.lirn")).unwrap(), ckpt);
}

#[test]
fn failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = lir(&["eval", "--config", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config:"));

    let bad = write_config(dir.path(), "train.epochz = 3\nout = run\n");
    let o = lir(&["train", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("config:") && err.contains("unknown key"), "{err}");

    let cfg = write_config(dir.path(), "out = run\n");
    let o = lir(&["gen", "--config", cfg.to_str().unwrap(), "--seed", "x"]);
    assert!(!o.status.success());

    // A detector for 3 taps against a 2-column energy file.
    let det = dir.path().join("ebo.lird");
    Detector::ebo_logits(3).save(&det).unwrap();
    let energies = dir.path().join("e.lire");
    data::write_energy_file(&data::EnergyMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), &energies).unwrap();
    let o = lir(&[
        "score",
        "--detector",
        det.to_str().unwrap(),
        "--energies",
        energies.to_str().unwrap(),
        "--threshold",
        "0",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("score:"));

    let o = lir(&[
        "score",
        "--detector",
        det.to_str().unwrap(),
        "--energies",
        energies.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no threshold"));

    // A checkpoint whose dims do not fit the task.
    let run = dir.path().join("run");
    std::fs::create_dir_all(run.join("seed_0")).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let wrong = Net::new_random(&[3, 4, 3], &mut rng).unwrap();
    std::fs::write(run.join("seed_0/net.lirn"), wrong.to_bytes()).unwrap();
    let o = lir(&["eval", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("eval:"));
}
