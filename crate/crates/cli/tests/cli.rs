use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ilnet_cli::analyze::{read_records, shares_csv};
use ilnet_cli::manifest::{read_manifest, sha256_hex};
use ilnet_core::eval::loss_share_series;

const SHORT: &str = "total_iters = 30\nburn_up_iters = 10\nnum_scenes = 60\neval_scenes = 8\nlog_interval = 5\n\
eval_interval = 15\nquality_interval = 10\nquality_scenes = 8\ndelta = 0.3\n";

fn ilnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilnet")).args(args).current_dir(cwd).env_remove("ILNET_SCRATCH").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = ilnet(&["run", "--config", "nowhere.cfg", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.cfg"), "{}", stderr(&o));
    assert!(!dir.path().join("out/metrics.jsonl").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "learning_rate = 0.1\n").unwrap();
    let o = ilnet(&["run", "--config", "bad.cfg", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn zero_iterations_write_an_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("z.cfg"), "total_iters = 0\nburn_up_iters = 0\nnum_scenes = 20\neval_scenes = 4\n").unwrap();
    let o = ilnet(&["run", "--config", "z.cfg", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(dir.path().join("out/metrics.jsonl")).unwrap(), b"");
    assert!(dir.path().join("out/checkpoints/teacher/params.bin").exists());
}

#[test]
fn run_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("short.cfg"), SHORT).unwrap();
    let o = ilnet(&["run", "--config", "short.cfg", "--seed", "3", "--out", "run"], root);
    assert!(o.status.success(), "{}", stderr(&o));

    let manifest = read_manifest(&root.join("run")).unwrap();
    assert_eq!(manifest.seed, Some(3));
    for (rel, hash) in &manifest.outputs {
        assert_eq!(&sha256_hex(&fs::read(root.join("run").join(rel)).unwrap()), hash, "{rel}");
    }

    let records = read_records(&root.join("run/metrics.jsonl")).unwrap();
    assert_eq!(records.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![5, 10, 15, 20, 25, 30]);
    assert!(records.iter().all(|r| r.total.is_finite()));

    let o = ilnet(&["analyze", "--log-dir", "run", "--out", "an"], root);
    assert!(o.status.success(), "{}", stderr(&o));
    let an = root.join("an");
    for f in ["pseudo_quality.csv", "loss_shares.csv", "ap_series.csv", "pseudo_iou.svg", "loss_shares.svg", "manifest.json"] {
        assert!(an.join(f).exists(), "{f}");
    }

    // the aggregated histogram adds up to the snapshots in the log
    let text = fs::read_to_string(an.join("pseudo_quality.csv")).unwrap();
    let (mut count, mut wrong) = (0u64, 0u64);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        count += f[2].parse::<u64>().unwrap();
        wrong += f[3].parse::<u64>().unwrap();
    }
    let snaps: Vec<_> = records.iter().filter_map(|r| r.quality.as_ref()).collect();
    assert!(!snaps.is_empty());
    assert_eq!(count, snaps.iter().map(|h| h.total()).sum::<u64>());
    assert_eq!(wrong, snaps.iter().map(|h| h.total_wrong()).sum::<u64>());

    // loss shares match the library series and sum to one per row
    let shares = fs::read_to_string(an.join("loss_shares.csv")).unwrap();
    assert_eq!(shares, shares_csv(&records));
    let (rows, _) = loss_share_series(&records);
    assert_eq!(shares.lines().count(), rows.len() + 1);
    for row in &rows {
        assert!((row.shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn sweep_rejects_unknown_parameter() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.spec"), "parameter = colour\nvalues = 1,2\nseeds = 0\n").unwrap();
    let o = ilnet(&["sweep", "--spec", "s.spec", "--out", "sw"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn sweep_over_arms() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("short.cfg"), SHORT.replace("total_iters = 30", "total_iters = 12")).unwrap();
    fs::write(root.join("arm.spec"), "parameter = arm\nvalues = ilnet, baseline\nseeds = 0, 1\nbase_config = short.cfg\n")
        .unwrap();
    let o = ilnet(&["sweep", "--spec", "arm.spec", "--out", "sw"], root);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(root.join("sw/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("arm,ilnet,2,") && lines[2].starts_with("arm,baseline,2,"));
    assert_eq!(fs::read_to_string(root.join("sw/runs.csv")).unwrap().lines().count(), 5);
    let cfg = fs::read_to_string(root.join("sw/runs/arm_baseline/seed_1/config.txt")).unwrap();
    assert!(cfg.contains("filter_enabled = false"), "{cfg}");

    let o = ilnet(&["analyze", "--log-dir", "sw", "--out", "an"], root);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("an/sweep_summary.csv").exists() && root.join("an/sweep_comparison.svg").exists());
}

#[test]
fn shipped_configs_and_sweeps_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    for name in ["default", "baseline", "quick"] {
        let path = root.join(format!("configs/{name}.cfg"));
        ilnet_cli::run::load_config(Some(&path)).unwrap();
    }
    for name in ["arm", "beta", "mu"] {
        let path = root.join(format!("sweeps/{name}.spec"));
        let text = fs::read_to_string(&path).unwrap();
        let spec = ilnet_cli::sweep::SweepSpec::parse(&text, path.parent().unwrap()).unwrap();
        let base = ilnet_cli::run::load_config(spec.base_config.as_deref()).unwrap();
        for v in &spec.values {
            spec.config_for(&base, v, 0).unwrap();
        }
    }
    let base = ilnet_cli::run::load_config(Some(&root.join("configs/default.cfg"))).unwrap();
    assert_eq!(base, ilnet_core::trainer::HyperConfig::default());
    let bl = ilnet_cli::run::load_config(Some(&root.join("configs/baseline.cfg"))).unwrap();
    assert_eq!(bl, ilnet_core::trainer::HyperConfig::default().baseline());
}
