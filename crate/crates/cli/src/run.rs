//! `ilnet run`: one training run and everything needed to reproduce it.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use ilnet_core::eval::APReport;
use ilnet_core::model::save_checkpoint;
use ilnet_core::synthdata::{make_eval_set, make_splits};
use ilnet_core::trainer::{run_training, HyperConfig};

use crate::manifest::write_manifest;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.txt";

/// Reads a config file, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<HyperConfig> {
    let Some(path) = path else { return Ok(HyperConfig::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    HyperConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

/// Seeds both data generation and training.
pub fn with_seed(mut cfg: HyperConfig, seed: u64) -> HyperConfig {
    cfg.seed = seed;
    cfg.data.seed = seed;
    cfg
}

/// Trains with `cfg` and writes the resolved config, metrics log, final
/// report, both checkpoints and a manifest under `out`.
pub fn run_with_config(cfg: &HyperConfig, config_path: Option<&Path>, out: &Path) -> Result<APReport> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let split = make_splits(&cfg.data)?;
    let eval = make_eval_set(&cfg.data);
    let log_path = out.join(METRICS_FILE);
    let mut sink = BufWriter::new(File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?);
    let art = run_training(cfg, &split, &eval, &mut sink)?;
    drop(sink);

    let iters = art.iterations as u64;
    save_checkpoint(&art.teacher, iters, &out.join("checkpoints/teacher"))?;
    save_checkpoint(&art.student, iters, &out.join("checkpoints/student"))?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&art.final_report)? + "\n")?;
    fs::write(out.join("report.txt"), art.final_report.summary_table())?;
    write_manifest(out, "run", config_path, Some(cfg.seed))?;
    Ok(art.final_report)
}

pub fn cmd_run(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<APReport> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg = with_seed(cfg, s);
    }
    run_with_config(&cfg, config, out)
}
