//! `ilnet sweep`: one run per (value, seed) and a per-value summary table.
//!
//! A sweep spec uses the same `key = value` format as configs:
//!
//! ```text
//! parameter = beta
//! values = 0.5, 1, 2, 4
//! seeds = 0, 1, 2
//! base_config = base.cfg   # optional, relative to the spec file
//! ```
//!
//! `parameter` is one of `beta`, `mu`, `theta`, `gamma_iou`, `branch_mask`,
//! `filter_enabled`, or `arm` with values `ilnet` and `baseline`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ilnet_core::eval::APReport;
use ilnet_core::trainer::HyperConfig;

use crate::manifest::{read_manifest, write_manifest};
use crate::run::{load_config, run_with_config, with_seed, REPORT_FILE};

pub const SWEEP_PARAMETERS: &[&str] = &["beta", "mu", "theta", "gamma_iou", "branch_mask", "filter_enabled", "arm"];
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: String,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub base_config: Option<PathBuf>,
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl SweepSpec {
    /// `base_config` is resolved against `dir`.
    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let (mut parameter, mut values, mut seeds, mut base) = (None, None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else { bail!("line {}: expected `key = value`", i + 1) };
            let v = v.trim();
            match k.trim() {
                "parameter" => parameter = Some(v.to_string()),
                "values" => values = Some(list(v)),
                "seeds" => {
                    let s: Result<Vec<u64>, _> = list(v).iter().map(|x| x.parse::<u64>()).collect();
                    seeds = Some(s.with_context(|| format!("line {}: seeds must be integers", i + 1))?);
                }
                "base_config" => base = Some(dir.join(v)),
                other => bail!("line {}: unknown key `{other}`", i + 1),
            }
        }
        let spec = SweepSpec {
            parameter: parameter.context("missing `parameter`")?,
            values: values.context("missing `values`")?,
            seeds: seeds.context("missing `seeds`")?,
            base_config: base,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !SWEEP_PARAMETERS.contains(&self.parameter.as_str()) {
            bail!("parameter `{}` is not sweepable (one of {})", self.parameter, SWEEP_PARAMETERS.join(", "));
        }
        if self.values.is_empty() {
            bail!("sweep needs at least one value");
        }
        if self.seeds.is_empty() {
            bail!("sweep needs at least one seed");
        }
        Ok(())
    }

    /// Base config with this sweep's parameter set to `value`.
    pub fn config_for(&self, base: &HyperConfig, value: &str, seed: u64) -> Result<HyperConfig> {
        let cfg = if self.parameter == "arm" {
            match value {
                "ilnet" => base.clone(),
                "baseline" => base.clone().baseline(),
                other => bail!("arm must be `ilnet` or `baseline`, got `{other}`"),
            }
        } else {
            base.clone().with_override(&self.parameter, value)?
        };
        Ok(with_seed(cfg, seed))
    }

    pub fn run_dir(&self, out: &Path, value: &str, seed: u64) -> PathBuf {
        out.join("runs").join(format!("{}_{}", self.parameter, value)).join(format!("seed_{seed}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub report: APReport,
}

/// Mean, min and max of each metric per value, in percent.
pub fn summary_csv(parameter: &str, values: &[String], rows: &[SweepRow]) -> String {
    let mut s = String::from("parameter,value,seeds,AP_mean,AP_min,AP_max,AP50_mean,AP50_min,AP50_max,AP75_mean,AP75_min,AP75_max\n");
    for v in values {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| &r.value == v).collect();
        let _ = write!(s, "{parameter},{v},{}", group.len());
        for metric in [|r: &APReport| r.map, |r: &APReport| r.ap50, |r: &APReport| r.ap75] {
            let xs: Vec<f64> = group.iter().map(|r| 100.0 * metric(&r.report)).collect();
            let n = xs.len().max(1) as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = write!(s, ",{mean:.3},{min:.3},{max:.3}");
        }
        s.push('\n');
    }
    s
}

pub fn runs_csv(parameter: &str, rows: &[SweepRow]) -> String {
    let mut s = String::from("parameter,value,seed,AP,AP50,AP75\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{parameter},{},{},{:.3},{:.3},{:.3}",
            r.value,
            r.seed,
            100.0 * r.report.map,
            100.0 * r.report.ap50,
            100.0 * r.report.ap75
        );
    }
    s
}

/// Runs every (value, seed) pair not already completed under `out`, then
/// folds all run reports into the summary tables.
pub fn cmd_sweep(spec_path: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("cannot read sweep spec {}", spec_path.display()))?;
    let dir = spec_path.parent().unwrap_or(Path::new("."));
    let spec = SweepSpec::parse(&text, dir).with_context(|| format!("invalid sweep spec {}", spec_path.display()))?;
    run_sweep(&spec, out)
}

pub fn run_sweep(spec: &SweepSpec, out: &Path) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let base = load_config(spec.base_config.as_deref())?;
    let mut rows = Vec::new();
    for value in &spec.values {
        for &seed in &spec.seeds {
            let cfg = spec.config_for(&base, value, seed)?;
            let dir = spec.run_dir(out, value, seed);
            let complete = read_manifest(&dir).is_ok_and(|m| m.seed == Some(seed))
                && fs::read_to_string(dir.join(crate::run::CONFIG_FILE)).is_ok_and(|t| t == cfg.to_text());
            let report = if complete {
                serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE))?)?
            } else {
                run_with_config(&cfg, spec.base_config.as_deref(), &dir)?
            };
            rows.push(SweepRow { value: value.clone(), seed, report });
        }
    }
    fs::write(out.join(SUMMARY_FILE), summary_csv(&spec.parameter, &spec.values, &rows))?;
    fs::write(out.join(RUNS_FILE), runs_csv(&spec.parameter, &rows))?;
    write_manifest(out, "sweep", spec.base_config.as_deref(), None)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_spec() {
        let s = SweepSpec::parse("parameter = beta\nvalues = 0.5, 1.0, 2.0, 4.0\nseeds = 0,1,2\nbase_config = b.cfg\n", Path::new("/x"))
            .unwrap();
        assert_eq!(s.values.len(), 4);
        assert_eq!(s.seeds, vec![0, 1, 2]);
        assert_eq!(s.base_config, Some(PathBuf::from("/x/b.cfg")));
    }

    #[test]
    fn empty_seeds_rejected() {
        let e = SweepSpec::parse("parameter = mu\nvalues = 0.5\nseeds =\n", Path::new(".")).unwrap_err();
        assert!(format!("{e:#}").contains("seed"));
        assert!(SweepSpec::parse("parameter = lr\nvalues = 1\nseeds = 0", Path::new(".")).is_err());
    }

    #[test]
    fn overrides_apply() {
        let spec = SweepSpec::parse("parameter = mu\nvalues = 0.6\nseeds = 4", Path::new(".")).unwrap();
        let c = spec.config_for(&HyperConfig::default(), "0.6", 4).unwrap();
        assert_eq!((c.mu, c.seed, c.data.seed), (0.6, 4, 4));
        let arm = SweepSpec { parameter: "arm".into(), ..spec };
        let b = arm.config_for(&HyperConfig::default(), "baseline", 0).unwrap();
        assert!(!b.branch_enabled && !b.filter_enabled && b.weights.beta == 0.0);
        assert!(arm.config_for(&HyperConfig::default(), "other", 0).is_err());
    }

    fn rep(map: f64) -> APReport {
        APReport { map, ap50: map + 0.1, ap75: map - 0.1, per_class: vec![] }
    }

    #[test]
    fn summary_statistics() {
        let rows = vec![
            SweepRow { value: "1".into(), seed: 0, report: rep(0.5) },
            SweepRow { value: "1".into(), seed: 1, report: rep(0.7) },
            SweepRow { value: "2".into(), seed: 0, report: rep(0.4) },
        ];
        let csv = summary_csv("beta", &["1".into(), "2".into()], &rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "beta,1,2,60.000,50.000,70.000,70.000,60.000,80.000,50.000,40.000,60.000");
        assert!(lines[2].starts_with("beta,2,1,40.000,40.000,40.000"));
    }
}
