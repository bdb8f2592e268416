//! `ilnet analyze`: tables and plots from a run's metrics log, or from a
//! sweep's summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ilnet_core::eval::{error_concentration, loss_share_series, QualityHistogram, SHARE_NAMES};
use ilnet_core::trainer::MetricsRecord;

use crate::manifest::write_manifest;
use crate::plots::{histogram, lines, Series};
use crate::run::METRICS_FILE;
use crate::sweep::SUMMARY_FILE;

/// Split between low- and high-quality pseudo-labels.
pub const SPLIT_IOU: f64 = 0.6;

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read log {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: bad record", path.display(), i + 1)))
        .collect()
}

/// Sum of every quality snapshot in the log, or `None` without snapshots.
pub fn aggregate_quality(records: &[MetricsRecord]) -> Option<QualityHistogram> {
    let mut snaps = records.iter().filter_map(|r| r.quality.as_ref());
    let first = snaps.next()?;
    let mut acc = first.clone();
    for h in snaps {
        for i in 0..acc.bins().min(h.bins()) {
            acc.counts[i] += h.counts[i];
            acc.wrong_class[i] += h.wrong_class[i];
        }
        acc.iteration = h.iteration;
    }
    Some(acc)
}

pub fn shares_csv(records: &[MetricsRecord]) -> String {
    let (rows, _) = loss_share_series(records);
    let mut s = format!("iteration,{}\n", SHARE_NAMES.join(","));
    for r in rows {
        let vals: Vec<String> = r.shares.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{},{}", r.iteration, vals.join(","));
    }
    s
}

fn snapshots_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("iteration,bin_low,bin_high,count,wrong_class_count\n");
    for h in records.iter().filter_map(|r| r.quality.as_ref()) {
        for i in 0..h.bins() {
            let _ = writeln!(s, "{},{:.2},{:.2},{},{}", h.iteration, h.edges[i], h.edges[i + 1], h.counts[i], h.wrong_class[i]);
        }
    }
    s
}

fn ap_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("iteration,evaluated,mAP,AP50,AP75\n");
    for r in records {
        if let Some(ap) = &r.ap {
            let who = r.evaluated.as_deref().unwrap_or("");
            let _ = writeln!(s, "{},{who},{},{},{}", r.iteration, ap.map, ap.ap50, ap.ap75);
        }
    }
    s
}

fn concentration_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("iteration,split_iou,pseudo_below,errors_below\n");
    for h in records.iter().filter_map(|r| r.quality.as_ref()) {
        if let Ok((b, e)) = error_concentration(h, SPLIT_IOU) {
            let _ = writeln!(s, "{},{SPLIT_IOU},{b},{e}", h.iteration);
        }
    }
    s
}

fn analyze_run(log: &Path, out: &Path) -> Result<()> {
    let records = read_records(log)?;
    let agg = aggregate_quality(&records).unwrap_or_else(|| QualityHistogram::empty(10, 0));
    fs::write(out.join("pseudo_quality.csv"), agg.to_csv())?;
    fs::write(out.join("quality_snapshots.csv"), snapshots_csv(&records))?;
    fs::write(out.join("loss_shares.csv"), shares_csv(&records))?;
    fs::write(out.join("ap_series.csv"), ap_csv(&records))?;
    fs::write(out.join("error_concentration.csv"), concentration_csv(&records))?;

    let counts: Vec<f64> = agg.counts.iter().map(|&c| c as f64).collect();
    let wrong: Vec<f64> = agg.wrong_class.iter().map(|&c| c as f64).collect();
    histogram(&out.join("pseudo_iou.svg"), "IoU of pseudo-labels", "IoU with closest object", &agg.edges, &counts)?;
    histogram(&out.join("class_errors.svg"), "Pseudo-labels with the wrong class", "IoU with closest object", &agg.edges, &wrong)?;

    let per_snapshot: Vec<Series> = records
        .iter()
        .filter_map(|r| r.quality.as_ref())
        .map(|h| Series {
            name: format!("iter {}", h.iteration),
            points: (0..h.bins()).map(|i| (0.5 * (h.edges[i] + h.edges[i + 1]), h.counts[i] as f64)).collect(),
        })
        .collect();
    lines(&out.join("pseudo_per_snapshot.svg"), "Pseudo-labels per IoU bin", "IoU", "count", &per_snapshot)?;

    let (rows, _) = loss_share_series(&records);
    let share = |k: usize| Series {
        name: SHARE_NAMES[k].into(),
        points: rows.iter().map(|r| (r.iteration as f64, r.shares[k])).collect(),
    };
    lines(&out.join("loss_shares.svg"), "Share of each loss term", "iteration", "share of total", &(0..6).map(share).collect::<Vec<_>>())?;

    let ap_points: Vec<(f64, f64)> =
        records.iter().filter_map(|r| r.ap.as_ref().map(|a| (r.iteration as f64, a.map))).collect();
    lines(&out.join("ap_series.svg"), "Held-out mAP", "iteration", "mAP", &[Series { name: "mAP".into(), points: ap_points }])?;
    Ok(())
}

fn analyze_sweep(summary: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(summary)?;
    fs::write(out.join("sweep_summary.csv"), &text)?;
    let mut mean = Vec::new();
    let mut min = Vec::new();
    let mut max = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().skip(1).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 6 {
            bail!("{}: malformed row `{line}`", summary.display());
        }
        labels.push(format!("{}={}", f[0], f[1]));
        let x = i as f64;
        mean.push((x, f[3].parse::<f64>()?));
        min.push((x, f[4].parse::<f64>()?));
        max.push((x, f[5].parse::<f64>()?));
    }
    let title = format!("mAP by value: {}", labels.join(", "));
    lines(
        &out.join("sweep_comparison.svg"),
        &title,
        "value index",
        "mAP (%)",
        &[
            Series { name: "mean".into(), points: mean },
            Series { name: "min".into(), points: min },
            Series { name: "max".into(), points: max },
        ],
    )
}

pub fn cmd_analyze(log_dir: &Path, out: &Path) -> Result<()> {
    let log = log_dir.join(METRICS_FILE);
    let summary = log_dir.join(SUMMARY_FILE);
    if !log.exists() && !summary.exists() {
        bail!("{} holds neither {METRICS_FILE} nor {SUMMARY_FILE}", log_dir.display());
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    if log.exists() {
        analyze_run(&log, out)?;
    }
    if summary.exists() {
        analyze_sweep(&summary, out)?;
    }
    write_manifest(out, "analyze", None, None)?;
    Ok(())
}
