//! Comparison tables across runs: one row per (IND domain, OOD domain,
//! method), rendered as text, CSV and JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{artifacts, write_json, ExperimentReport, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub ind_domain: String,
    pub ood_domain: String,
    pub method: Method,
    pub fpr_at_90: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub ece: f64,
    pub ece_after_calibration: Option<f64>,
    pub ind_accuracy: f64,
    pub seed: u64,
}

/// Table rows ordered by domain pair, then method. Runs on the same domain
/// pair must share a dataset fingerprint.
pub fn rows(reports: &[ExperimentReport]) -> Result<Vec<ReportRow>> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no completed runs to report".into()));
    }
    let mut fingerprints: BTreeMap<(&str, &str), &str> = BTreeMap::new();
    for r in reports {
        let key = (r.ind_domain.as_str(), r.ood_domain.as_str());
        let fp = fingerprints.entry(key).or_insert(&r.dataset_fingerprint);
        if *fp != r.dataset_fingerprint {
            return Err(Error::InvalidInput(format!(
                "runs for {} -> {} were made on different datasets",
                key.0, key.1
            )));
        }
    }
    let mut rows: Vec<ReportRow> = reports
        .iter()
        .map(|r| ReportRow {
            ind_domain: r.ind_domain.clone(),
            ood_domain: r.ood_domain.clone(),
            method: r.method,
            fpr_at_90: r.metrics.fpr_at_90,
            auroc: r.metrics.auroc,
            aupr: r.metrics.aupr,
            ece: r.metrics.ece,
            ece_after_calibration: r.metrics.ece_after_calibration,
            ind_accuracy: r.ind_accuracy,
            seed: r.seed,
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.ind_domain, &a.ood_domain, a.method, a.seed).cmp(&(&b.ind_domain, &b.ood_domain, b.method, b.seed))
    });
    Ok(rows)
}

/// Find `experiment.json` in each directory, or one level below it.
pub fn collect_reports(dirs: &[PathBuf]) -> Result<Vec<ExperimentReport>> {
    let mut out = Vec::new();
    for dir in dirs {
        let direct = dir.join(artifacts::EXPERIMENT);
        if direct.is_file() {
            out.push(ExperimentReport::load(&direct)?);
            continue;
        }
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(artifacts::EXPERIMENT).is_file())
            .collect();
        if subdirs.is_empty() {
            return Err(Error::InvalidInput(format!("{}: no completed run found", dir.display())));
        }
        subdirs.sort();
        for sub in subdirs {
            out.push(ExperimentReport::load(&sub.join(artifacts::EXPERIMENT))?);
        }
    }
    Ok(out)
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

pub fn render_text(rows: &[ReportRow]) -> String {
    let header = [
        "IND", "OOD", "Method", "FPR@90 ↓", "AUROC ↑", "AUPR ↑", "ECE ↓", "ECE+cal ↓", "IND acc",
    ];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.ind_domain.clone(),
                r.ood_domain.clone(),
                r.method.tag().to_owned(),
                cell(Some(r.fpr_at_90)),
                cell(Some(r.auroc)),
                cell(Some(r.aupr)),
                cell(Some(r.ece)),
                cell(r.ece_after_calibration),
                cell(Some(r.ind_accuracy)),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_owned() + "\n"
    };
    let mut out = line(header.to_vec());
    out += &line(widths.iter().map(|&w| &"--------------------------------"[..w.min(32)]).collect());
    for row in &body {
        out += &line(row.iter().map(String::as_str).collect());
    }
    out
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(path, i + 2, e.to_string())))
        .collect()
}

pub fn write_json_rows(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_json(path, &rows)
}

pub fn read_json_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Write `report.txt`, `report.csv` and `report.json` into `dir`.
pub fn write_all(dir: &Path, reports: &[ExperimentReport]) -> Result<Vec<ReportRow>> {
    let rows = rows(reports)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text_path = dir.join(artifacts::REPORT_TEXT);
    std::fs::write(&text_path, render_text(&rows)).map_err(|e| Error::io(&text_path, e))?;
    write_csv(&dir.join(artifacts::REPORT_CSV), &rows)?;
    write_json_rows(&dir.join(artifacts::REPORT_JSON), &rows)?;
    Ok(rows)
}
