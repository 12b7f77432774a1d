//! Aggregate reporting: scan an experiment directory's per-run metrics and
//! render mean +/- sd tables as markdown plus machine-readable CSV summaries.
//! Regeneration is idempotent; missing per-run files become flagged gaps
//! rather than failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ndgrad::NdError;
use crate::simsuite::SimilarityReport;

pub const REPORT_MD: &str = "report.md";
pub const ACCURACY_SUMMARY: &str = "accuracy_summary.csv";
pub const SIMILARITY_SUMMARY: &str = "similarity_summary.csv";

const MEASURES: [&str; 5] = ["cca", "svcca", "pwcca_ij", "pwcca_ji", "cka"];
const SPLITS: [&str; 2] = ["train", "holdout"];

/// One parsed `accuracy.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub model: String,
    pub modality: usize,
    pub split: String,
    pub acc: f64,
}

/// Everything found for one completed (cell, seed) run.
#[derive(Debug, Clone)]
struct RunMetrics {
    accuracy: Vec<AccuracyRow>,
    similarity: Vec<SimilarityReport>,
}

/// Paths written by [`emit_report`], plus any gaps encountered.
#[derive(Debug, Clone)]
pub struct ReportOutputs {
    pub markdown: PathBuf,
    pub accuracy_summary: PathBuf,
    pub similarity_summary: PathBuf,
    pub gaps: Vec<String>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn parse_accuracy_csv(text: &str, source: &str) -> Result<Vec<AccuracyRow>, NdError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(NdError::Format(format!("{source}:{}: expected 4 fields", i + 1)));
        }
        let bad = |what: &str| NdError::Format(format!("{source}:{}: bad {what}", i + 1));
        rows.push(AccuracyRow {
            model: fields[0].to_string(),
            modality: fields[1].parse().map_err(|_| bad("modality"))?,
            split: fields[2].to_string(),
            acc: fields[3].parse().map_err(|_| bad("accuracy"))?,
        });
    }
    Ok(rows)
}

/// Seed directories of one cell, sorted numerically by seed.
fn seed_dirs(cell_dir: &Path) -> Result<Vec<(u64, PathBuf)>, NdError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(cell_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().is_dir() {
                out.push((seed, entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn load_run(dir: &Path, label: &str, gaps: &mut Vec<String>) -> Option<RunMetrics> {
    let acc_path = dir.join("accuracy.csv");
    let sim_path = dir.join("similarity.json");
    let accuracy = match fs::read_to_string(&acc_path) {
        Ok(text) => match parse_accuracy_csv(&text, &acc_path.to_string_lossy()) {
            Ok(rows) => Some(rows),
            Err(e) => {
                gaps.push(format!("{label}: unreadable accuracy.csv ({e})"));
                None
            }
        },
        Err(_) => {
            gaps.push(format!("{label}: missing accuracy.csv"));
            None
        }
    };
    let similarity = match fs::read_to_string(&sim_path) {
        Ok(text) => match serde_json::from_str::<Vec<SimilarityReport>>(&text) {
            Ok(reports) => Some(reports),
            Err(e) => {
                gaps.push(format!("{label}: unreadable similarity.json ({e})"));
                None
            }
        },
        Err(_) => {
            gaps.push(format!("{label}: missing similarity.json"));
            None
        }
    };
    match (accuracy, similarity) {
        (None, None) => None,
        (a, s) => Some(RunMetrics { accuracy: a.unwrap_or_default(), similarity: s.unwrap_or_default() }),
    }
}

fn measure(rep: &SimilarityReport, name: &str) -> f64 {
    match name {
        "cca" => rep.cca,
        "svcca" => rep.svcca,
        "pwcca_ij" => rep.pwcca_ij,
        "pwcca_ji" => rep.pwcca_ji,
        "cka" => rep.cka,
        other => unreachable!("unknown measure {other}"),
    }
}

/// Render `report.md`, `accuracy_summary.csv`, and `similarity_summary.csv`
/// from the per-run metrics under `dir`. Layout: `dir/<cell>/seed-<k>/...`.
pub fn emit_report(dir: &Path) -> Result<ReportOutputs, NdError> {
    if !dir.is_dir() {
        return Err(NdError::Invalid(format!("{} is not a directory", dir.display())));
    }
    let mut cells: Vec<(String, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    cells.sort();

    let mut gaps = Vec::new();
    // (model, seed) -> metrics, in sorted model order
    let mut runs: Vec<(String, u64, RunMetrics)> = Vec::new();
    for (name, path) in &cells {
        for (seed, seed_dir) in seed_dirs(path)? {
            let label = format!("{name}@seed-{seed}");
            if let Some(metrics) = load_run(&seed_dir, &label, &mut gaps) {
                runs.push((name.clone(), seed, metrics));
            }
        }
    }
    if runs.is_empty() && gaps.is_empty() {
        return Err(NdError::Invalid(format!(
            "no run directories (<cell>/seed-<k>) under {}",
            dir.display()
        )));
    }

    // Accuracy: (model, modality, split) -> per-seed values.
    let mut acc: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
    // Similarity: (model, split, measure) -> per-seed values.
    let mut sim: BTreeMap<(String, String, &'static str), Vec<f64>> = BTreeMap::new();
    let mut seeds_per_model: BTreeMap<String, usize> = BTreeMap::new();
    for (model, _seed, metrics) in &runs {
        *seeds_per_model.entry(model.clone()).or_insert(0) += 1;
        for row in &metrics.accuracy {
            acc.entry((model.clone(), row.modality, row.split.clone())).or_default().push(row.acc);
        }
        for rep in &metrics.similarity {
            for m in MEASURES {
                sim.entry((model.clone(), rep.split.clone(), m)).or_default().push(measure(rep, m));
            }
        }
    }

    let split_order = |s: &str| SPLITS.iter().position(|x| *x == s).unwrap_or(SPLITS.len());

    // accuracy_summary.csv
    let mut acc_csv = String::from("model,modality,split,mean,sd,seeds\n");
    let mut acc_keys: Vec<_> = acc.keys().cloned().collect();
    acc_keys.sort_by_key(|(m, mod_, s)| (m.clone(), *mod_, split_order(s)));
    for key in &acc_keys {
        let (model, modality, split) = key;
        let (mean, sd) = mean_sd(&acc[key]);
        acc_csv.push_str(&format!("{model},{modality},{split},{mean:.4},{sd:.4},{}\n", acc[key].len()));
    }

    // similarity_summary.csv: one row per (model, split)
    let mut sim_csv = String::from("model,split,");
    sim_csv.push_str(
        &MEASURES.map(|m| format!("{m}_mean,{m}_sd")).join(","),
    );
    sim_csv.push_str(",seeds\n");
    let mut sim_rows: Vec<(String, String)> = sim
        .keys()
        .map(|(model, split, _)| (model.clone(), split.clone()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    sim_rows.sort_by_key(|(m, s)| (m.clone(), split_order(s)));
    for (model, split) in &sim_rows {
        sim_csv.push_str(&format!("{model},{split}"));
        let mut n = 0;
        for m in MEASURES {
            let values = &sim[&(model.clone(), split.clone(), m)];
            n = values.len();
            let (mean, sd) = mean_sd(values);
            sim_csv.push_str(&format!(",{mean:.4},{sd:.4}"));
        }
        sim_csv.push_str(&format!(",{n}\n"));
    }

    // report.md
    let mut md = String::from("# Experiment report\n\n");
    md.push_str("Aggregates over seeds of the per-run metrics in this directory. ");
    md.push_str("The sd column is \u{2014} for single-seed cells.\n\n");
    md.push_str("## Linear evaluation (top-1 accuracy)\n\n");
    md.push_str("| model | modality | split | mean | sd | seeds |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for key in &acc_keys {
        let (model, modality, split) = key;
        let values = &acc[key];
        let (mean, sd) = mean_sd(values);
        let sd_cell = if values.len() < 2 { "\u{2014}".to_string() } else { format!("{sd:.4}") };
        md.push_str(&format!("| {model} | {modality} | {split} | {mean:.4} | {sd_cell} | {} |\n", values.len()));
    }
    md.push_str("\n## Representation similarity\n\n");
    md.push_str("Cross-modal similarity of the two encoders' latents, per split.\n\n");
    md.push_str("| model | split | cca | svcca | pwcca_ij | pwcca_ji | cka | seeds |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for (model, split) in &sim_rows {
        md.push_str(&format!("| {model} | {split} |"));
        let mut n = 0;
        for m in MEASURES {
            let values = &sim[&(model.clone(), split.clone(), m)];
            n = values.len();
            let (mean, sd) = mean_sd(values);
            if values.len() < 2 {
                md.push_str(&format!(" {mean:.4} |"));
            } else {
                md.push_str(&format!(" {mean:.4} \u{00b1} {sd:.4} |"));
            }
        }
        md.push_str(&format!(" {n} |\n"));
    }
    md.push_str("\n## Gaps\n\n");
    if gaps.is_empty() {
        md.push_str("none\n");
    } else {
        for gap in &gaps {
            md.push_str(&format!("- {gap}\n"));
        }
    }

    let outputs = ReportOutputs {
        markdown: dir.join(REPORT_MD),
        accuracy_summary: dir.join(ACCURACY_SUMMARY),
        similarity_summary: dir.join(SIMILARITY_SUMMARY),
        gaps,
    };
    fs::write(&outputs.markdown, md)?;
    fs::write(&outputs.accuracy_summary, acc_csv)?;
    fs::write(&outputs.similarity_summary, sim_csv)?;
    Ok(outputs)
}
