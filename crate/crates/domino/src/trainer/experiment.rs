//! Manifest runner: expand cells x seeds into independent runs, train and
//! evaluate each one into its own directory, then aggregate the bundle.
//! A failing run never stops the sweep; it is reported at the end.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::config::{Manifest, Precision, Resolved, TrainConfig};
use crate::datasets::PairedDataset;
use crate::ndgrad::{NdError, Scalar};
use crate::report::{emit_report, ReportOutputs};
use crate::simsuite::{collect_representations, compute_report, Split};
use crate::trainer::{linear_eval, modality_configs, pretrain};

/// What happened across the whole sweep, in sorted run-label order.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub completed: Vec<String>,
    pub failures: Vec<(String, String)>,
    pub report: ReportOutputs,
}

impl RunSummary {
    pub fn all_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Job {
    label: String,
    cell: String,
    dir: PathBuf,
    cfg: TrainConfig,
    data: Arc<(PairedDataset, PairedDataset)>,
}

/// The `losses.csv` format shared by `domino pretrain` and the runner.
pub fn write_losses(path: &Path, rows: &[crate::trainer::LossRow]) -> Result<(), NdError> {
    let mut csv = String::from("epoch,edge,value,lr\n");
    for row in rows {
        csv.push_str(&format!("{},{},{},{}\n", row.epoch, row.edge, row.value, row.lr));
    }
    fs::write(path, csv)?;
    Ok(())
}

fn run_typed<T: Scalar>(
    dir: &Path,
    cell: &str,
    res: &Resolved,
    data: &(PairedDataset, PairedDataset),
) -> Result<(), NdError> {
    let (train, holdout) = data;
    let result = pretrain::<T>(train, &res.graph, &res.base, &res.critic, &res.pre)?;
    write_losses(&dir.join("losses.csv"), &result.rows)?;
    result.store.save(&dir.join("checkpoint.ndck"))?;
    result.best.save(&dir.join("best.ndck"))?;
    if result.aborted {
        return Err(NdError::Invalid(
            "training aborted on nonfinite loss; checkpoint holds the last clean epoch".into(),
        ));
    }

    let cfgs = modality_configs(train, &res.base)?;
    let mut acc_csv = String::from("model,modality,split,acc\n");
    for m in 0..2 {
        let outcome =
            linear_eval(&result.store, &cfgs[m], m, train.modality(m)?, holdout.modality(m)?, &res.eval)?;
        acc_csv.push_str(&format!("{cell},{m},train,{}\n", outcome.train_acc));
        acc_csv.push_str(&format!("{cell},{m},holdout,{}\n", outcome.holdout_acc));
    }
    fs::write(dir.join("accuracy.csv"), acc_csv)?;

    let store64 = result.store.cast::<f64>();
    let mut reports = Vec::with_capacity(2);
    for (split, ds) in [(Split::Train, train), (Split::Holdout, holdout)] {
        let z0 = collect_representations(&store64, &cfgs[0], 0, ds.modality(0)?, split, res.eval.batch)?;
        let z1 = collect_representations(&store64, &cfgs[1], 1, ds.modality(1)?, split, res.eval.batch)?;
        reports.push(compute_report(cell, &z0, &z1)?);
    }
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| NdError::Format(format!("similarity encode: {e}")))?;
    fs::write(dir.join("similarity.json"), json + "\n")?;
    Ok(())
}

fn write_config_echo(dir: &Path, cfg: &TrainConfig) -> Result<(), NdError> {
    fs::create_dir_all(dir)?;
    let echo = serde_json::to_string_pretty(cfg)
        .map_err(|e| NdError::Format(format!("config echo: {e}")))?;
    fs::write(dir.join("config.json"), echo + "\n")?;
    Ok(())
}

fn run_one(job: &Job) -> Result<(), NdError> {
    let res = job.cfg.resolve()?;
    write_config_echo(&job.dir, &job.cfg)?;
    match res.precision {
        Precision::F32 => run_typed::<f32>(&job.dir, &job.cell, &res, &job.data),
        Precision::F64 => run_typed::<f64>(&job.dir, &job.cell, &res, &job.data),
    }
}

/// Run every (cell, seed) of `manifest` under `out_dir`, `jobs` runs at a
/// time, then aggregate `report.md` + summary CSVs. Run directories are
/// `out_dir/<cell>/seed-<k>`; reruns overwrite in place.
pub fn run_experiment(
    manifest: &Manifest,
    out_dir: &Path,
    jobs: usize,
) -> Result<RunSummary, NdError> {
    manifest.validate()?;
    fs::create_dir_all(out_dir)?;

    let mut queue = VecDeque::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    for cell in &manifest.cells {
        // One realization per cell: every seed trains on the same data. A
        // broken dataset fails the cell's runs but never the sweep.
        let spec = manifest.run_config(cell, cell.seeds[0])?;
        let data = match spec.dataset.realize(spec.resolve()?.preset) {
            Ok(data) => Arc::new(data),
            Err(e) => {
                for &seed in &cell.seeds {
                    let dir = out_dir.join(&cell.name).join(format!("seed-{seed}"));
                    let _ = write_config_echo(&dir, &manifest.run_config(cell, seed)?);
                    failures.push((format!("{}@seed-{seed}", cell.name), e.to_string()));
                }
                continue;
            }
        };
        for &seed in &cell.seeds {
            queue.push_back(Job {
                label: format!("{}@seed-{seed}", cell.name),
                cell: cell.name.clone(),
                dir: out_dir.join(&cell.name).join(format!("seed-{seed}")),
                cfg: manifest.run_config(cell, seed)?,
                data: Arc::clone(&data),
            });
        }
    }

    let queue = Mutex::new(queue);
    let results: Mutex<Vec<(String, Result<(), NdError>)>> = Mutex::new(Vec::new());
    let workers = jobs.max(1).min(queue.lock().unwrap().len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some(job) = queue.lock().unwrap().pop_front() else { break };
                let outcome = run_one(&job);
                results.lock().unwrap().push((job.label, outcome));
            });
        }
    });

    let mut completed = Vec::new();
    for (label, outcome) in results.into_inner().unwrap() {
        match outcome {
            Ok(()) => completed.push(label),
            Err(e) => failures.push((label, e.to_string())),
        }
    }
    completed.sort();
    failures.sort();
    let report = emit_report(out_dir)?;
    Ok(RunSummary { completed, failures, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CellSpec, DatasetSpec};
    use std::collections::BTreeMap;
    use tempfile::tempdir;

    fn tiny_manifest(cells: Vec<CellSpec>) -> Manifest {
        Manifest {
            cells,
            out_dir: None,
            lr: 4e-4,
            max_lr: 0.01,
            batch: 16,
            epochs: Some(1),
            precision: Precision::F32,
            preset: Some(crate::config::Preset::Small),
        }
    }

    fn tiny_cell(name: &str, edges: &[&str], seeds: &[u64]) -> CellSpec {
        CellSpec {
            name: name.into(),
            edges: edges.iter().map(|s| s.to_string()).collect(),
            weights: BTreeMap::new(),
            seeds: seeds.to_vec(),
            dataset: Some(DatasetSpec::Synth {
                n_train: Some(48),
                n_holdout: Some(32),
                num_classes: Some(4),
                seed: 0,
            }),
        }
    }

    const RUN_FILES: [&str; 6] = [
        "config.json",
        "losses.csv",
        "checkpoint.ndck",
        "best.ndck",
        "accuracy.csv",
        "similarity.json",
    ];

    #[test]
    fn sweep_produces_full_bundle() {
        let out = tempdir().unwrap();
        let manifest =
            tiny_manifest(vec![tiny_cell("AE", &["AE:0", "AE:1"], &[0, 1]), tiny_cell("CR", &["CR:0", "CR:1"], &[0])]);
        let summary = run_experiment(&manifest, out.path(), 1).unwrap();
        assert!(summary.all_ok(), "{:?}", summary.failures);
        assert_eq!(summary.completed, vec!["AE@seed-0", "AE@seed-1", "CR@seed-0"]);
        for run in ["AE/seed-0", "AE/seed-1", "CR/seed-0"] {
            for file in RUN_FILES {
                assert!(out.path().join(run).join(file).is_file(), "{run}/{file} missing");
            }
        }
        assert!(summary.report.gaps.is_empty(), "{:?}", summary.report.gaps);
        let md = fs::read_to_string(out.path().join("report.md")).unwrap();
        assert!(md.contains("| AE |") && md.contains("| CR |"), "{md}");
    }

    #[test]
    fn failures_are_isolated_and_listed() {
        let out = tempdir().unwrap();
        let mut bad = tiny_cell("RR", &["RR:0-1"], &[0]);
        bad.dataset =
            Some(DatasetSpec::Paired { train: "/nonexistent/t.ndck".into(), holdout: "/nonexistent/h.ndck".into() });
        let manifest = tiny_manifest(vec![tiny_cell("AE", &["AE:0", "AE:1"], &[0]), bad]);
        let summary = run_experiment(&manifest, out.path(), 1).unwrap();
        assert_eq!(summary.completed, vec!["AE@seed-0"]);
        assert_eq!(summary.failures.len(), 1);
        assert!(summary.failures[0].0.starts_with("RR@seed-0"), "{:?}", summary.failures);
        // The good cell still made it into the report.
        let acc = fs::read_to_string(out.path().join("accuracy_summary.csv")).unwrap();
        assert!(acc.contains("AE,0,holdout"), "{acc}");
    }

    #[test]
    fn reruns_are_bitwise_identical_and_jobs_do_not_matter() {
        let manifest = tiny_manifest(vec![
            tiny_cell("CR", &["CR:0", "CR:1"], &[7]),
            tiny_cell("AE", &["AE:0", "AE:1"], &[7]),
        ]);
        let (a, b, c) = (tempdir().unwrap(), tempdir().unwrap(), tempdir().unwrap());
        run_experiment(&manifest, a.path(), 1).unwrap();
        run_experiment(&manifest, b.path(), 1).unwrap();
        run_experiment(&manifest, c.path(), 2).unwrap();
        for run in ["CR/seed-7", "AE/seed-7"] {
            for file in RUN_FILES {
                let bytes = fs::read(a.path().join(run).join(file)).unwrap();
                assert_eq!(bytes, fs::read(b.path().join(run).join(file)).unwrap(), "{run}/{file}");
                assert_eq!(bytes, fs::read(c.path().join(run).join(file)).unwrap(), "{run}/{file}");
            }
        }
        for file in ["report.md", "accuracy_summary.csv", "similarity_summary.csv"] {
            let bytes = fs::read(a.path().join(file)).unwrap();
            assert_eq!(bytes, fs::read(c.path().join(file)).unwrap(), "{file}");
        }
    }
}
