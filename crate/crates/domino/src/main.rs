//! domino: train two-view contrastive models and analyze their
//! representations from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use domino::config::{parse_config, ParsedConfig, Precision, Resolved, TrainConfig};
use domino::datasets::idx::load_idx;
use domino::datasets::twodomain::pair_two_domain;
use domino::datasets::twoview::make_two_view;
use domino::datasets::{resolve_data_path, PairedDataset};
use domino::model::ParamStore;
use domino::ndgrad::{op_checks, GradCheckOpts, NdError, Scalar};
use domino::objectives::{edge_checks, PairGraph};
use domino::report::{emit_report, parse_accuracy_csv, AccuracyRow};
use domino::simsuite::{collect_representations, compute_report, Split};
use domino::trainer::{linear_eval, modality_configs, pretrain, run_experiment, write_losses};

#[derive(Parser)]
#[command(name = "domino", version, about = "Two-view contrastive training and analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build paired datasets: procedural pairs or pairs derived from IDX files.
    GenData {
        #[command(subcommand)]
        source: GenData,
    },
    /// Train one objective graph from a JSON config into an output directory.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Artifact directory (checkpoints and losses.csv).
        #[arg(long, default_value = "out/run")]
        out: PathBuf,
    },
    /// Linear evaluation of one modality of a trained checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        modality: usize,
    },
    /// Representation-similarity report between a checkpoint's two encoders.
    Similarity {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Rebuild the aggregate report for an experiment directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Finite-difference gradient checks for every op and edge loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Coordinates probed per leaf in the edge checks (0 = all).
        #[arg(long, default_value_t = 4)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Run a whole experiment manifest: every cell x seed, then the report.
    Run {
        manifest: PathBuf,
        /// Output directory; overrides the manifest's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Subcommand)]
enum GenData {
    /// Procedural glyph/grating class pairs.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_holdout: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving train.ndck and holdout.ndck.
        #[arg(long)]
        out: PathBuf,
    },
    /// Two views (rotated / noisy) of one IDX image set.
    TwoView {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-paired samples from two different IDX datasets.
    TwoDomain {
        #[arg(long)]
        images_a: PathBuf,
        #[arg(long)]
        labels_a: PathBuf,
        #[arg(long)]
        images_b: PathBuf,
        #[arg(long)]
        labels_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode, NdError> {
    match cmd {
        Cmd::GenData { source } => gen_data(source).map(|()| ExitCode::SUCCESS),
        Cmd::Pretrain { config, out } => cmd_pretrain(&config, &out).map(|()| ExitCode::SUCCESS),
        Cmd::Eval { ckpt, modality } => cmd_eval(&ckpt, modality).map(|()| ExitCode::SUCCESS),
        Cmd::Similarity { ckpt } => cmd_similarity(&ckpt).map(|()| ExitCode::SUCCESS),
        Cmd::Report { dir } => {
            let out = emit_report(&dir)?;
            for gap in &out.gaps {
                eprintln!("gap: {gap}");
            }
            println!("wrote {}", out.markdown.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GradCheck { seeds, coords, tol } => cmd_grad_check(seeds, coords, tol),
        Cmd::Run { manifest, out, jobs } => cmd_run(&manifest, out.as_deref(), jobs),
    }
}

fn gen_data(source: GenData) -> Result<(), NdError> {
    match source {
        GenData::Synth { n_train, n_holdout, classes, seed, out } => {
            let (train, holdout) =
                domino::datasets::synth::synth_split(n_train, n_holdout, classes, seed)?;
            fs::create_dir_all(&out)?;
            let (tp, hp) = (out.join("train.ndck"), out.join("holdout.ndck"));
            train.save(&tp)?;
            holdout.save(&hp)?;
            println!("wrote {} ({} pairs) and {} ({} pairs)", tp.display(), train.len(), hp.display(), holdout.len());
        }
        GenData::TwoView { images, labels, seed, out } => {
            let set = load_idx(&resolve_data_path(&images), &resolve_data_path(&labels))?;
            let ds = make_two_view(&set, seed)?;
            save_paired(&ds, &out)?;
        }
        GenData::TwoDomain { images_a, labels_a, images_b, labels_b, out } => {
            let a = load_idx(&resolve_data_path(&images_a), &resolve_data_path(&labels_a))?;
            let b = load_idx(&resolve_data_path(&images_b), &resolve_data_path(&labels_b))?;
            let ds = pair_two_domain(a, b)?;
            save_paired(&ds, &out)?;
        }
    }
    Ok(())
}

fn save_paired(ds: &PairedDataset, out: &Path) -> Result<(), NdError> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    ds.save(out)?;
    println!("wrote {} ({} pairs)", out.display(), ds.len());
    Ok(())
}

fn load_train_config(path: &Path) -> Result<(TrainConfig, Resolved), NdError> {
    match parse_config(path)? {
        ParsedConfig::Train(cfg) => {
            let res = cfg.resolve()?;
            Ok((*cfg, res))
        }
        ParsedConfig::Manifest(_) => Err(NdError::Invalid(format!(
            "{} is a manifest (has \"cells\"); use `domino run`",
            path.display()
        ))),
    }
}

/// Reads the `config.json` written next to a checkpoint during training.
fn sibling_config(ckpt: &Path) -> Result<(PathBuf, TrainConfig, Resolved), NdError> {
    let dir = ckpt
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let cfg_path = dir.join("config.json");
    if !cfg_path.is_file() {
        return Err(NdError::Invalid(format!(
            "no config.json next to {}; run `domino pretrain` first",
            ckpt.display()
        )));
    }
    let (cfg, res) = load_train_config(&cfg_path)?;
    Ok((dir, cfg, res))
}

fn model_label(graph: &PairGraph) -> String {
    const NAMED: [&str; 8] =
        ["CR", "XX-CC", "CR-XX-CC", "RR", "RR-AE", "CR-CCA", "AE", "Supervised"];
    let canon: Vec<String> = graph.edges().iter().map(|we| we.edge.to_string()).collect();
    for name in NAMED {
        if let Ok(g) = PairGraph::named(name) {
            let named: Vec<String> = g.edges().iter().map(|we| we.edge.to_string()).collect();
            if named == canon {
                return name.to_string();
            }
        }
    }
    canon.join("+")
}

fn cmd_pretrain(config: &Path, out: &Path) -> Result<(), NdError> {
    let (cfg, res) = load_train_config(config)?;
    let (train, _) = res.dataset.realize(res.preset)?;
    fs::create_dir_all(out)?;
    let echo = serde_json::to_string_pretty(&cfg)
        .map_err(|e| NdError::Format(format!("config echo: {e}")))?;
    fs::write(out.join("config.json"), echo + "\n")?;
    match res.precision {
        Precision::F32 => pretrain_typed::<f32>(&res, &train, out),
        Precision::F64 => pretrain_typed::<f64>(&res, &train, out),
    }
}

fn pretrain_typed<T: Scalar>(res: &Resolved, train: &PairedDataset, out: &Path) -> Result<(), NdError> {
    let start = Instant::now();
    let result = pretrain::<T>(train, &res.graph, &res.base, &res.critic, &res.pre)?;
    write_losses(&out.join("losses.csv"), &result.rows)?;
    result.store.save(&out.join("checkpoint.ndck"))?;
    result.best.save(&out.join("best.ndck"))?;
    let last = res.pre.epochs - 1;
    println!(
        "{} epochs in {:.1}s; final loss {:.4}, best epoch {} ({:.4}); artifacts in {}",
        res.pre.epochs,
        start.elapsed().as_secs_f64(),
        result.epoch_total(last).unwrap_or(f64::NAN),
        result.best_epoch,
        result.epoch_total(result.best_epoch).unwrap_or(f64::NAN),
        out.display(),
    );
    if result.skipped_steps > 0 {
        eprintln!("warning: {} steps skipped on nonfinite gradients", result.skipped_steps);
    }
    if result.aborted {
        return Err(NdError::Invalid(
            "training aborted on nonfinite loss; checkpoint holds the last clean epoch".into(),
        ));
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, modality: usize) -> Result<(), NdError> {
    let (dir, _, res) = sibling_config(ckpt)?;
    if modality >= 2 {
        return Err(NdError::Invalid(format!("modality must be 0 or 1, got {modality}")));
    }
    let (train, holdout) = res.dataset.realize(res.preset)?;
    let cfgs = modality_configs(&train, &res.base)?;
    let outcome = match res.precision {
        Precision::F32 => {
            let store = ParamStore::<f32>::load(ckpt)?;
            linear_eval(&store, &cfgs[modality], modality, train.modality(modality)?, holdout.modality(modality)?, &res.eval)?
        }
        Precision::F64 => {
            let store = ParamStore::<f64>::load(ckpt)?;
            linear_eval(&store, &cfgs[modality], modality, train.modality(modality)?, holdout.modality(modality)?, &res.eval)?
        }
    };
    let model = model_label(&res.graph);
    println!("{model} modality {modality}: train {:.4}, holdout {:.4}", outcome.train_acc, outcome.holdout_acc);

    // Merge into accuracy.csv, replacing stale rows for this modality.
    let acc_path = dir.join("accuracy.csv");
    let mut rows: Vec<AccuracyRow> = match fs::read_to_string(&acc_path) {
        Ok(text) => parse_accuracy_csv(&text, &acc_path.to_string_lossy())?,
        Err(_) => Vec::new(),
    };
    rows.retain(|r| r.modality != modality);
    for (split, acc) in [("train", outcome.train_acc), ("holdout", outcome.holdout_acc)] {
        rows.push(AccuracyRow { model: model.clone(), modality, split: split.into(), acc });
    }
    rows.sort_by(|a, b| (a.modality, a.split != "train").cmp(&(b.modality, b.split != "train")));
    let mut csv = String::from("model,modality,split,acc\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.model, r.modality, r.split, r.acc));
    }
    fs::write(&acc_path, csv)?;
    println!("updated {}", acc_path.display());
    Ok(())
}

fn cmd_similarity(ckpt: &Path) -> Result<(), NdError> {
    let (dir, _, res) = sibling_config(ckpt)?;
    let (train, holdout) = res.dataset.realize(res.preset)?;
    let cfgs = modality_configs(&train, &res.base)?;
    let store = match res.precision {
        Precision::F32 => ParamStore::<f32>::load(ckpt)?.cast::<f64>(),
        Precision::F64 => ParamStore::<f64>::load(ckpt)?,
    };
    let model = model_label(&res.graph);
    let mut reports = Vec::with_capacity(2);
    for (split, ds) in [(Split::Train, &train), (Split::Holdout, &holdout)] {
        let z0 = collect_representations(&store, &cfgs[0], 0, ds.modality(0)?, split, res.eval.batch)?;
        let z1 = collect_representations(&store, &cfgs[1], 1, ds.modality(1)?, split, res.eval.batch)?;
        let rep = compute_report(&model, &z0, &z1)?;
        println!(
            "{model} {split:?}: cca {:.4}, svcca {:.4}, pwcca {:.4}/{:.4}, cka {:.4}",
            rep.cca, rep.svcca, rep.pwcca_ij, rep.pwcca_ji, rep.cka
        );
        reports.push(rep);
    }
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| NdError::Format(format!("similarity encode: {e}")))?;
    let out = dir.join("similarity.json");
    fs::write(&out, json + "\n")?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_grad_check(seeds: u64, coords: usize, tol: f64) -> Result<ExitCode, NdError> {
    let start = Instant::now();
    let mut failed = 0usize;
    let op_opts = GradCheckOpts::default();
    // Whole-model checks cannot keep relu preactivations away from zero the
    // way the op checks do, so let them drop kink-straddling coordinates.
    let edge_opts =
        GradCheckOpts { max_coords_per_leaf: coords, skip_nonsmooth: true, ..Default::default() };
    for (checks, opts) in [(op_checks(), &op_opts), (edge_checks(), &edge_opts)] {
        for check in checks {
            let report = check.run(0..seeds, opts)?;
            let ok = report.max_rel_err < tol;
            let skipped = if report.skipped > 0 {
                format!(", {} skipped at kinks", report.skipped)
            } else {
                String::new()
            };
            println!(
                "{} {:<22} max_rel_err {:.3e} ({} coords{skipped})",
                if ok { "ok  " } else { "FAIL" },
                check.name,
                report.max_rel_err,
                report.coords_checked
            );
            failed += usize::from(!ok);
        }
    }
    println!("{seeds} seeds in {:.1}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        eprintln!("{failed} checks exceeded tol {tol:e}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(manifest_path: &Path, out: Option<&Path>, jobs: usize) -> Result<ExitCode, NdError> {
    let manifest = match parse_config(manifest_path)? {
        ParsedConfig::Manifest(m) => *m,
        ParsedConfig::Train(_) => {
            return Err(NdError::Invalid(format!(
                "{} is a single-run config (no \"cells\"); use `domino pretrain`",
                manifest_path.display()
            )));
        }
    };
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| manifest.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let start = Instant::now();
    let summary = run_experiment(&manifest, &out_dir, jobs)?;
    for label in &summary.completed {
        println!("done {label}");
    }
    println!(
        "{} runs in {:.1}s; report at {}",
        summary.completed.len(),
        start.elapsed().as_secs_f64(),
        summary.report.markdown.display()
    );
    for gap in &summary.report.gaps {
        eprintln!("gap: {gap}");
    }
    if !summary.all_ok() {
        for (label, err) in &summary.failures {
            eprintln!("failed {label}: {err}");
        }
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
