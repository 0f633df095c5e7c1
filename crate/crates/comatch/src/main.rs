//! Operator surface: dataset generation, training, evaluation, gradient
//! checking, ablation sweeps, and plotting.
//!
//! All outputs land under `--out` (overridden by `COMATCH_OUT`) in a fixed
//! layout: `checkpoints/`, `reports/`, `plots/`, `data/`, with the resolved
//! configuration snapshot written next to them. Exit codes: 2 for config
//! errors, 3 for missing data, 4 for numeric failures, 1 for a missed
//! acceptance threshold.

use clap::{Parser, Subcommand};
use comatch::config::RunConfig;
use comatch::data::{gen_dataset, load_pairs, save_dataset, PairSample};
use comatch::networks::Model;
use comatch::train::{train, HyperParams, LossToggles, TrainState};
use comatch::{checkpoint, eval, gradcheck, plot, Error};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "comatch",
    about = "Joint weakly-supervised semantic matching and object co-segmentation"
)]
struct Cli {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (same as --set seed=N).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; the COMATCH_OUT environment variable wins.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Config override, key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Checkpoint to evaluate or plot from; defaults to
    /// `<out>/checkpoints/final.json`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/eval datasets under <out>/data.
    GenData,
    /// Train a model; writes checkpoints and the loss CSV.
    Train,
    /// Evaluate keypoint transfer (PCK) on the eval split.
    EvalMatch,
    /// Evaluate co-segmentation (precision and Jaccard) on the eval split.
    EvalCoseg,
    /// Finite-difference verification of every loss and warp gradient.
    Gradcheck,
    /// Leave-one-loss-out sweep: trains the full model plus one run per
    /// disabled loss and reports metrics for each.
    Ablate,
    /// Render loss curves and qualitative panels.
    Plot,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownTransformKind(_) => 2,
        Error::Manifest { .. } | Error::Io(_) | Error::Image(_) | Error::Csv(_) => 3,
        Error::NonFiniteLoss { .. } | Error::NonFiniteParams => 4,
        _ => 1,
    }
}

fn resolve_config(cli: &Cli) -> comatch::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for spec in &cli.overrides {
        cfg.apply_override(spec)?;
    }
    if let Some(seed) = cli.seed {
        cfg.hyper.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    match std::env::var_os("COMATCH_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cli.out.clone(),
    }
}

/// Training pairs: manifest-backed when configured, synthetic otherwise.
fn train_data(cfg: &RunConfig) -> comatch::Result<Vec<PairSample>> {
    if cfg.train_manifest.is_empty() {
        Ok(gen_dataset(&cfg.synth, cfg.data_seed, cfg.train_count))
    } else {
        load_pairs(Path::new(&cfg.train_manifest), Some(cfg.net.resolution))
    }
}

/// Held-out pairs: a disjoint seed stream keeps them out of training.
fn eval_data(cfg: &RunConfig) -> comatch::Result<Vec<PairSample>> {
    if cfg.eval_manifest.is_empty() {
        Ok(gen_dataset(
            &cfg.synth,
            cfg.data_seed ^ 0x65766121,
            cfg.eval_count,
        ))
    } else {
        load_pairs(Path::new(&cfg.eval_manifest), Some(cfg.net.resolution))
    }
}

fn load_model(cli: &Cli, out: &Path) -> comatch::Result<(Model, HyperParams)> {
    let path = cli
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("checkpoints/final.json"));
    if !path.exists() {
        return Err(Error::Manifest {
            path: path.display().to_string(),
            msg: "checkpoint not found (train first or pass --checkpoint)".into(),
        });
    }
    checkpoint::load(&path)
}

fn run_train(cfg: &RunConfig, out: &Path) -> comatch::Result<()> {
    let dataset = train_data(cfg)?;
    let model = Model::new(cfg.net.clone(), cfg.hyper.seed)?;
    println!(
        "training on {} pairs for {} steps (batch {}, {} learnable scalars)",
        dataset.len(),
        cfg.hyper.steps,
        cfg.hyper.batch_size,
        model.learnable.num_scalars()
    );
    let mut state = TrainState::new(model, cfg.hyper.clone());
    let started = std::time::Instant::now();
    let outcome = train(&mut state, &dataset, Some(&cfg.augment), Some(out))?;
    let last = outcome.history.last().copied().unwrap_or_default();
    println!(
        "done in {:.1}s; final losses: total {:.4} matching {:.4} cycle {:.4} trans {:.4} contrast {:.4} task {:.4}",
        started.elapsed().as_secs_f64(),
        last.total,
        last.matching,
        last.cycle,
        last.trans,
        last.contrast,
        last.task
    );
    Ok(())
}

/// Returns false when a configured threshold is missed.
fn run_eval_match(cfg: &RunConfig, model: &Model, out: &Path) -> comatch::Result<bool> {
    let samples = eval_data(cfg)?;
    let report = eval::evaluate_matching(model, &samples, &cfg.alphas)?;
    std::fs::create_dir_all(out.join("reports"))?;
    report.to_csv(&out.join("reports/matching.csv"))?;
    print!("{}", report.render_table());
    if let Some(min) = cfg.min_pck {
        let idx = cfg
            .alphas
            .iter()
            .position(|&a| (a - cfg.pck_alpha).abs() < 1e-9)
            .unwrap_or(0);
        let got = report.mean[idx];
        if got < min {
            println!(
                "pck@{} = {got:.4} misses the configured minimum {min}",
                cfg.pck_alpha
            );
            return Ok(false);
        }
    }
    Ok(true)
}

fn run_eval_coseg(cfg: &RunConfig, model: &Model, out: &Path) -> comatch::Result<bool> {
    let samples = eval_data(cfg)?;
    let report = eval::evaluate_coseg(model, &samples, cfg.binarize)?;
    std::fs::create_dir_all(out.join("reports"))?;
    report.to_csv(&out.join("reports/coseg.csv"))?;
    print!("{}", report.render_table());
    let mut ok = true;
    if let Some(min) = cfg.min_jaccard {
        if report.jaccard < min {
            println!(
                "jaccard {:.4} misses the configured minimum {min}",
                report.jaccard
            );
            ok = false;
        }
    }
    if let Some(min) = cfg.min_precision {
        if report.precision < min {
            println!(
                "precision {:.4} misses the configured minimum {min}",
                report.precision
            );
            ok = false;
        }
    }
    Ok(ok)
}

fn run_ablate(cfg: &RunConfig, out: &Path) -> comatch::Result<()> {
    let dataset = train_data(cfg)?;
    let eval_set = eval_data(cfg)?;
    let mut rows: Vec<(String, f64, f64, f64)> = Vec::new();
    let mut configs: Vec<(String, LossToggles)> = vec![("full".into(), cfg.hyper.toggles)];
    for name in LossToggles::NAMES {
        configs.push((format!("no_{name}"), cfg.hyper.toggles.without(name)?));
    }
    for (name, toggles) in configs {
        let mut hp = cfg.hyper.clone();
        hp.toggles = toggles;
        let run_dir = out.join("ablate").join(&name);
        std::fs::create_dir_all(&run_dir)?;
        let model = Model::new(cfg.net.clone(), hp.seed)?;
        let mut state = TrainState::new(model, hp);
        train(&mut state, &dataset, Some(&cfg.augment), Some(&run_dir))?;
        let pck_report = eval::evaluate_matching(&state.model, &eval_set, &[cfg.pck_alpha])?;
        let coseg = eval::evaluate_coseg(&state.model, &eval_set, cfg.binarize)?;
        println!(
            "{name:<12} pck@{}: {:.4}  precision: {:.4}  jaccard: {:.4}",
            cfg.pck_alpha, pck_report.mean[0], coseg.precision, coseg.jaccard
        );
        rows.push((name, pck_report.mean[0], coseg.precision, coseg.jaccard));
    }
    std::fs::create_dir_all(out.join("reports"))?;
    let mut w = csv::Writer::from_path(out.join("reports/ablation.csv"))?;
    w.write_record(["config", "pck", "precision", "jaccard"])?;
    for (name, pck, p, j) in rows {
        w.write_record([name, format!("{pck:.6}"), format!("{p:.6}"), format!("{j:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig, out: &Path) -> comatch::Result<bool> {
    let results = gradcheck::run_suite(cfg.hyper.seed);
    print!("{}", gradcheck::render_table(&results));
    std::fs::create_dir_all(out.join("reports"))?;
    let mut w = csv::Writer::from_path(out.join("reports/gradcheck.csv"))?;
    w.write_record(["target", "wrt", "max_rel_err", "passed"])?;
    for r in &results {
        w.write_record([
            r.target.clone(),
            r.wrt.clone(),
            format!("{:.6e}", r.max_rel_err),
            r.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(results.iter().all(|r| r.passed))
}

fn run_plot(cfg: &RunConfig, cli: &Cli, out: &Path) -> comatch::Result<()> {
    let loss_csv = out.join("loss.csv");
    if loss_csv.exists() {
        plot::plot_loss_curves(&loss_csv, &out.join("plots/loss.png"))?;
        println!("wrote {}", out.join("plots/loss.png").display());
    }
    if let Ok((model, _)) = load_model(cli, out) {
        let samples = eval_data(cfg)?;
        for (i, sample) in samples.iter().take(4).enumerate() {
            let path = out.join(format!("plots/pair_{i}.png"));
            plot::qualitative_panel(&model, sample, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> comatch::Result<bool> {
    let cfg = resolve_config(cli)?;
    let out = out_dir(cli);
    std::fs::create_dir_all(&out)?;
    cfg.write_snapshot(&out)?;
    match cli.cmd {
        Cmd::GenData => {
            let train = gen_dataset(&cfg.synth, cfg.data_seed, cfg.train_count);
            save_dataset(&out.join("data/train"), &train, &cfg.synth, cfg.data_seed)?;
            let eval_seed = cfg.data_seed ^ 0x65766121;
            let eval = gen_dataset(&cfg.synth, eval_seed, cfg.eval_count);
            save_dataset(&out.join("data/eval"), &eval, &cfg.synth, eval_seed)?;
            println!(
                "wrote {} train and {} eval pairs under {}",
                cfg.train_count,
                cfg.eval_count,
                out.join("data").display()
            );
            Ok(true)
        }
        Cmd::Train => {
            run_train(&cfg, &out)?;
            Ok(true)
        }
        Cmd::EvalMatch => {
            let (model, _) = load_model(cli, &out)?;
            run_eval_match(&cfg, &model, &out)
        }
        Cmd::EvalCoseg => {
            let (model, _) = load_model(cli, &out)?;
            run_eval_coseg(&cfg, &model, &out)
        }
        Cmd::Gradcheck => run_gradcheck(&cfg, &out),
        Cmd::Ablate => {
            run_ablate(&cfg, &out)?;
            Ok(true)
        }
        Cmd::Plot => {
            run_plot(&cfg, cli, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(match cli.cmd {
            Cmd::Gradcheck => 4,
            _ => 1,
        }),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
