//! Model lifecycle commands: train, refine, eval, explain, gradcheck.

use std::path::{Path, PathBuf};

use fusedec_core::adam::AdamParams;
use fusedec_core::checkpoint::{Checkpoint, Phase};
use fusedec_core::data::manifest::Dataset;
use fusedec_core::data::synth::load_pseudo;
use fusedec_core::error::{Error, Result};
use fusedec_core::fusion::{BranchMode, DatasetDims, DualBranchModel, ModelConfig};
use fusedec_core::gradcheck::{run as run_gradcheck, GradcheckConfig};
use fusedec_core::mil::DecisionConfig;
use fusedec_core::params::ParamStore;
use fusedec_core::refine::{predict, SurrogateModel};
use fusedec_core::trainer::{
    evaluate, train_main, train_refinement, EpochRecord, RefineConfig, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{write_json, ModeFlags};

/// Everything needed to rebuild the main model from its checkpoint alone.
#[derive(serde::Serialize, serde::Deserialize)]
struct MainMeta {
    train: TrainConfig,
    dims: DatasetDims,
    classes: Vec<String>,
}

/// Everything needed to rebuild the surrogate from its checkpoint alone.
#[derive(serde::Serialize, serde::Deserialize)]
struct SurrogateMeta {
    refine: RefineConfig,
    d_text: usize,
    classes: Vec<String>,
}

fn epoch_line(record: &EpochRecord) {
    match record.val_macro_f1 {
        Some(f1) => println!(
            "epoch={} train_loss={:.6} val_macro_f1={:.4}",
            record.epoch, record.train_loss, f1
        ),
        None => println!(
            "epoch={} train_loss={:.6} val_macro_f1=none",
            record.epoch, record.train_loss
        ),
    }
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Training manifest
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Output directory for main.ckpt and history.json
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Fraction of training samples held out for per-epoch validation
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Rows pooled per class from the vision activation table
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Rows pooled per class from the text activation table
    #[arg(long, default_value_t = 1)]
    khat: usize,
    /// Vision weight of the branch blend (text gets 1 - lambda)
    #[arg(long, default_value_t = 0.8)]
    lambda: f64,
    /// Positive-decision probability threshold (multi-label)
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Shared attention width
    #[arg(long, default_value_t = 256)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 0.7)]
    dropout: f64,
    #[command(flatten)]
    mode: ModeFlags,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&args.manifest)?;
    let decision = DecisionConfig {
        classes: dataset.classes(),
        k: args.k,
        k_hat: args.khat,
        lambda: args.lambda,
        multi_label: dataset.manifest.task.multi_label(),
        threshold: args.threshold,
    };
    let cfg = TrainConfig {
        seed: args.seed,
        epochs: args.epochs,
        batch_size: args.batch,
        optimizer: AdamParams::with_lr(args.lr),
        val_fraction: args.val_fraction,
        mode: args.mode.mode(BranchMode::Full),
        model: ModelConfig {
            d_model: args.d_model,
            heads: args.heads,
            dropout: args.dropout,
        },
        decision,
    };
    println!(
        "samples={} classes={} mode={} epochs={} batch={} lr={}",
        dataset.len(),
        cfg.decision.classes,
        cfg.mode,
        cfg.epochs,
        cfg.batch_size,
        cfg.optimizer.lr
    );

    let trained = train_main(&dataset, &cfg, epoch_line)?;
    let meta = MainMeta {
        train: cfg.clone(),
        dims: dataset.manifest.dims,
        classes: dataset.manifest.classes.clone(),
    };
    let config_json = serde_json::to_string(&meta)
        .map_err(|e| Error::Parse(format!("serializing checkpoint metadata: {e}")))?;

    // Keep the best validation snapshot when one exists; otherwise the final
    // parameters together with the optimizer state for resuming.
    let (params, adam, epoch) = match trained.best {
        Some(best) => {
            println!(
                "best_epoch={} best_val_macro_f1={:.4}",
                best.epoch, best.macro_f1
            );
            (best.store, None, best.epoch)
        }
        None => (trained.store, Some(trained.adam), cfg.epochs),
    };

    let checkpoint = Checkpoint {
        phase: Phase::Main,
        epoch: epoch as u64,
        config_json,
        params,
        adam,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let ckpt_path = args.out.join("main.ckpt");
    checkpoint.save(&ckpt_path)?;
    write_json(&args.out.join("history.json"), &trained.records)?;
    println!("checkpoint={}", ckpt_path.display());
    Ok(())
}

#[derive(clap::Args)]
pub struct RefineArgs {
    /// Training manifest (provides text features and labels)
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Relevance tables (JSON), e.g. from `fusedec pseudo` or the generator
    #[arg(long, value_name = "FILE")]
    pseudo: PathBuf,
    /// Output directory for surrogate.ckpt and history.json
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Surrogate hidden width
    #[arg(long, default_value_t = 256)]
    d_model: usize,
}

pub fn refine(args: RefineArgs) -> Result<()> {
    let dataset = Dataset::load(&args.manifest)?;
    let pseudo = load_pseudo(&args.pseudo)?;
    let cfg = RefineConfig {
        seed: args.seed,
        epochs: args.epochs,
        batch_size: args.batch,
        optimizer: AdamParams::with_lr(args.lr),
        d_model: args.d_model,
    };
    println!(
        "samples={} tables={} epochs={} batch={} lr={}",
        dataset.len(),
        pseudo.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.optimizer.lr
    );

    let trained = train_refinement(&dataset, &pseudo, &cfg, epoch_line)?;
    let meta = SurrogateMeta {
        refine: cfg.clone(),
        d_text: dataset.manifest.dims.d_text,
        classes: dataset.manifest.classes.clone(),
    };
    let config_json = serde_json::to_string(&meta)
        .map_err(|e| Error::Parse(format!("serializing checkpoint metadata: {e}")))?;
    let checkpoint = Checkpoint {
        phase: Phase::Refinement,
        epoch: cfg.epochs as u64,
        config_json,
        params: trained.store,
        adam: None,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let ckpt_path = args.out.join("surrogate.ckpt");
    checkpoint.save(&ckpt_path)?;
    write_json(&args.out.join("history.json"), &trained.records)?;
    println!("checkpoint={}", ckpt_path.display());
    Ok(())
}

/// Rebuilds the main model architecture and verifies the stored parameters
/// cover it exactly.
fn load_main(path: &Path) -> Result<(DualBranchModel, ParamStore, MainMeta)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.phase != Phase::Main {
        return Err(Error::Format(format!(
            "{} holds a {} checkpoint, not a main-model one",
            path.display(),
            ckpt.phase.as_str()
        )));
    }
    let meta: MainMeta = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Format(format!("checkpoint metadata in {}: {e}", path.display())))?;
    let mut scratch = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = DualBranchModel::init(
        meta.train.model,
        meta.dims,
        meta.train.decision.classes,
        &mut scratch,
        &mut rng,
    )?;
    verify_params_cover(&scratch, &ckpt.params, path)?;
    Ok((model, ckpt.params, meta))
}

fn load_surrogate(path: &Path, main: &MainMeta) -> Result<(SurrogateModel, ParamStore)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.phase != Phase::Refinement {
        return Err(Error::Format(format!(
            "{} holds a {} checkpoint, not a refinement one",
            path.display(),
            ckpt.phase.as_str()
        )));
    }
    let meta: SurrogateMeta = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Format(format!("checkpoint metadata in {}: {e}", path.display())))?;
    if meta.classes != main.classes {
        return Err(Error::Config(format!(
            "surrogate was trained for classes {:?} but the model expects {:?}",
            meta.classes, main.classes
        )));
    }
    if meta.d_text != main.dims.d_text {
        return Err(Error::Config(format!(
            "surrogate expects {}-dim text features but the model uses {}",
            meta.d_text, main.dims.d_text
        )));
    }
    let mut scratch = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = SurrogateModel::init(
        meta.d_text,
        meta.refine.d_model,
        meta.classes.len(),
        &mut scratch,
        &mut rng,
    )?;
    verify_params_cover(&scratch, &ckpt.params, path)?;
    Ok((model, ckpt.params))
}

fn verify_params_cover(expected: &ParamStore, stored: &ParamStore, path: &Path) -> Result<()> {
    for (name, tensor) in expected.iter() {
        let found = stored.get(name).map_err(|_| {
            Error::Format(format!("{} is missing parameter '{name}'", path.display()))
        })?;
        if found.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "{} parameter '{name}' has shape {:?}, expected {:?}",
                path.display(),
                found.shape(),
                tensor.shape()
            )));
        }
    }
    if stored.len() != expected.len() {
        return Err(Error::Format(format!(
            "{} holds {} parameters, expected {}",
            path.display(),
            stored.len(),
            expected.len()
        )));
    }
    Ok(())
}

fn check_dataset_matches(meta: &MainMeta, dataset: &Dataset, ckpt: &Path) -> Result<()> {
    if meta.dims != dataset.manifest.dims {
        return Err(Error::Config(format!(
            "{} was trained on dims {:?} but the dataset has {:?}",
            ckpt.display(),
            meta.dims,
            dataset.manifest.dims
        )));
    }
    if meta.classes != dataset.manifest.classes {
        return Err(Error::Config(format!(
            "{} was trained for classes {:?} but the dataset lists {:?}",
            ckpt.display(),
            meta.classes,
            dataset.manifest.classes
        )));
    }
    Ok(())
}

#[derive(clap::Args)]
pub struct EvalArgs {
    /// Evaluation manifest
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Main-model checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Refinement surrogate checkpoint (enables text refinement)
    #[arg(long, value_name = "FILE")]
    surrogate: Option<PathBuf>,
    /// Load the surrogate but do not refine (ignore --surrogate)
    #[arg(long)]
    no_refine: bool,
    /// Override the decision threshold stored in the checkpoint
    #[arg(long)]
    threshold: Option<f64>,
    /// Print the report as JSON instead of a table
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    mode: ModeFlags,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let dataset = Dataset::load(&args.manifest)?;
    let (model, store, meta) = load_main(&args.checkpoint)?;
    check_dataset_matches(&meta, &dataset, &args.checkpoint)?;

    let mut decision = meta.train.decision.clone();
    if let Some(threshold) = args.threshold {
        decision.threshold = threshold;
    }
    let mode = args.mode.mode(meta.train.mode);

    let surrogate = match &args.surrogate {
        Some(path) if !args.no_refine => Some(load_surrogate(path, &meta)?),
        _ => None,
    };

    let report = evaluate(
        &model,
        &store,
        surrogate.as_ref().map(|(m, s)| (m, s)),
        &dataset.bundles,
        mode,
        &decision,
        Some(&dataset.manifest.classes),
    )?;
    println!(
        "samples={} mode={} refined={} macro_f1={:.4} micro_f1={:.4}",
        report.samples,
        mode,
        surrogate.is_some(),
        report.macro_f1,
        report.micro_f1
    );
    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

#[derive(clap::Args)]
pub struct ExplainArgs {
    /// Manifest holding the sample
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Main-model checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Refinement surrogate checkpoint (enables text refinement)
    #[arg(long, value_name = "FILE")]
    surrogate: Option<PathBuf>,
    /// Sample id to explain
    #[arg(long, value_name = "ID")]
    sample: String,
    #[command(flatten)]
    mode: ModeFlags,
}

pub fn explain(args: ExplainArgs) -> Result<()> {
    let dataset = Dataset::load(&args.manifest)?;
    let (model, store, meta) = load_main(&args.checkpoint)?;
    check_dataset_matches(&meta, &dataset, &args.checkpoint)?;

    let bundle = dataset
        .bundles
        .iter()
        .find(|b| b.sample_id == args.sample)
        .ok_or_else(|| {
            Error::Data(format!(
                "sample '{}' is not in {}",
                args.sample,
                args.manifest.display()
            ))
        })?;
    let surrogate = match &args.surrogate {
        Some(path) => Some(load_surrogate(path, &meta)?),
        None => None,
    };
    let mode = args.mode.mode(meta.train.mode);
    let output = predict(
        &model,
        &store,
        surrogate.as_ref().map(|(m, s)| (m, s)),
        bundle,
        mode,
        &meta.train.decision,
    )?;
    let text = serde_json::to_string_pretty(&output)
        .map_err(|e| Error::Parse(format!("serializing decision: {e}")))?;
    println!("{text}");
    Ok(())
}

#[derive(clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Parameter entries to probe
    #[arg(long, default_value_t = 24)]
    samples: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum tolerated relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Probe a reduced architecture instead of the full-scale one
    #[arg(long)]
    small: bool,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut cfg = if args.small {
        GradcheckConfig {
            dims: DatasetDims {
                global_rows: 2,
                local_slots: 6,
                text_slots: 4,
                d_global: 16,
                d_local: 12,
                d_text: 16,
            },
            model: ModelConfig {
                d_model: 16,
                heads: 4,
                dropout: 0.0,
            },
            decision: DecisionConfig {
                classes: 3,
                k: 2,
                k_hat: 1,
                lambda: 0.8,
                multi_label: true,
                threshold: 0.5,
            },
            ..GradcheckConfig::default()
        }
    } else {
        GradcheckConfig::default()
    };
    cfg.seed = args.seed;
    cfg.samples = args.samples;
    cfg.step = args.step;

    let report = run_gradcheck(&cfg)?;
    for probe in &report.probes {
        println!(
            "param={} index={} analytic={:+.6e} numeric={:+.6e} rel_err={:.3e}",
            probe.param, probe.index, probe.analytic, probe.numeric, probe.rel_err
        );
    }
    println!(
        "checked={} max_rel_err={:.3e} mean_rel_err={:.3e}",
        report.checked, report.max_rel_err, report.mean_rel_err
    );
    if report.max_rel_err > args.tol {
        return Err(Error::Data(format!(
            "max relative error {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_err, args.tol
        )));
    }
    println!("status=ok");
    Ok(())
}
