//! Minibatch training loops for the main model and the refinement
//! surrogate, plus dataset evaluation.
//!
//! Every random choice — initialization, train/validation split, epoch
//! shuffles, dropout — draws from a stream derived from the run seed by
//! tag, so a seed fully determines the trained parameters bit for bit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamParams, AdamState};
use crate::data::manifest::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{bag_logits, BranchMode, DualBranchModel, FeatureBundle, ModelConfig};
use crate::metrics::{Evaluation, F1Report};
use crate::mil::{mil_loss, DecisionConfig};
use crate::numeric::derive_seed;
use crate::params::{Binding, ParamStore};
use crate::refine::{predict, refinement_loss, PseudoCam, SurrogateModel};
use crate::tape::{Tape, Var};

/// Settings for main-model training.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamParams,
    /// Fraction of the training set held out for per-epoch validation.
    pub val_fraction: f64,
    /// Branches trained; gradients reach only parameters this mode uses.
    pub mode: BranchMode,
    pub model: ModelConfig,
    pub decision: DecisionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            epochs: 100,
            batch_size: 128,
            optimizer: AdamParams::default(),
            val_fraction: 0.1,
            mode: BranchMode::Full,
            model: ModelConfig::default(),
            decision: DecisionConfig {
                classes: 4,
                k: 16,
                k_hat: 1,
                lambda: 0.8,
                multi_label: true,
                threshold: 0.5,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.optimizer.validate()?;
        self.decision.validate()
    }
}

/// One epoch's summary.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: Option<f64>,
}

/// Best validation epoch seen so far, with its parameter snapshot.
#[derive(Clone, Debug)]
pub struct BestEpoch {
    pub epoch: usize,
    pub macro_f1: f64,
    pub store: ParamStore,
}

/// Result of main-model training.
pub struct TrainedMain {
    pub model: DualBranchModel,
    pub store: ParamStore,
    pub adam: AdamState,
    pub records: Vec<EpochRecord>,
    /// Present when a validation split was held out.
    pub best: Option<BestEpoch>,
}

/// Deterministic shuffle split into (train, validation) index sets.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "validation fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let val_count = (n as f64 * val_fraction).floor() as usize;
    if val_count >= n {
        return Err(Error::Config(
            "validation split leaves no training samples".into(),
        ));
    }
    let val = indices[..val_count].to_vec();
    let train = indices[val_count..].to_vec();
    Ok((train, val))
}

/// Averages per-sample scalar losses into one scalar node.
fn mean_of_scalars(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    match losses.len() {
        0 => Err(Error::Usage("cannot average zero losses".into())),
        1 => Ok(losses[0]),
        _ => {
            let mut acc = losses[0];
            for &loss in &losses[1..] {
                acc = tape.add(acc, loss)?;
            }
            tape.scale(acc, 1.0 / losses.len() as f64)
        }
    }
}

fn check_dataset_compat(dataset: &Dataset, decision: &DecisionConfig) -> Result<()> {
    if decision.classes != dataset.classes() {
        return Err(Error::Config(format!(
            "decision layer expects {} classes but the dataset has {}",
            decision.classes,
            dataset.classes()
        )));
    }
    if decision.multi_label != dataset.manifest.task.multi_label() {
        return Err(Error::Config(
            "decision layer task type disagrees with the dataset manifest".into(),
        ));
    }
    Ok(())
}

/// Trains the dual-branch model. Calls `on_epoch` after every epoch.
pub fn train_main<F: FnMut(&EpochRecord)>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainedMain> {
    cfg.validate()?;
    check_dataset_compat(dataset, &cfg.decision)?;

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "model.init"));
    let model = DualBranchModel::init(
        cfg.model,
        dataset.manifest.dims,
        cfg.decision.classes,
        &mut store,
        &mut init_rng,
    )?;

    let (train_idx, val_idx) = split_indices(
        dataset.len(),
        cfg.val_fraction,
        derive_seed(cfg.seed, "split"),
    )?;
    let mut adam = AdamState::new(&store);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestEpoch> = None;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle.{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut loss_weighted = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut bind = Binding::trainable(&store);
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let bundle = &dataset.bundles[idx];
                let fwd = model.forward(
                    &mut tape,
                    &mut bind,
                    bundle,
                    cfg.mode,
                    true,
                    &mut dropout_rng,
                )?;
                let logits = bag_logits(&mut tape, &fwd, bundle, &cfg.decision, None)?;
                let targets = bundle.label_tensor()?;
                losses.push(mil_loss(
                    &mut tape,
                    logits,
                    &targets,
                    cfg.decision.multi_label,
                )?);
            }
            let batch_loss = mean_of_scalars(&mut tape, &losses)?;
            tape.backward(batch_loss)?;
            loss_weighted += tape.value(batch_loss).data()[0] * batch.len() as f64;
            let grads = bind.grads(&tape);
            adam.apply(&mut store, &grads, &cfg.optimizer)?;
        }
        let train_loss = loss_weighted / train_idx.len() as f64;

        let val_macro_f1 = if val_idx.is_empty() {
            None
        } else {
            let val: Vec<&FeatureBundle> = val_idx.iter().map(|&i| &dataset.bundles[i]).collect();
            let report = evaluate_refs(
                &model,
                &store,
                None,
                &val,
                cfg.mode,
                &cfg.decision,
                Some(&dataset.manifest.classes),
            )?;
            let better = best
                .as_ref()
                .map(|b| report.macro_f1 > b.macro_f1)
                .unwrap_or(true);
            if better {
                best = Some(BestEpoch {
                    epoch,
                    macro_f1: report.macro_f1,
                    store: store.clone(),
                });
            }
            Some(report.macro_f1)
        };

        let record = EpochRecord {
            epoch,
            train_loss,
            val_macro_f1,
        };
        on_epoch(&record);
        records.push(record);
    }

    Ok(TrainedMain {
        model,
        store,
        adam,
        records,
        best,
    })
}

/// Settings for refinement (surrogate) training.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefineConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamParams,
    /// Hidden width scale of the surrogate (matches the model width).
    pub d_model: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            seed: 7,
            epochs: 100,
            batch_size: 128,
            optimizer: AdamParams::default(),
            d_model: 256,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.d_model == 0 {
            return Err(Error::Config(
                "refinement epochs, batch size, and width must be positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// Result of surrogate training. The main model's parameters are never
/// touched: this loop binds only the surrogate's own store.
#[derive(Clone, Debug)]
pub struct TrainedSurrogate {
    pub surrogate: SurrogateModel,
    pub store: ParamStore,
    pub records: Vec<EpochRecord>,
}

/// Trains the refinement surrogate against pseudo activation maps. Every
/// dataset sample must have a pseudo map with a matching id.
pub fn train_refinement<F: FnMut(&EpochRecord)>(
    dataset: &Dataset,
    pseudo: &[PseudoCam],
    cfg: &RefineConfig,
    mut on_epoch: F,
) -> Result<TrainedSurrogate> {
    cfg.validate()?;
    let classes = dataset.classes();
    let dims = dataset.manifest.dims;

    let by_id: BTreeMap<&str, &PseudoCam> =
        pseudo.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let mut targets = Vec::with_capacity(dataset.len());
    for bundle in &dataset.bundles {
        let Some(p) = by_id.get(bundle.sample_id.as_str()) else {
            return Err(Error::Data(format!(
                "no pseudo activation map for sample '{}'",
                bundle.sample_id
            )));
        };
        p.validate(dims.text_slots, classes, &bundle.label, &bundle.text_valid)?;
        targets.push(p.to_tensor()?);
    }

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "surrogate.init"));
    let surrogate =
        SurrogateModel::init(dims.d_text, cfg.d_model, classes, &mut store, &mut init_rng)?;
    let mut adam = AdamState::new(&store);

    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("surrogate.shuffle.{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut loss_weighted = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut bind = Binding::trainable(&store);
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let bundle = &dataset.bundles[idx];
                let text = tape.leaf(bundle.text.clone());
                let out = surrogate.forward(&mut tape, &mut bind, text)?;
                losses.push(refinement_loss(
                    &mut tape,
                    out,
                    &targets[idx],
                    &bundle.text_valid,
                )?);
            }
            let batch_loss = mean_of_scalars(&mut tape, &losses)?;
            tape.backward(batch_loss)?;
            loss_weighted += tape.value(batch_loss).data()[0] * batch.len() as f64;
            let grads = bind.grads(&tape);
            adam.apply(&mut store, &grads, &cfg.optimizer)?;
        }

        let record = EpochRecord {
            epoch,
            train_loss: loss_weighted / dataset.len() as f64,
            val_macro_f1: None,
        };
        on_epoch(&record);
        records.push(record);
    }

    Ok(TrainedSurrogate {
        surrogate,
        store,
        records,
    })
}

/// Evaluates decisions over a set of bundles and reports F1 scores.
pub fn evaluate(
    model: &DualBranchModel,
    store: &ParamStore,
    surrogate: Option<(&SurrogateModel, &ParamStore)>,
    bundles: &[FeatureBundle],
    mode: BranchMode,
    decision: &DecisionConfig,
    class_names: Option<&[String]>,
) -> Result<F1Report> {
    let refs: Vec<&FeatureBundle> = bundles.iter().collect();
    evaluate_refs(model, store, surrogate, &refs, mode, decision, class_names)
}

fn evaluate_refs(
    model: &DualBranchModel,
    store: &ParamStore,
    surrogate: Option<(&SurrogateModel, &ParamStore)>,
    bundles: &[&FeatureBundle],
    mode: BranchMode,
    decision: &DecisionConfig,
    class_names: Option<&[String]>,
) -> Result<F1Report> {
    let mut eval = Evaluation::new(decision.classes);
    for bundle in bundles {
        let out = predict(model, store, surrogate, bundle, mode, decision)?;
        eval.record(&out.decisions, &bundle.label)?;
    }
    Ok(eval.report(class_names))
}
