//! Instance-level class activation heads and the multi-instance decision
//! layer on top of them.
//!
//! A [`Classifier`] maps every fused instance row to per-class activation
//! scores. Pooling keeps the top-K activations per class and averages them,
//! so a handful of decisive instances carries the bag-level logit. The
//! vision-branch and text-branch logits are blended with a fixed weight and
//! thresholded (multi-label) or arg-maxed (single-label) into decisions.

use crate::error::{Error, Result};
use crate::params::{Affine, Binding, ParamStore};
use crate::tape::{topk_select, Tape, Var};
use crate::tensor::Tensor;

/// Three-layer perceptron producing `[instances x classes]` activation
/// scores; ReLU and dropout after each hidden layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub d_in: usize,
    pub classes: usize,
    pub dropout: f64,
    l1: Affine,
    l2: Affine,
    l3: Affine,
}

impl Classifier {
    pub fn init<R: rand::Rng>(
        prefix: &str,
        d_in: usize,
        classes: usize,
        dropout: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {dropout}"
            )));
        }
        Ok(Classifier {
            d_in,
            classes,
            dropout,
            l1: Affine::init(&format!("{prefix}.l1"), d_in, d_in, store, rng)?,
            l2: Affine::init(&format!("{prefix}.l2"), d_in, d_in, store, rng)?,
            l3: Affine::init(&format!("{prefix}.l3"), d_in, classes, store, rng)?,
        })
    }

    /// Per-instance class scores, `[m x classes]`. Dropout fires only when
    /// `training` is set.
    pub fn forward<R: rand::Rng>(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h1 = self.l1.forward(tape, bind, x)?;
        let h1 = tape.relu(h1)?;
        let h1 = tape.dropout(h1, self.dropout, training, rng)?;
        let h2 = self.l2.forward(tape, bind, h1)?;
        let h2 = tape.relu(h2)?;
        let h2 = tape.dropout(h2, self.dropout, training, rng)?;
        self.l3.forward(tape, bind, h2)
    }
}

/// Decision-layer settings shared by training and inference.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct DecisionConfig {
    /// Number of decision classes.
    pub classes: usize,
    /// Instances kept per class when pooling the vision branch.
    pub k: usize,
    /// Instances kept per class when pooling the text branch.
    pub k_hat: usize,
    /// Blend weight on the vision branch; the text branch gets `1 - lambda`.
    pub lambda: f64,
    /// Independent per-class sigmoid decisions when set; otherwise a single
    /// softmax arg-max decision.
    pub multi_label: bool,
    /// Probability cutoff for multi-label decisions.
    pub threshold: f64,
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config(
                "decision layer needs at least one class".into(),
            ));
        }
        if !self.multi_label && self.classes < 2 {
            return Err(Error::Config(
                "single-label decisions need at least two classes".into(),
            ));
        }
        if self.k == 0 || self.k_hat == 0 {
            return Err(Error::Config(
                "pooling sizes k and k_hat must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "branch blend lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "decision threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Top-K mean pooling outside a tape: bag logits per class plus the rows
/// that were selected (descending score order), for explanations.
pub fn pool_topk(
    cam: &Tensor,
    k: usize,
    row_valid: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
    if cam.rank() != 2 {
        return Err(Error::Shape(format!(
            "activation map must be rank 2, got {:?}",
            cam.shape()
        )));
    }
    if let Some(mask) = row_valid {
        if mask.len() != cam.rows() {
            return Err(Error::Shape(format!(
                "row mask length {} does not match {} rows",
                mask.len(),
                cam.rows()
            )));
        }
    }
    let all_valid = vec![true; cam.rows()];
    let mask = row_valid.unwrap_or(&all_valid);
    let (picked, pooled, _) = topk_select(cam.data(), cam.rows(), cam.cols(), mask, k)?;
    Ok((pooled, picked))
}

/// Blends pooled branch logits: `lambda * vision + (1 - lambda) * text`.
///
/// The endpoints return the surviving branch's node untouched, so an
/// all-vision or all-text blend is bit-identical to that branch alone.
pub fn fuse_pooled(tape: &mut Tape, vision: Var, text: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "branch blend lambda must be in [0, 1], got {lambda}"
        )));
    }
    if lambda == 1.0 {
        return Ok(vision);
    }
    if lambda == 0.0 {
        return Ok(text);
    }
    let v = tape.scale(vision, lambda)?;
    let t = tape.scale(text, 1.0 - lambda)?;
    tape.add(v, t)
}

/// Bag-level training loss on pooled logits `[1 x classes]`: mean
/// binary cross-entropy for multi-label targets, softmax cross-entropy for
/// a single-label one-hot target.
pub fn mil_loss(tape: &mut Tape, pooled: Var, targets: &Tensor, multi_label: bool) -> Result<Var> {
    if multi_label {
        tape.bce_with_logits_mean(pooled, targets.data(), None)
    } else {
        tape.softmax_cross_entropy(pooled, targets.data())
    }
}

/// Turns bag logits into probabilities and boolean decisions.
///
/// Multi-label: per-class sigmoid, decision when probability reaches the
/// threshold. Single-label: softmax, one-hot at the arg-max (lowest index
/// wins ties).
pub fn decide(logits: &[f64], cfg: &DecisionConfig) -> Result<(Vec<f64>, Vec<bool>)> {
    if logits.len() != cfg.classes {
        return Err(Error::Shape(format!(
            "expected {} logits, got {}",
            cfg.classes,
            logits.len()
        )));
    }
    if cfg.multi_label {
        let probs: Vec<f64> = logits.iter().map(|&z| crate::numeric::sigmoid(z)).collect();
        let decisions = probs.iter().map(|&p| p >= cfg.threshold).collect();
        Ok((probs, decisions))
    } else {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let denom = crate::numeric::exact_sum(exps.iter().cloned());
        let probs: Vec<f64> = exps.iter().map(|&e| e / denom).collect();
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let decisions = (0..cfg.classes).map(|i| i == best).collect();
        Ok((probs, decisions))
    }
}
