//! The dual-branch decision model.
//!
//! Each sample arrives as a [`FeatureBundle`]: a fixed-size matrix of global
//! scene features, a padded matrix of local object features with a validity
//! mask, and a padded matrix of text-description embeddings with its own
//! mask. The vision branch runs self-attention over the objects and then
//! cross-attends into the global context; the text branch cross-attends the
//! description embeddings into the same context. Both branches end in
//! per-instance class activation scores. A global-only baseline head exists
//! alongside them so ablations can run on identical weights.

use crate::attention::{AttentionOutput, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::mil::{fuse_pooled, Classifier, DecisionConfig};
use crate::params::{Affine, Binding, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row counts and feature widths of every bundle in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetDims {
    /// Rows of global scene features per sample.
    pub global_rows: usize,
    /// Padded object slots per sample.
    pub local_slots: usize,
    /// Padded text-description slots per sample.
    pub text_slots: usize,
    /// Width of a global feature row.
    pub d_global: usize,
    /// Width of a local object feature row.
    pub d_local: usize,
    /// Width of a text embedding row.
    pub d_text: usize,
}

/// Architecture settings independent of the dataset.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Shared width of the fused representation.
    pub d_model: usize,
    /// Attention heads in every attention block.
    pub heads: usize,
    /// Dropout rate inside the activation classifiers.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            heads: 8,
            dropout: 0.7,
        }
    }
}

/// Which branches participate in a forward pass. The weights are shared
/// across modes; this is a forward-time switch so ablations compare the
/// same trained parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BranchMode {
    /// Vision and text branches, blended.
    Full,
    /// Vision branch alone.
    VisionOnly,
    /// Text branch alone.
    TextOnly,
    /// Pooled global features through the baseline head.
    GlobalOnly,
}

impl BranchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BranchMode::Full => "full",
            BranchMode::VisionOnly => "vision-only",
            BranchMode::TextOnly => "text-only",
            BranchMode::GlobalOnly => "global-only",
        }
    }
}

impl std::str::FromStr for BranchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BranchMode::Full),
            "vision-only" | "vision" => Ok(BranchMode::VisionOnly),
            "text-only" | "text" => Ok(BranchMode::TextOnly),
            "global-only" | "global" => Ok(BranchMode::GlobalOnly),
            other => Err(Error::Usage(format!(
                "unknown branch mode '{other}' (expected full, vision-only, text-only, or global-only)"
            ))),
        }
    }
}

impl std::fmt::Display for BranchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One sample's precomputed features plus its label.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub sample_id: String,
    /// `[global_rows x d_global]` scene features.
    pub global: Tensor,
    /// `[local_slots x d_local]` object features, zero-padded.
    pub local: Tensor,
    /// Which object slots hold real objects.
    pub local_valid: Vec<bool>,
    /// `[text_slots x d_text]` description embeddings, zero-padded.
    pub text: Tensor,
    /// Which text slots hold real descriptions.
    pub text_valid: Vec<bool>,
    /// Per-class targets: 0/1 indicators (exactly one for single-label data).
    pub label: Vec<f64>,
}

impl FeatureBundle {
    /// Structural checks a bundle must pass before it enters the model:
    /// declared shapes, mask lengths, at least one valid row per padded
    /// matrix, exact zeros in padding rows, and 0/1 labels (one-hot when
    /// the task is single-label).
    pub fn validate(&self, dims: &DatasetDims, classes: usize, multi_label: bool) -> Result<()> {
        let id = &self.sample_id;
        let expect = |name: &str, t: &Tensor, rows: usize, cols: usize| -> Result<()> {
            if t.shape() != [rows, cols] {
                return Err(Error::Data(format!(
                    "{id}: {name} features must be [{rows} x {cols}], got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect("global", &self.global, dims.global_rows, dims.d_global)?;
        expect("local", &self.local, dims.local_slots, dims.d_local)?;
        expect("text", &self.text, dims.text_slots, dims.d_text)?;
        for (name, mask, rows) in [
            ("local", &self.local_valid, dims.local_slots),
            ("text", &self.text_valid, dims.text_slots),
        ] {
            if mask.len() != rows {
                return Err(Error::Data(format!(
                    "{id}: {name} mask has {} entries for {rows} rows",
                    mask.len()
                )));
            }
            if !mask.iter().any(|&v| v) {
                return Err(Error::Data(format!(
                    "{id}: every {name} slot is masked out; need at least one valid row"
                )));
            }
        }
        for (name, t, mask) in [
            ("local", &self.local, &self.local_valid),
            ("text", &self.text, &self.text_valid),
        ] {
            for (row, &ok) in mask.iter().enumerate() {
                if !ok && t.row(row).iter().any(|&v| v != 0.0) {
                    return Err(Error::Data(format!(
                        "{id}: {name} padding row {row} is masked out but not zero"
                    )));
                }
            }
        }
        if self.label.len() != classes {
            return Err(Error::Data(format!(
                "{id}: label has {} entries for {classes} classes",
                self.label.len()
            )));
        }
        if self.label.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("{id}: labels must be 0 or 1")));
        }
        if !multi_label {
            let ones = self.label.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 {
                return Err(Error::Data(format!(
                    "{id}: single-label sample must have exactly one positive class, got {ones}"
                )));
            }
        }
        Ok(())
    }

    /// The label as a `[1 x classes]` tensor for loss ops.
    pub fn label_tensor(&self) -> Result<Tensor> {
        Tensor::new(&[1, self.label.len()], self.label.clone())
    }
}

/// Per-branch activation maps produced by one forward pass. Fields are
/// populated according to the requested [`BranchMode`].
pub struct ForwardOutput {
    /// `[local_slots x classes]` vision-branch activations.
    pub vision_cam: Option<Var>,
    /// `[text_slots x classes]` text-branch activations.
    pub text_cam: Option<Var>,
    /// `[1 x classes]` logits from the global-only baseline head.
    pub global_logits: Option<Var>,
    /// Self-attention weights over objects (diagnostics).
    pub object_attention: Option<Vec<Var>>,
}

/// Dual-branch model: projections, attention blocks, and activation heads.
/// All parameters live in one [`ParamStore`] created by [`DualBranchModel::init`].
#[derive(Clone, Debug)]
pub struct DualBranchModel {
    pub cfg: ModelConfig,
    pub dims: DatasetDims,
    pub classes: usize,
    proj_g1: Affine,
    proj_g2: Affine,
    proj_t1: Affine,
    proj_t2: Affine,
    proj_v: Option<Affine>,
    attn_obj: MultiHeadAttention,
    attn_vision: MultiHeadAttention,
    attn_text: MultiHeadAttention,
    clf_vision: Classifier,
    clf_text: Classifier,
    clf_global: Classifier,
}

impl DualBranchModel {
    /// Builds the model and registers every parameter. Wide inputs pass
    /// through a two-layer projector (hidden width `2 * d_model`); local
    /// features get a single linear map only when their width differs from
    /// the model width.
    pub fn init<R: rand::Rng>(
        cfg: ModelConfig,
        dims: DatasetDims,
        classes: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.d_model == 0 {
            return Err(Error::Config("model width must be positive".into()));
        }
        let d = cfg.d_model;
        let hidden = 2 * d;
        let proj_g1 = Affine::init("proj_g.l1", dims.d_global, hidden, store, rng)?;
        let proj_g2 = Affine::init("proj_g.l2", hidden, d, store, rng)?;
        let proj_t1 = Affine::init("proj_t.l1", dims.d_text, hidden, store, rng)?;
        let proj_t2 = Affine::init("proj_t.l2", hidden, d, store, rng)?;
        let proj_v = if dims.d_local != d {
            Some(Affine::init("proj_v", dims.d_local, d, store, rng)?)
        } else {
            None
        };
        let attn_obj = MultiHeadAttention::init("attn_obj", d, cfg.heads, store, rng)?;
        let attn_vision = MultiHeadAttention::init("attn_vision", d, cfg.heads, store, rng)?;
        let attn_text = MultiHeadAttention::init("attn_text", d, cfg.heads, store, rng)?;
        let clf_vision = Classifier::init("clf_vision", d, classes, cfg.dropout, store, rng)?;
        let clf_text = Classifier::init("clf_text", d, classes, cfg.dropout, store, rng)?;
        let clf_global = Classifier::init("clf_global", d, classes, cfg.dropout, store, rng)?;
        Ok(DualBranchModel {
            cfg,
            dims,
            classes,
            proj_g1,
            proj_g2,
            proj_t1,
            proj_t2,
            proj_v,
            attn_obj,
            attn_vision,
            attn_text,
            clf_vision,
            clf_text,
            clf_global,
        })
    }

    fn project_global(&self, tape: &mut Tape, bind: &mut Binding, g: Var) -> Result<Var> {
        let h = self.proj_g1.forward(tape, bind, g)?;
        let h = tape.relu(h)?;
        self.proj_g2.forward(tape, bind, h)
    }

    fn project_text(&self, tape: &mut Tape, bind: &mut Binding, t: Var) -> Result<Var> {
        let h = self.proj_t1.forward(tape, bind, t)?;
        let h = tape.relu(h)?;
        self.proj_t2.forward(tape, bind, h)
    }

    /// Runs the branches selected by `mode` on one bundle. Dropout draws
    /// from `rng` only when `training` is set; evaluation passes are
    /// RNG-independent.
    pub fn forward<R: rand::Rng>(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        bundle: &FeatureBundle,
        mode: BranchMode,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let g_raw = tape.leaf(bundle.global.clone());
        let g_ctx = self.project_global(tape, bind, g_raw)?;

        let mut out = ForwardOutput {
            vision_cam: None,
            text_cam: None,
            global_logits: None,
            object_attention: None,
        };

        if matches!(mode, BranchMode::Full | BranchMode::VisionOnly) {
            let v_raw = tape.leaf(bundle.local.clone());
            let v_in = match &self.proj_v {
                Some(p) => p.forward(tape, bind, v_raw)?,
                None => v_raw,
            };
            let sa: AttentionOutput =
                self.attn_obj
                    .self_attention(tape, bind, v_in, Some(&bundle.local_valid))?;
            let fused = self
                .attn_vision
                .cross_attention(tape, bind, sa.out, g_ctx, None)?;
            let cam = self
                .clf_vision
                .forward(tape, bind, fused.out, training, rng)?;
            out.vision_cam = Some(cam);
            out.object_attention = Some(sa.weights);
        }

        if matches!(mode, BranchMode::Full | BranchMode::TextOnly) {
            let t_raw = tape.leaf(bundle.text.clone());
            let t_in = self.project_text(tape, bind, t_raw)?;
            let fused = self
                .attn_text
                .cross_attention(tape, bind, t_in, g_ctx, None)?;
            let cam = self
                .clf_text
                .forward(tape, bind, fused.out, training, rng)?;
            out.text_cam = Some(cam);
        }

        if matches!(mode, BranchMode::GlobalOnly) {
            let pooled = tape.mean_axis(g_ctx, 0)?;
            let logits = self.clf_global.forward(tape, bind, pooled, training, rng)?;
            out.global_logits = Some(logits);
        }

        Ok(out)
    }
}

/// Pools the activation maps of a forward pass into `[1 x classes]` bag
/// logits. When `refined_text_cam` is given it replaces the raw text-branch
/// map (the refinement average computed elsewhere).
pub fn bag_logits(
    tape: &mut Tape,
    fwd: &ForwardOutput,
    bundle: &FeatureBundle,
    decision: &DecisionConfig,
    refined_text_cam: Option<Var>,
) -> Result<Var> {
    let text_cam = refined_text_cam.or(fwd.text_cam);
    let pooled_vision = match fwd.vision_cam {
        Some(cam) => Some(tape.topk_mean_cols(cam, decision.k, &bundle.local_valid)?),
        None => None,
    };
    let pooled_text = match text_cam {
        Some(cam) => Some(tape.topk_mean_cols(cam, decision.k_hat, &bundle.text_valid)?),
        None => None,
    };
    match (pooled_vision, pooled_text, fwd.global_logits) {
        (Some(v), Some(t), _) => fuse_pooled(tape, v, t, decision.lambda),
        (Some(v), None, _) => Ok(v),
        (None, Some(t), _) => Ok(t),
        (None, None, Some(g)) => Ok(g),
        (None, None, None) => Err(Error::Usage(
            "forward output carries no branch to pool".into(),
        )),
    }
}
