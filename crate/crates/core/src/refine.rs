//! Text-branch refinement and end-to-end inference.
//!
//! The raw text-branch activation map reflects whatever descriptions came
//! with a sample — including hallucinated or irrelevant ones. A small
//! surrogate network learns, from externally supplied 0/1 pseudo activation
//! maps, which description rows actually support which decision. At
//! inference the refined text map is the plain average of the raw map and
//! the surrogate's map; the average is symmetric and leaves an already
//! agreeing map unchanged.

use crate::error::{Error, Result};
use crate::fusion::{bag_logits, BranchMode, DualBranchModel, FeatureBundle};
use crate::mil::{decide, pool_topk, DecisionConfig};
use crate::params::{Affine, Binding, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;

/// Maps raw text embeddings straight to per-class activation logits,
/// `[text_slots x classes]`, without looking at the other modalities.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub d_text: usize,
    pub d_model: usize,
    pub classes: usize,
    l1: Affine,
    l2: Affine,
    l3: Affine,
}

impl SurrogateModel {
    /// Registers parameters under `surrogate.*`: a funnel from the text
    /// width through `2 * d_model` and `d_model` down to the class count.
    pub fn init<R: rand::Rng>(
        d_text: usize,
        d_model: usize,
        classes: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("surrogate needs at least one class".into()));
        }
        Ok(SurrogateModel {
            d_text,
            d_model,
            classes,
            l1: Affine::init("surrogate.l1", d_text, 2 * d_model, store, rng)?,
            l2: Affine::init("surrogate.l2", 2 * d_model, d_model, store, rng)?,
            l3: Affine::init("surrogate.l3", d_model, classes, store, rng)?,
        })
    }

    /// Per-row class logits from raw text embeddings.
    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, text: Var) -> Result<Var> {
        let h = self.l1.forward(tape, bind, text)?;
        let h = tape.relu(h)?;
        let h = self.l2.forward(tape, bind, h)?;
        let h = tape.relu(h)?;
        self.l3.forward(tape, bind, h)
    }
}

/// Externally supplied supervision for the surrogate: one 0/1 relevance
/// indicator per text row and class.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PseudoCam {
    pub sample_id: String,
    /// `[text_slots][classes]` indicators.
    pub rows: Vec<Vec<f64>>,
}

impl PseudoCam {
    /// Checks shape, 0/1 entries, zero rows at masked-out text slots, and
    /// that no row marks a class the sample's label rules out.
    pub fn validate(
        &self,
        text_slots: usize,
        classes: usize,
        label: &[f64],
        text_valid: &[bool],
    ) -> Result<()> {
        let id = &self.sample_id;
        if self.rows.len() != text_slots {
            return Err(Error::Data(format!(
                "{id}: pseudo activation map has {} rows for {text_slots} text slots",
                self.rows.len()
            )));
        }
        if label.len() != classes || text_valid.len() != text_slots {
            return Err(Error::Data(format!(
                "{id}: label or mask length does not match the dataset dimensions"
            )));
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::Data(format!(
                    "{id}: pseudo row {r} has {} entries for {classes} classes",
                    row.len()
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Data(format!(
                        "{id}: pseudo row {r} class {c} must be 0 or 1, got {v}"
                    )));
                }
                if v == 1.0 && !text_valid[r] {
                    return Err(Error::Data(format!(
                        "{id}: pseudo row {r} marks a masked-out text slot"
                    )));
                }
                if v == 1.0 && label[c] == 0.0 {
                    return Err(Error::Data(format!(
                        "{id}: pseudo row {r} marks class {c}, which the label rules out"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.rows)
    }
}

/// Surrogate training loss: mean binary cross-entropy between the
/// surrogate's logits and the pseudo indicators, over valid text rows only.
pub fn refinement_loss(
    tape: &mut Tape,
    surrogate_logits: Var,
    pseudo: &Tensor,
    text_valid: &[bool],
) -> Result<Var> {
    tape.bce_with_logits_mean(surrogate_logits, pseudo.data(), Some(text_valid))
}

/// Refined text activation map: the elementwise mean of the raw map and the
/// surrogate map. Symmetric in its arguments, and an exact fixed point when
/// both maps agree.
pub fn refine_cam(tape: &mut Tape, raw: Var, surrogate: Var) -> Result<Var> {
    let a = tape.scale(raw, 0.5)?;
    let b = tape.scale(surrogate, 0.5)?;
    tape.add(a, b)
}

/// Everything inference reports for one sample.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DecisionOutput {
    pub sample_id: String,
    /// Bag-level logits, one per class.
    pub logits: Vec<f64>,
    /// Per-class probabilities (sigmoid or softmax per task type).
    pub probabilities: Vec<f64>,
    /// Final decisions.
    pub decisions: Vec<bool>,
    /// Object rows backing each class's vision logit, best first.
    pub vision_explanation: Option<Vec<Vec<usize>>>,
    /// Text rows backing each class's text logit, best first.
    pub text_explanation: Option<Vec<Vec<usize>>>,
    /// Whether the text branch used surrogate refinement.
    pub refined: bool,
}

/// Runs one sample through the model in evaluation mode and reports
/// decisions plus instance-level explanations. Passing a surrogate refines
/// the text branch; without one the raw text map is used as-is.
pub fn predict(
    model: &DualBranchModel,
    store: &ParamStore,
    surrogate: Option<(&SurrogateModel, &ParamStore)>,
    bundle: &FeatureBundle,
    mode: BranchMode,
    decision: &DecisionConfig,
) -> Result<DecisionOutput> {
    decision.validate()?;
    let mut tape = Tape::new();
    let mut bind = Binding::frozen(store);
    // Evaluation passes never draw from the stream; the seed is arbitrary.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward(&mut tape, &mut bind, bundle, mode, false, &mut rng)?;

    let mut refined = false;
    let refined_cam = match (fwd.text_cam, surrogate) {
        (Some(raw), Some((sur, sur_store))) => {
            let mut sur_bind = Binding::frozen(sur_store);
            let text = tape.leaf(bundle.text.clone());
            let sur_cam = sur.forward(&mut tape, &mut sur_bind, text)?;
            refined = true;
            Some(refine_cam(&mut tape, raw, sur_cam)?)
        }
        _ => None,
    };

    let logits_var = bag_logits(&mut tape, &fwd, bundle, decision, refined_cam)?;
    let logits = tape.value(logits_var).data().to_vec();
    let (probabilities, decisions) = decide(&logits, decision)?;

    let vision_explanation = match fwd.vision_cam {
        Some(cam) => {
            let (_, picked) = pool_topk(tape.value(cam), decision.k, Some(&bundle.local_valid))?;
            Some(picked)
        }
        None => None,
    };
    let text_explanation = match refined_cam.or(fwd.text_cam) {
        Some(cam) => {
            let (_, picked) = pool_topk(tape.value(cam), decision.k_hat, Some(&bundle.text_valid))?;
            Some(picked)
        }
        None => None,
    };

    Ok(DecisionOutput {
        sample_id: bundle.sample_id.clone(),
        logits,
        probabilities,
        decisions,
        vision_explanation,
        text_explanation,
        refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{DatasetDims, ModelConfig};
    use crate::testutil::{rand_tensor, rng};

    fn dims() -> DatasetDims {
        DatasetDims {
            global_rows: 2,
            local_slots: 4,
            text_slots: 3,
            d_global: 8,
            d_local: 6,
            d_text: 10,
        }
    }

    fn tiny_setup() -> (
        DualBranchModel,
        ParamStore,
        SurrogateModel,
        ParamStore,
        FeatureBundle,
    ) {
        let cfg = ModelConfig {
            d_model: 6,
            heads: 2,
            dropout: 0.3,
        };
        let mut store = ParamStore::new();
        let mut r = rng(50);
        let model = DualBranchModel::init(cfg, dims(), 3, &mut store, &mut r).unwrap();
        let mut sur_store = ParamStore::new();
        let surrogate = SurrogateModel::init(10, 6, 3, &mut sur_store, &mut r).unwrap();

        let d = dims();
        let mut local = rand_tensor(&[d.local_slots, d.d_local], &mut r);
        for c in 0..d.d_local {
            local.data_mut()[3 * d.d_local + c] = 0.0;
        }
        let text = rand_tensor(&[d.text_slots, d.d_text], &mut r);
        let bundle = FeatureBundle {
            sample_id: "s".into(),
            global: rand_tensor(&[d.global_rows, d.d_global], &mut r),
            local,
            local_valid: vec![true, true, true, false],
            text,
            text_valid: vec![true, true, true],
            label: vec![1.0, 0.0, 1.0],
        };
        (model, store, surrogate, sur_store, bundle)
    }

    fn decision() -> DecisionConfig {
        DecisionConfig {
            classes: 3,
            k: 2,
            k_hat: 1,
            lambda: 0.8,
            multi_label: true,
            threshold: 0.5,
        }
    }

    #[test]
    fn surrogate_output_shape() {
        let (_, _, surrogate, sur_store, bundle) = tiny_setup();
        let mut tape = Tape::new();
        let mut bind = Binding::frozen(&sur_store);
        let text = tape.leaf(bundle.text.clone());
        let cam = surrogate.forward(&mut tape, &mut bind, text).unwrap();
        assert_eq!(tape.value(cam).shape(), &[3, 3]);
    }

    #[test]
    fn pseudo_cam_validation() {
        let label = [1.0, 0.0, 1.0];
        let valid = [true, true, false];
        let good = PseudoCam {
            sample_id: "s".into(),
            rows: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 0.0],
            ],
        };
        assert!(good.validate(3, 3, &label, &valid).is_ok());

        let mut bad = good.clone();
        bad.rows.pop();
        assert!(bad.validate(3, 3, &label, &valid).is_err());

        let mut bad = good.clone();
        bad.rows[0][0] = 0.7;
        assert!(bad.validate(3, 3, &label, &valid).is_err());

        // Marking a class the label rules out is rejected.
        let mut bad = good.clone();
        bad.rows[1][1] = 1.0;
        assert!(bad.validate(3, 3, &label, &valid).is_err());

        // Marking a masked-out text slot is rejected.
        let mut bad = good.clone();
        bad.rows[2][0] = 1.0;
        assert!(bad.validate(3, 3, &label, &valid).is_err());
    }

    #[test]
    fn refine_is_symmetric_and_idempotent() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let b = tape.leaf(Tensor::new(&[2, 2], vec![-0.4, 0.9, 0.1, -2.5]).unwrap());
        let ab = refine_cam(&mut tape, a, b).unwrap();
        let ba = refine_cam(&mut tape, b, a).unwrap();
        for (x, y) in tape.value(ab).data().iter().zip(tape.value(ba).data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let aa = refine_cam(&mut tape, a, a).unwrap();
        for (x, y) in tape.value(aa).data().iter().zip(tape.value(a).data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn refinement_loss_ignores_masked_rows() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(&[3, 2], vec![0.5, -0.5, 1.0, 2.0, 9.9, -9.9]).unwrap());
        let pseudo = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let valid = [true, true, false];
        let loss = refinement_loss(&mut tape, logits, &pseudo, &valid).unwrap();
        let a = tape.value(loss).data()[0];

        let mut tape2 = Tape::new();
        let logits2 =
            tape2.leaf(Tensor::new(&[3, 2], vec![0.5, -0.5, 1.0, 2.0, -3.3, 7.7]).unwrap());
        let loss2 = refinement_loss(&mut tape2, logits2, &pseudo, &valid).unwrap();
        assert_eq!(a.to_bits(), tape2.value(loss2).data()[0].to_bits());
    }

    #[test]
    fn surrogate_gradients_match_finite_differences() {
        let (_, _, surrogate, sur_store, bundle) = tiny_setup();
        let pseudo =
            Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let valid = [true, true, true];

        let loss_at = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let mut bind = Binding::frozen(store);
            let text = tape.leaf(bundle.text.clone());
            let out = surrogate.forward(&mut tape, &mut bind, text).unwrap();
            let loss = refinement_loss(&mut tape, out, &pseudo, &valid).unwrap();
            tape.value(loss).data()[0]
        };

        let mut tape = Tape::new();
        let mut bind = Binding::trainable(&sur_store);
        let text = tape.leaf(bundle.text.clone());
        let out = surrogate.forward(&mut tape, &mut bind, text).unwrap();
        let loss = refinement_loss(&mut tape, out, &pseudo, &valid).unwrap();
        tape.backward(loss).unwrap();
        let grads = bind.grads(&tape);

        let h = 1e-5;
        for name in ["surrogate.l1.w", "surrogate.l2.b", "surrogate.l3.w"] {
            let g = &grads[name];
            for e in [0usize, 2, 9] {
                if e >= g.len() {
                    continue;
                }
                let mut plus = sur_store.clone();
                plus.get_mut(name).unwrap().data_mut()[e] += h;
                let mut minus = sur_store.clone();
                minus.get_mut(name).unwrap().data_mut()[e] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let rel = (g[e] - numeric).abs() / g[e].abs().max(1.0);
                assert!(rel < 1e-6, "{name}[{e}] rel err {rel:.2e}");
            }
        }
    }

    #[test]
    fn predict_reports_decisions_and_explanations() {
        let (model, store, surrogate, sur_store, bundle) = tiny_setup();
        let dc = decision();

        let plain = predict(&model, &store, None, &bundle, BranchMode::Full, &dc).unwrap();
        assert_eq!(plain.logits.len(), 3);
        assert_eq!(plain.decisions.len(), 3);
        assert!(!plain.refined);
        let vis = plain.vision_explanation.as_ref().unwrap();
        assert_eq!(vis.len(), 3);
        for rows in vis {
            assert_eq!(rows.len(), 2);
            assert!(rows.iter().all(|&r| bundle.local_valid[r]));
        }
        let txt = plain.text_explanation.as_ref().unwrap();
        assert!(txt.iter().all(|rows| rows.len() == 1));

        let refined = predict(
            &model,
            &store,
            Some((&surrogate, &sur_store)),
            &bundle,
            BranchMode::Full,
            &dc,
        )
        .unwrap();
        assert!(refined.refined);
        assert_ne!(plain.logits, refined.logits);

        let global = predict(&model, &store, None, &bundle, BranchMode::GlobalOnly, &dc).unwrap();
        assert!(global.vision_explanation.is_none());
        assert!(global.text_explanation.is_none());
        assert!(!global.refined);

        // Vision-only inference never touches the surrogate.
        let vis_only = predict(
            &model,
            &store,
            Some((&surrogate, &sur_store)),
            &bundle,
            BranchMode::VisionOnly,
            &dc,
        )
        .unwrap();
        assert!(!vis_only.refined);
    }
}
