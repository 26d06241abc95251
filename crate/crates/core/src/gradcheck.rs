//! End-to-end gradient verification: recorded gradients of the full
//! training loss against central finite differences on a fresh model and a
//! random feature bundle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fusion::{
    bag_logits, BranchMode, DatasetDims, DualBranchModel, FeatureBundle, ModelConfig,
};
use crate::mil::{mil_loss, DecisionConfig};
use crate::numeric::derive_seed;
use crate::params::{Binding, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// What to check and at what scale.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Parameter entries sampled for finite-difference probing.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    pub dims: DatasetDims,
    pub model: ModelConfig,
    pub decision: DecisionConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 7,
            samples: 24,
            step: 1e-5,
            dims: DatasetDims {
                global_rows: 15,
                local_slots: 80,
                text_slots: 20,
                d_global: 1024,
                d_local: 256,
                d_text: 1024,
            },
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

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("need at least one probe".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!(
                "step must be positive, got {}",
                self.step
            )));
        }
        self.decision.validate()
    }
}

/// One probed parameter entry.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a gradient check.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub probes: Vec<ProbeResult>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap())
    }
}

fn random_bundle(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<FeatureBundle> {
    let d = cfg.dims;
    let c = cfg.decision.classes;
    let gauss = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
            .collect()
    };

    // Roughly three quarters of the slots hold real rows.
    let valid_of = |slots: usize, rng: &mut ChaCha8Rng| -> Vec<bool> {
        let valid = (slots * 3 / 4).max(1);
        let mut mask = vec![false; slots];
        for m in mask.iter_mut().take(valid) {
            *m = true;
        }
        let _ = rng; // masks are structural; contents carry the randomness
        mask
    };
    let local_valid = valid_of(d.local_slots, rng);
    let text_valid = valid_of(d.text_slots, rng);

    let mut local = vec![0.0; d.local_slots * d.d_local];
    for (row, &ok) in local_valid.iter().enumerate() {
        if ok {
            let vals = gauss(d.d_local, rng);
            local[row * d.d_local..(row + 1) * d.d_local].copy_from_slice(&vals);
        }
    }
    let mut text = vec![0.0; d.text_slots * d.d_text];
    for (row, &ok) in text_valid.iter().enumerate() {
        if ok {
            let vals = gauss(d.d_text, rng);
            text[row * d.d_text..(row + 1) * d.d_text].copy_from_slice(&vals);
        }
    }

    let label: Vec<f64> = if cfg.decision.multi_label {
        let mut l: Vec<f64> = (0..c).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        if l.iter().all(|&v| v == 0.0) {
            l[rng.gen_range(0..c)] = 1.0;
        }
        l
    } else {
        let hot = rng.gen_range(0..c);
        (0..c).map(|i| f64::from(i == hot)).collect()
    };

    Ok(FeatureBundle {
        sample_id: "gradcheck".into(),
        global: Tensor::new(
            &[d.global_rows, d.d_global],
            gauss(d.global_rows * d.d_global, rng),
        )?,
        local: Tensor::new(&[d.local_slots, d.d_local], local)?,
        local_valid,
        text: Tensor::new(&[d.text_slots, d.d_text], text)?,
        text_valid,
        label,
    })
}

/// Builds a fresh model and a random bundle, records the training-loss
/// gradient, and probes sampled parameter entries with central
/// differences. Deterministic in the seed.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck.init"));
    let mut store = ParamStore::new();
    let model = DualBranchModel::init(
        cfg.model,
        cfg.dims,
        cfg.decision.classes,
        &mut store,
        &mut rng,
    )?;
    let mut bundle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck.bundle"));
    let bundle = random_bundle(cfg, &mut bundle_rng)?;
    let targets = bundle.label_tensor()?;

    let loss_at = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bind = Binding::frozen(store);
        // Evaluation-mode forward: dropout is off, so the loss is a smooth
        // deterministic function of the parameters.
        let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model.forward(
            &mut tape,
            &mut bind,
            &bundle,
            BranchMode::Full,
            false,
            &mut eval_rng,
        )?;
        let logits = bag_logits(&mut tape, &fwd, &bundle, &cfg.decision, None)?;
        let loss = mil_loss(&mut tape, logits, &targets, cfg.decision.multi_label)?;
        Ok(tape.value(loss).data()[0])
    };

    // Analytic gradients in one recorded pass.
    let mut tape = Tape::new();
    let mut bind = Binding::trainable(&store);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward(
        &mut tape,
        &mut bind,
        &bundle,
        BranchMode::Full,
        false,
        &mut eval_rng,
    )?;
    let logits = bag_logits(&mut tape, &fwd, &bundle, &cfg.decision, None)?;
    let loss = mil_loss(&mut tape, logits, &targets, cfg.decision.multi_label)?;
    tape.backward(loss)?;
    let grads = bind.grads(&tape);

    // Sample entries uniformly across every parameter that received a
    // gradient.
    let names: Vec<&String> = grads.keys().collect();
    let total: usize = names.iter().map(|n| grads[*n].len()).sum();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck.probes"));
    let mut probes = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let mut flat = probe_rng.gen_range(0..total);
        let mut chosen = None;
        for name in &names {
            let len = grads[*name].len();
            if flat < len {
                chosen = Some(((*name).clone(), flat));
                break;
            }
            flat -= len;
        }
        let (name, index) = chosen.expect("flat index in range");

        let mut plus = store.clone();
        plus.get_mut(&name)?.data_mut()[index] += cfg.step;
        let mut minus = store.clone();
        minus.get_mut(&name)?.data_mut()[index] -= cfg.step;
        let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * cfg.step);
        let analytic = grads[&name][index];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        probes.push(ProbeResult {
            param: name,
            index,
            analytic,
            numeric,
            rel_err,
        });
    }

    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    let mean_rel_err = probes.iter().map(|p| p.rel_err).sum::<f64>() / probes.len() as f64;
    Ok(GradcheckReport {
        checked: probes.len(),
        max_rel_err,
        mean_rel_err,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GradcheckConfig {
        GradcheckConfig {
            seed: 21,
            samples: 12,
            step: 1e-5,
            dims: DatasetDims {
                global_rows: 3,
                local_slots: 6,
                text_slots: 4,
                d_global: 10,
                d_local: 8,
                d_text: 12,
            },
            model: ModelConfig {
                d_model: 8,
                heads: 2,
                dropout: 0.5,
            },
            decision: DecisionConfig {
                classes: 3,
                k: 2,
                k_hat: 1,
                lambda: 0.8,
                multi_label: true,
                threshold: 0.5,
            },
        }
    }

    #[test]
    fn small_scale_gradients_agree_with_finite_differences() {
        let report = run(&small_cfg()).unwrap();
        assert_eq!(report.checked, 12);
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst().map(|p| (&p.param, p.index))
        );
    }

    #[test]
    fn report_is_deterministic() {
        let a = run(&small_cfg()).unwrap();
        let b = run(&small_cfg()).unwrap();
        assert_eq!(a.max_rel_err.to_bits(), b.max_rel_err.to_bits());
        assert_eq!(a.probes.len(), b.probes.len());
        for (x, y) in a.probes.iter().zip(&b.probes) {
            assert_eq!(x.param, y.param);
            assert_eq!(x.index, y.index);
            assert_eq!(x.analytic.to_bits(), y.analytic.to_bits());
        }
    }

    #[test]
    fn single_label_losses_are_checked_too() {
        let mut cfg = small_cfg();
        cfg.decision.multi_label = false;
        let report = run(&cfg).unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {:.3e}",
            report.max_rel_err
        );
    }

    #[test]
    fn config_validation() {
        let mut bad = small_cfg();
        bad.samples = 0;
        assert!(bad.validate().is_err());
        let mut bad = small_cfg();
        bad.step = 0.0;
        assert!(bad.validate().is_err());
    }
}
