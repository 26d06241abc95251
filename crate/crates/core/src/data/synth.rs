//! Synthetic dataset generator with planted, recoverable structure.
//!
//! Every class owns one orthonormal direction per modality (objects, text,
//! global scene). A sample's positive classes plant those directions into a
//! few object rows and text rows; the global features carry an attenuated
//! mix of the positive directions. Negative classes may plant *hallucinated*
//! text rows — rows that look exactly like genuine evidence for a class the
//! label rules out — which is what text-branch refinement learns to
//! suppress: the emitted pseudo activation maps mark only truthful rows.
//!
//! Generation is fully deterministic in the seed: per-sample streams are
//! derived by tag, so sample `k` has the same bytes no matter how many
//! samples surround it.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::bundle::write_bundle;
use crate::data::manifest::{Manifest, SampleEntry, TaskKind};
use crate::error::{Error, Result};
use crate::fusion::{DatasetDims, FeatureBundle};
use crate::numeric::derive_seed;
use crate::refine::PseudoCam;
use crate::tensor::Tensor;

/// Everything that defines a synthetic dataset.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub train: usize,
    pub eval: usize,
    pub classes: usize,
    pub dims: DatasetDims,
    pub multi_label: bool,
    /// Per-class positive probability before conditioning on "at least one
    /// positive" (multi-label only).
    pub positive_rate: f64,
    /// Object rows planted per positive class.
    pub planted_local_per_class: usize,
    /// Text rows planted per positive class.
    pub planted_text_per_class: usize,
    /// Chance that a *negative* class plants one misleading text row.
    pub hallucination_rate: f64,
    /// Gaussian noise scale on object and text rows.
    pub noise: f64,
    /// Gaussian noise scale on global rows.
    pub global_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            train: 200,
            eval: 50,
            classes: 4,
            dims: DatasetDims {
                global_rows: 4,
                local_slots: 16,
                text_slots: 8,
                d_global: 128,
                d_local: 64,
                d_text: 128,
            },
            multi_label: true,
            positive_rate: 0.35,
            planted_local_per_class: 2,
            planted_text_per_class: 1,
            hallucination_rate: 0.5,
            noise: 0.05,
            global_noise: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        if c == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if !self.multi_label && c < 2 {
            return Err(Error::Config(
                "single-label data needs at least two classes".into(),
            ));
        }
        if self.train == 0 || self.eval == 0 {
            return Err(Error::Config(
                "train and eval sizes must be positive".into(),
            ));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::Config(format!(
                "positive rate must be in (0, 1), got {}",
                self.positive_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.hallucination_rate) {
            return Err(Error::Config(format!(
                "hallucination rate must be in [0, 1], got {}",
                self.hallucination_rate
            )));
        }
        for (name, v) in [("noise", self.noise), ("global_noise", self.global_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.planted_local_per_class == 0 || self.planted_text_per_class == 0 {
            return Err(Error::Config("planted row counts must be positive".into()));
        }
        let d = &self.dims;
        for (name, width) in [
            ("d_local", d.d_local),
            ("d_text", d.d_text),
            ("d_global", d.d_global),
        ] {
            if width < c {
                return Err(Error::Config(format!(
                    "{name} = {width} cannot hold {c} orthonormal class directions"
                )));
            }
        }
        if d.local_slots < c * self.planted_local_per_class + 1 {
            return Err(Error::Config(format!(
                "local_slots = {} cannot hold {c} x {} planted rows plus background",
                d.local_slots, self.planted_local_per_class
            )));
        }
        if d.text_slots < c * self.planted_text_per_class.max(1) + 1 {
            return Err(Error::Config(format!(
                "text_slots = {} cannot hold worst-case planted and hallucinated rows",
                d.text_slots
            )));
        }
        if d.global_rows == 0 {
            return Err(Error::Config("global_rows must be positive".into()));
        }
        Ok(())
    }

    /// Analytic per-class positive marginal after conditioning on at least
    /// one positive class (multi-label).
    pub fn conditional_positive_marginal(&self) -> f64 {
        let p = self.positive_rate;
        p / (1.0 - (1.0 - p).powi(self.classes as i32))
    }
}

/// Orthonormal per-class directions for each modality. Shared by every
/// split of a dataset (they depend only on the seed).
pub struct ClassDirections {
    pub local: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub global: Vec<Vec<f64>>,
}

fn gaussian_vec<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn gram_schmidt(c: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(c);
    while dirs.len() < c {
        let mut v = gaussian_vec(d, rng);
        for u in &dirs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            dirs.push(v);
        }
    }
    dirs
}

pub fn class_directions(spec: &SyntheticSpec) -> ClassDirections {
    let make = |modality: &str, d: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            spec.seed,
            &format!("synth.directions.{modality}"),
        ));
        gram_schmidt(spec.classes, d, &mut rng)
    };
    ClassDirections {
        local: make("local", spec.dims.d_local),
        text: make("text", spec.dims.d_text),
        global: make("global", spec.dims.d_global),
    }
}

/// Ground truth of one generated sample: which rows were planted for which
/// class, and which text rows are hallucinations.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleTruth {
    pub id: String,
    /// Per class: object rows carrying that class's direction.
    pub planted_local: Vec<Vec<usize>>,
    /// Per class: truthful text rows.
    pub planted_text: Vec<Vec<usize>>,
    /// Per class: misleading text rows (the class is negative).
    pub hallucinated_text: Vec<Vec<usize>>,
}

/// Paths produced by [`generate`].
pub struct SynthOutput {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

const CLASS_NAME_POOL: &[&str] = &[
    "move forward",
    "stop",
    "turn left",
    "turn right",
    "slow down",
    "change lane",
];

/// Scene objects associated with each class, drawn from the built-in
/// lexicon so description text stays machine-matchable.
const CLASS_OBJECTS: &[[&str; 2]] = &[
    ["green light", "clear road"],
    ["red light", "stop sign"],
    ["lane marking", "intersection"],
    ["crosswalk", "curb"],
    ["pedestrian", "traffic cone"],
    ["truck", "barrier"],
];

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|i| {
            if i < CLASS_NAME_POOL.len() {
                CLASS_NAME_POOL[i].to_string()
            } else {
                format!("action-{i}")
            }
        })
        .collect()
}

fn class_object(class: usize, pick: usize) -> &'static str {
    CLASS_OBJECTS[class % CLASS_OBJECTS.len()][pick % 2]
}

#[derive(Clone, Copy, PartialEq)]
enum TextRole {
    Planted(usize),
    Hallucinated(usize),
    Background,
}

/// Generates one sample in memory. `split` and `index` select an
/// independent, order-free random stream under the spec's seed.
pub fn generate_sample(
    spec: &SyntheticSpec,
    dirs: &ClassDirections,
    split: &str,
    index: usize,
) -> Result<(FeatureBundle, PseudoCam, SampleTruth, Vec<String>)> {
    let id = format!("{split}-{index:06}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        &format!("synth.sample.{split}.{index}"),
    ));
    let c = spec.classes;
    let d = spec.dims;

    // Labels: conditioned multi-label Bernoulli, or a uniform single class.
    let labels: Vec<f64> = if spec.multi_label {
        loop {
            let draw: Vec<f64> = (0..c)
                .map(|_| f64::from(rng.gen_bool(spec.positive_rate)))
                .collect();
            if draw.contains(&1.0) {
                break draw;
            }
        }
    } else {
        let hot = rng.gen_range(0..c);
        (0..c).map(|i| f64::from(i == hot)).collect()
    };
    let positives: Vec<usize> = (0..c).filter(|&i| labels[i] == 1.0).collect();

    // Object rows: planted rows for each positive class, then background.
    let planted_local_total = positives.len() * spec.planted_local_per_class;
    let max_background = d.local_slots - planted_local_total;
    let background_local = rng.gen_range(1..=max_background);
    let valid_local = planted_local_total + background_local;

    let mut local_roles: Vec<Option<usize>> = Vec::with_capacity(valid_local);
    for &cls in &positives {
        local_roles.extend(std::iter::repeat_n(Some(cls), spec.planted_local_per_class));
    }
    local_roles.extend(std::iter::repeat_n(None, background_local));
    local_roles.shuffle(&mut rng);

    let mut local = vec![0.0; d.local_slots * d.d_local];
    let mut local_valid = vec![false; d.local_slots];
    let mut planted_local: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (row, role) in local_roles.iter().enumerate() {
        local_valid[row] = true;
        let noise = gaussian_vec(d.d_local, &mut rng);
        for col in 0..d.d_local {
            let base = match role {
                Some(cls) => dirs.local[*cls][col],
                None => 0.0,
            };
            local[row * d.d_local + col] = base + spec.noise * noise[col];
        }
        if let Some(cls) = role {
            planted_local[*cls].push(row);
        }
    }

    // Text rows: truthful rows for positives, hallucinations for some
    // negatives, one background row.
    let mut text_roles: Vec<TextRole> = Vec::new();
    for &cls in &positives {
        text_roles.extend(std::iter::repeat_n(
            TextRole::Planted(cls),
            spec.planted_text_per_class,
        ));
    }
    for (cls, &label) in labels.iter().enumerate() {
        if label == 0.0 && rng.gen_bool(spec.hallucination_rate) {
            text_roles.push(TextRole::Hallucinated(cls));
        }
    }
    text_roles.push(TextRole::Background);
    text_roles.shuffle(&mut rng);
    let valid_text = text_roles.len();

    let mut text = vec![0.0; d.text_slots * d.d_text];
    let mut text_valid = vec![false; d.text_slots];
    let mut planted_text: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut hallucinated_text: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut pseudo_rows = vec![vec![0.0; c]; d.text_slots];
    let mut descriptions = Vec::with_capacity(valid_text);
    for (row, role) in text_roles.iter().enumerate() {
        text_valid[row] = true;
        let noise = gaussian_vec(d.d_text, &mut rng);
        let planted_dir = match role {
            TextRole::Planted(cls) | TextRole::Hallucinated(cls) => Some(*cls),
            TextRole::Background => None,
        };
        for col in 0..d.d_text {
            let base = match planted_dir {
                Some(cls) => dirs.text[cls][col],
                None => 0.0,
            };
            text[row * d.d_text + col] = base + spec.noise * noise[col];
        }
        let pick = rng.gen_range(0..2usize);
        match role {
            TextRole::Planted(cls) => {
                planted_text[*cls].push(row);
                pseudo_rows[row][*cls] = 1.0;
                descriptions.push(format!("a {} visible ahead", class_object(*cls, pick)));
            }
            TextRole::Hallucinated(cls) => {
                hallucinated_text[*cls].push(row);
                descriptions.push(format!(
                    "possibly a {} in the distance",
                    class_object(*cls, pick)
                ));
            }
            TextRole::Background => {
                descriptions.push("buildings and sky in the background".to_string());
            }
        }
    }

    // Global rows: attenuated mean of the positive directions plus noise.
    let mut mean_dir = vec![0.0; d.d_global];
    for &cls in &positives {
        for (acc, &coord) in mean_dir.iter_mut().zip(&dirs.global[cls]) {
            *acc += coord;
        }
    }
    for v in &mut mean_dir {
        *v *= 0.5 / positives.len() as f64;
    }
    let mut global = vec![0.0; d.global_rows * d.d_global];
    for row in 0..d.global_rows {
        let noise = gaussian_vec(d.d_global, &mut rng);
        for col in 0..d.d_global {
            global[row * d.d_global + col] = mean_dir[col] + spec.global_noise * noise[col];
        }
    }

    let bundle = FeatureBundle {
        sample_id: id.clone(),
        global: Tensor::new(&[d.global_rows, d.d_global], global)?,
        local: Tensor::new(&[d.local_slots, d.d_local], local)?,
        local_valid,
        text: Tensor::new(&[d.text_slots, d.d_text], text)?,
        text_valid,
        label: labels,
    };
    let pseudo = PseudoCam {
        sample_id: id.clone(),
        rows: pseudo_rows,
    };
    let truth = SampleTruth {
        id,
        planted_local,
        planted_text,
        hallucinated_text,
    };
    Ok((bundle, pseudo, truth, descriptions))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Parse(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn load_pseudo(path: &Path) -> Result<Vec<PseudoCam>> {
    read_json(path)
}

pub fn load_truth(path: &Path) -> Result<Vec<SampleTruth>> {
    read_json(path)
}

fn generate_split(
    spec: &SyntheticSpec,
    dirs: &ClassDirections,
    split: &str,
    count: usize,
    root: &Path,
) -> Result<PathBuf> {
    let split_dir = root.join(split);
    let bundle_dir = split_dir.join("bundles");
    std::fs::create_dir_all(&bundle_dir)
        .map_err(|e| Error::io(format!("creating {}", bundle_dir.display()), e))?;

    let mut samples = Vec::with_capacity(count);
    let mut pseudo = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    for index in 0..count {
        let (bundle, ps, tr, descriptions) = generate_sample(spec, dirs, split, index)?;
        let rel = format!("bundles/{}.fdb", bundle.sample_id);
        write_bundle(&split_dir.join(&rel), &bundle)?;
        samples.push(SampleEntry {
            id: bundle.sample_id.clone(),
            bundle: rel,
            labels: bundle.label.iter().map(|&v| v as u8).collect(),
            descriptions,
            image: None,
        });
        pseudo.push(ps);
        truth.push(tr);
    }

    let manifest = Manifest {
        name: format!("synthetic-{split}"),
        task: if spec.multi_label {
            TaskKind::MultiLabel
        } else {
            TaskKind::SingleLabel
        },
        classes: class_names(spec.classes),
        dims: spec.dims,
        samples,
    };
    let manifest_path = split_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    write_json(&split_dir.join("pseudo.json"), &pseudo)?;
    write_json(&split_dir.join("truth.json"), &truth)?;
    Ok(manifest_path)
}

/// Generates train and eval splits under `out`, writing per split a
/// manifest, one bundle file per sample, the oracle pseudo activation maps
/// (`pseudo.json`), and the planted ground truth (`truth.json`).
pub fn generate(spec: &SyntheticSpec, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let dirs = class_directions(spec);
    let train_manifest = generate_split(spec, &dirs, "train", spec.train, out)?;
    let eval_manifest = generate_split(spec, &dirs, "eval", spec.eval, out)?;
    Ok(SynthOutput {
        root: out.to_path_buf(),
        train_manifest,
        eval_manifest,
    })
}
