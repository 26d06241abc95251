//! Dataset-facing commands: synthetic generation and lexicon statistics.

use std::path::PathBuf;

use fusedec_core::data::bag::{top_objects, Lexicon};
use fusedec_core::data::manifest::Manifest;
use fusedec_core::data::synth::{generate, SyntheticSpec};
use fusedec_core::error::Result;
use fusedec_core::fusion::DatasetDims;

#[derive(clap::Args)]
pub struct SynthArgs {
    /// Output directory (train/ and eval/ splits are created inside)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training samples
    #[arg(long, default_value_t = 200)]
    train: usize,
    /// Evaluation samples
    #[arg(long, default_value_t = 50)]
    eval: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// One-hot labels with a softmax decision instead of independent sigmoids
    #[arg(long)]
    single_label: bool,
    /// Scene-level feature rows per sample
    #[arg(long, default_value_t = 4)]
    global_rows: usize,
    /// Object feature slots per sample
    #[arg(long, default_value_t = 16)]
    local_slots: usize,
    /// Description feature slots per sample
    #[arg(long, default_value_t = 8)]
    text_slots: usize,
    #[arg(long, default_value_t = 128)]
    d_global: usize,
    #[arg(long, default_value_t = 64)]
    d_local: usize,
    #[arg(long, default_value_t = 128)]
    d_text: usize,
    /// Per-class positive probability before conditioning on non-emptiness
    #[arg(long, default_value_t = 0.35)]
    positive_rate: f64,
    /// Planted object rows per positive class
    #[arg(long, default_value_t = 2)]
    planted_local: usize,
    /// Planted description rows per positive class
    #[arg(long, default_value_t = 1)]
    planted_text: usize,
    /// Probability of a misleading description for each negative class
    #[arg(long, default_value_t = 0.5)]
    hallucination_rate: f64,
    /// Noise scale on planted object and description rows
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Noise scale on scene-level rows
    #[arg(long, default_value_t = 0.1)]
    global_noise: f64,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        train: args.train,
        eval: args.eval,
        classes: args.classes,
        dims: DatasetDims {
            global_rows: args.global_rows,
            local_slots: args.local_slots,
            text_slots: args.text_slots,
            d_global: args.d_global,
            d_local: args.d_local,
            d_text: args.d_text,
        },
        multi_label: !args.single_label,
        positive_rate: args.positive_rate,
        planted_local_per_class: args.planted_local,
        planted_text_per_class: args.planted_text,
        hallucination_rate: args.hallucination_rate,
        noise: args.noise,
        global_noise: args.global_noise,
    };
    let output = generate(&spec, &args.out)?;
    println!(
        "train={} eval={} classes={} task={}",
        spec.train,
        spec.eval,
        spec.classes,
        if spec.multi_label {
            "multi-label"
        } else {
            "single-label"
        }
    );
    if spec.multi_label {
        println!(
            "marginal_positive={:.4}",
            spec.conditional_positive_marginal()
        );
    }
    println!("train_manifest={}", output.train_manifest.display());
    println!("eval_manifest={}", output.eval_manifest.display());
    Ok(())
}

#[derive(clap::Args)]
pub struct BagArgs {
    /// Manifest whose sample descriptions are scanned
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Maximum objects to report
    #[arg(long, default_value_t = 10)]
    limit: usize,
}

pub fn bag(args: BagArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    let lexicon = Lexicon::builtin();
    let texts: Vec<String> = manifest
        .samples
        .iter()
        .flat_map(|s| s.descriptions.iter().cloned())
        .collect();
    println!(
        "samples={} descriptions={}",
        manifest.samples.len(),
        texts.len()
    );
    for (object, count) in top_objects(&texts, &lexicon, args.limit) {
        let supercategory = lexicon.supercategory_of(&object).unwrap_or("unknown");
        println!("object={object} count={count} supercategory={supercategory}");
    }
    Ok(())
}
