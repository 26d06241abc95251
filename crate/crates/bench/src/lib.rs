//! Shared fixtures for the benchmark suite: deterministic random feature
//! bundles and models at a scale matching real captured data.

use fusedec_core::fusion::{DatasetDims, DualBranchModel, FeatureBundle, ModelConfig};
use fusedec_core::params::ParamStore;
use fusedec_core::Result;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Feature-table sizes comparable to a full-scale driving dataset: a 4-row
/// scene grid, 80 object slots, 20 description slots.
pub fn full_scale_dims() -> DatasetDims {
    DatasetDims {
        global_rows: 4,
        local_slots: 80,
        text_slots: 20,
        d_global: 1024,
        d_local: 256,
        d_text: 1024,
    }
}

/// A bundle filled with uniform noise; half-filled validity masks so the
/// masked code paths are exercised.
pub fn random_bundle(dims: DatasetDims, classes: usize, seed: u64) -> Result<FeatureBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(-1.0, 1.0);
    let mut table = |rows: usize, cols: usize| -> Vec<f64> {
        (0..rows * cols).map(|_| unit.sample(&mut rng)).collect()
    };
    let global = table(dims.global_rows, dims.d_global);
    let mut local = table(dims.local_slots, dims.d_local);
    let mut text = table(dims.text_slots, dims.d_text);
    let local_filled = dims.local_slots / 2 + 1;
    let text_filled = dims.text_slots / 2 + 1;
    // Masked-out padding rows hold zeros, as captured bundles do.
    local[local_filled * dims.d_local..].fill(0.0);
    text[text_filled * dims.d_text..].fill(0.0);
    let bundle = FeatureBundle {
        sample_id: format!("bench-{seed}"),
        global: fusedec_core::Tensor::new(&[dims.global_rows, dims.d_global], global)?,
        local: fusedec_core::Tensor::new(&[dims.local_slots, dims.d_local], local)?,
        local_valid: (0..dims.local_slots).map(|i| i < local_filled).collect(),
        text: fusedec_core::Tensor::new(&[dims.text_slots, dims.d_text], text)?,
        text_valid: (0..dims.text_slots).map(|i| i < text_filled).collect(),
        label: (0..classes)
            .map(|c| if c % 2 == 0 { 1.0 } else { 0.0 })
            .collect(),
    };
    bundle.validate(&dims, classes, true)?;
    Ok(bundle)
}

/// A freshly initialized model and its parameter store.
pub fn fresh_model(
    cfg: ModelConfig,
    dims: DatasetDims,
    classes: usize,
    seed: u64,
) -> Result<(DualBranchModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DualBranchModel::init(cfg, dims, classes, &mut store, &mut rng)?;
    Ok((model, store))
}
