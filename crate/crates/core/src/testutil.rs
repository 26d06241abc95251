//! Shared helpers for unit tests: seeded random tensors and a
//! central-difference gradient oracle that is independent of the tape's
//! backward implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random tensor over `(-1, 1)`.
pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform random tensor bounded away from zero, for kink-free relu checks.
pub fn rand_tensor_nonzero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.2..1.0)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Central-difference check of every input gradient of `build`.
///
/// `build` must deterministically map leaves to a scalar loss (ops that draw
/// randomness must reseed internally) so that re-running it on perturbed
/// inputs probes the same function the backward pass differentiated.
pub fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let loss_of = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(
            tape.value(loss).numel(),
            1,
            "fd_check requires a scalar loss"
        );
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();

    let h = 1e-5;
    for (ti, &var) in vars.iter().enumerate() {
        let grad = tape
            .grad(var)
            .expect("every fd_check input should receive a gradient")
            .to_vec();
        for (e, &analytic) in grad.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[e] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            assert!(
                rel < tol,
                "input {ti} entry {e}: analytic {analytic} vs numeric {numeric} (rel err {rel:.3e})"
            );
        }
    }
}
