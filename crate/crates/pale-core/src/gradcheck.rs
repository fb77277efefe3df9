//! Central finite-difference checking of tape gradients.
//!
//! The objective is a fixed pseudo-random weighting of the checked
//! function's output (a plain sum is blind to ops with built-in
//! normalization, softmax above all). The analytic gradient comes from one
//! backward pass; the numeric one from two forward evaluations per input
//! coordinate with step `eps * max(1, |x_i|)`.

use alloc::vec::Vec;

use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::Result;

/// Max over coordinates of `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
///
/// `f` rebuilds the computation on a fresh tape from the given inputs and
/// returns its output variable. All inputs are checked.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let floor = T::from_f64(1e-8);

    // Analytic gradients, one backward pass seeded with the objective weights.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut wrng = Rng::new(0x9d2c_5680);
    let weights = Tensor::from_fn(tape.shape(out), |_, _, _, _| {
        T::from_f64(wrng.uniform(0.25, 1.75))
    });
    let mut grads = tape.backward_with_seed(out, weights.clone())?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();

    let eval_sum = |perturbed: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let mut sum = T::zero();
        for (&v, &w) in tape.value(out).data().iter().zip(weights.data()) {
            sum = sum + v * w;
        }
        Ok(sum)
    };

    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.data().len() {
            let x0 = input.data()[i];
            let step = eps * T::one().max(x0.abs());

            work[ti].data_mut()[i] = x0 + step;
            let plus = eval_sum(&work)?;
            work[ti].data_mut()[i] = x0 - step;
            let minus = eval_sum(&work)?;
            work[ti].data_mut()[i] = x0;

            let numeric = (plus - minus) / (step + step);
            let exact = analytic[ti].data()[i];
            let denom = exact.abs().max(numeric.abs()).max(floor);
            let rel = (exact - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Convenience wrapper for a single-input function.
pub fn grad_check_single<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x), eps)
}
