//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates the forward function at perturbed inputs, so it
//! shares no code path with [`Tape::backward`]. Used by the test suites and
//! the acceptance gate.

use crate::tensor::{Tape, Tensor, Var};

/// Step size for central differences at f64 precision.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between an autodiff gradient and its finite-difference
/// estimate: |a - b| / max(|a|, |b|, floor).
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// for every element of every input. `f` must build a scalar loss from the
/// leaves it is given, in order.
pub fn check<F>(inputs: &[Tensor], f: F, floor: f64) -> CheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |tensors: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        let loss_val = tape.value(loss)[0];
        let grads = tape.backward(loss).expect("backward");
        let gs = vars
            .iter()
            .map(|v| grads.get(*v).map(|g| g.to_vec()).unwrap_or_default())
            .collect();
        (loss_val, gs)
    };

    let tensors: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let (_, analytic) = run(&tensors);

    let eval_loss = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss)[0]
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let mut plus = tensors.clone();
            plus[ti].data_mut()[ei] += FD_STEP;
            let mut minus = tensors.clone();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let fd = (eval_loss(&plus) - eval_loss(&minus)) / (2.0 * FD_STEP);
            let rel = relative_error(analytic[ti][ei], fd, floor);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    CheckReport {
        max_rel_err: max_rel,
        checked,
    }
}

/// Like [`check`] but probes only a deterministic subset of coordinates per
/// input, for functions with many parameters.
pub fn check_sampled<F>(inputs: &[Tensor], f: F, floor: f64, per_input: usize, seed: u64) -> CheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |tensors: &[Tensor]| -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).expect("backward");
        vars.iter()
            .map(|v| grads.get(*v).map(|g| g.to_vec()).unwrap_or_default())
            .collect()
    };
    let eval_loss = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss)[0]
    };

    let tensors: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let analytic = run(&tensors);
    let mut rng = crate::rng::Rng::from_seed(seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        for _ in 0..per_input.min(n) {
            let ei = rng.below(n);
            let mut plus = tensors.clone();
            plus[ti].data_mut()[ei] += FD_STEP;
            let mut minus = tensors.clone();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let fd = (eval_loss(&plus) - eval_loss(&minus)) / (2.0 * FD_STEP);
            let rel = relative_error(analytic[ti][ei], fd, floor);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    CheckReport {
        max_rel_err: max_rel,
        checked,
    }
}
