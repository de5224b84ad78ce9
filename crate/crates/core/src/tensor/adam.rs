//! Adam with L2-style weight decay and a step learning-rate schedule
//! (one-tenth every 15 epochs).

use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment slots sized to match each parameter.
    pub fn new(params: &[Tensor], learning_rate: f64, weight_decay: f64) -> Self {
        AdamState {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Learning rate after the step schedule: one tenth per `drop_every`
/// epochs elapsed (15 in the published setup).
pub fn scheduled_lr(initial_lr: f64, epoch: usize, drop_every: usize) -> f64 {
    initial_lr * 0.1f64.powi((epoch / drop_every.max(1)) as i32)
}

/// One Adam update over all parameters. Weight decay enters as an additive
/// L2 gradient term. `lr` is the scheduled rate for the current epoch.
/// NaN gradients abort with the offending parameter named.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[&[f64]],
    names: &[&str],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.first_moment.len());
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (pi, param) in params.iter_mut().enumerate() {
        let g = grads[pi];
        if let Some(bad) = g.iter().position(|v| v.is_nan()) {
            return Err(TensorError::NanGradient {
                name: names.get(pi).copied().unwrap_or("?").to_string(),
                index: bad,
            });
        }
        let m = &mut state.first_moment[pi];
        let v = &mut state.second_moment[pi];
        let wd = state.weight_decay;
        let data = param.data_mut();
        for i in 0..data.len() {
            let gi = g[i] + wd * data[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_zero_decay_leave_params_unchanged() {
        let mut params = vec![Tensor::new(vec![1.0, -2.0, 0.5], vec![3]).with_grad()];
        let mut st = AdamState::new(&params, 1e-4, 0.0);
        let g = vec![0.0; 3];
        adam_step(&mut params, &[&g], &["p"], &mut st, 1e-4).unwrap();
        assert_eq!(&**params[0].data, &[1.0, -2.0, 0.5]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn single_scalar_step_matches_hand_computation() {
        // theta=0, g=1, lr=1e-4, no decay:
        //   m = 0.1, v = 0.001, mhat = 1, vhat = 1
        //   theta' = -lr * 1 / (sqrt(1) + 1e-8)
        let mut params = vec![Tensor::new(vec![0.0], vec![1]).with_grad()];
        let mut st = AdamState::new(&params, 1e-4, 0.0);
        adam_step(&mut params, &[&[1.0]], &["p"], &mut st, 1e-4).unwrap();
        let expect = -1e-4 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((params[0].data[0] - expect).abs() < 1e-18);
        assert!((st.first_moment[0][0] - 0.1).abs() < 1e-15);
        assert!((st.second_moment[0][0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn schedule_drops_tenfold_every_15_epochs() {
        assert_eq!(scheduled_lr(1e-4, 0, 15), 1e-4);
        assert_eq!(scheduled_lr(1e-4, 14, 15), 1e-4);
        assert!((scheduled_lr(1e-4, 15, 15) - 1e-5).abs() < 1e-20);
        assert!((scheduled_lr(1e-4, 29, 15) - 1e-5).abs() < 1e-20);
        assert!((scheduled_lr(1e-4, 30, 15) - 1e-6).abs() < 1e-21);
    }

    #[test]
    fn nan_gradient_aborts_with_diagnostic() {
        let mut params = vec![Tensor::new(vec![0.0], vec![1]).with_grad()];
        let mut st = AdamState::new(&params, 1e-4, 0.0);
        let err = adam_step(&mut params, &[&[f64::NAN]], &["stem.w"], &mut st, 1e-4).unwrap_err();
        assert!(err.to_string().contains("stem.w"));
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut params = vec![Tensor::new(vec![5.0], vec![1]).with_grad()];
        let mut st = AdamState::new(&params, 1e-2, 1e-1);
        adam_step(&mut params, &[&[0.0]], &["p"], &mut st, 1e-2).unwrap();
        assert!(params[0].data[0] < 5.0);
    }
}
