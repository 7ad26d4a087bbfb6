use crate::error::{Error, Result};
use crate::params::ParameterStore;

/// Adam hyper-parameters and step counter. The per-parameter moment buffers
/// live next to each parameter in the [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    /// Added to `sqrt(v_hat)` in the update denominator.
    pub epsilon_hat: f64,
    pub step_count: u64,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-4,
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. Gradients are checked before anything is modified, so a
/// non-finite gradient leaves the store and state untouched.
pub fn adam_step(store: &mut ParameterStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if let Some(bad) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient in parameter {}",
            bad.name
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon_hat);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let (inv1, inv2) = (1.0 / correction1, 1.0 / correction2);
    for p in store.iter_mut() {
        let values = p.value.data_mut();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        let g = p.grad.data();
        for (((w, m), v), &g) in values.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m * inv1) / ((*v * inv2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[f64], grads: &[f64]) -> ParameterStore {
        let mut store = ParameterStore::new();
        let id = store
            .insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        store
            .accumulate(id, &Tensor::new(vec![grads.len()], grads.to_vec()).unwrap(), 1.0)
            .unwrap();
        store
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut store = store_with(&[0.3, -1.2], &[0.0, 0.0]);
        let before = store.clone();
        let mut state = OptimizerState::default();
        for _ in 0..5 {
            adam_step(&mut store, &mut state, 1e-3).unwrap();
        }
        assert_eq!(state.step_count, 5);
        let ids: Vec<_> = store.ids().collect();
        assert_eq!(store.value(ids[0]), before.value(ids[0]));
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g and v_hat = g^2 after bias correction, so the update is
        // -lr * g / (|g| + eps).
        let grads = [2.0, -0.5, 1e-4, 30.0];
        let mut store = store_with(&[0.0; 4], &grads);
        let mut state = OptimizerState::default();
        let lr = 1e-2;
        adam_step(&mut store, &mut state, lr).unwrap();
        let id = store.ids().next().unwrap();
        for (x, g) in store.value(id).data().iter().zip(grads) {
            let expect = -lr * g / (g.abs() + 1e-4);
            assert!((x - expect).abs() < 1e-15, "{x} vs {expect}");
        }
    }

    #[test]
    fn two_unit_steps_decrease_monotonically() {
        let mut store = store_with(&[1.0], &[1.0]);
        let mut state = OptimizerState::default();
        let id = store.ids().next().unwrap();
        let x0 = store.value(id).data()[0];
        adam_step(&mut store, &mut state, 1e-4).unwrap();
        let x1 = store.value(id).data()[0];
        adam_step(&mut store, &mut state, 1e-4).unwrap();
        let x2 = store.value(id).data()[0];
        assert!(x0 > x1 && x1 > x2);
        // Both steps see m_hat = v_hat = 1 with a constant gradient.
        let step = 1e-4 / (1.0 + 1e-4);
        assert!((x1 - (1.0 - step)).abs() < 1e-15);
        assert!((x2 - (1.0 - 2.0 * step)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = store_with(&[1.0], &[f64::NAN]);
        let mut state = OptimizerState::default();
        let err = adam_step(&mut store, &mut state, 1e-4).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(state.step_count, 0);
    }
}
