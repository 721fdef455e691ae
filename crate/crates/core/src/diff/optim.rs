use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer state, aligned with a [`ParamStore`] by name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    names: Vec<String>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    /// Zeroed moments for every group in `store`.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let mut names = Vec::new();
        let mut first = Vec::new();
        for id in store.ids() {
            names.push(store.name(id).to_string());
            let (r, c) = store.value(id).shape();
            first.push(Tensor::zeros(r, c));
        }
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, names, second: first.clone(), first }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.first[i])
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.second[i])
    }
}

/// One Adam update from the stored gradients, which are cleared afterwards.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if store.len() != state.names.len() || store.ids().zip(&state.names).any(|(id, n)| store.name(id) != n) {
        return Err(Error::Contract("optimizer state is not aligned with the parameter store".into()));
    }
    for id in store.ids() {
        if !store.grad(id).all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter group '{}'", store.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let (value, grad) = store.value_and_grad_mut(id);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((p, g), m), v) in
            value.data_mut().iter_mut().zip(grad.data_mut().iter_mut()).zip(m.iter_mut()).zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * *g;
            *v = b2 * *v + (1.0 - b2) * *g * *g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= state.lr * mh / (vh.sqrt() + state.eps);
            *g = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::row(values.to_vec())).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: &[f64]) {
        let id = s.require("w").unwrap();
        let (_, grad) = s.value_and_grad_mut(id);
        grad.data_mut().copy_from_slice(g);
    }

    #[test]
    fn zero_gradient_leaves_everything_unchanged() {
        let mut s = store_with(&[0.3, -1.0]);
        let mut st = OptimizerState::new(&s, 0.1);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.value(s.require("w").unwrap()).data(), &[0.3, -1.0]);
        assert_eq!(st.first_moment("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(st.second_moment("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(&[2.0]);
        set_grad(&mut s, &[1.0]);
        let mut st = OptimizerState::new(&s, 0.1);
        adam_step(&mut s, &mut st).unwrap();
        // bias-corrected moments equal g and g², so the step is lr·g/(|g| + ε)
        let expected = 2.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert_abs_diff_eq!(s.value(s.require("w").unwrap()).item(), expected, epsilon = 1e-15);
        assert_eq!(s.grad(s.require("w").unwrap()).item(), 0.0);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn identical_parameters_get_identical_updates() {
        let mut s = store_with(&[0.5, 0.5]);
        let mut st = OptimizerState::new(&s, 0.01);
        for _ in 0..5 {
            set_grad(&mut s, &[0.7, 0.7]);
            adam_step(&mut s, &mut st).unwrap();
        }
        let v = s.value(s.require("w").unwrap()).data();
        assert_eq!(v[0].to_bits(), v[1].to_bits());
    }

    #[test]
    fn nan_gradient_names_the_group() {
        let mut s = store_with(&[1.0]);
        set_grad(&mut s, &[f64::NAN]);
        let mut st = OptimizerState::new(&s, 0.1);
        let err = adam_step(&mut s, &mut st).unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
        assert_eq!(s.value(s.require("w").unwrap()).item(), 1.0);
        assert_eq!(st.step(), 0);
    }
}
