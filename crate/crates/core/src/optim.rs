//! First-order optimizers over a [`ParamStore`].

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn check_grads(store: &ParamStore, grads: &Gradients) -> Result<()> {
    for (id, g) in grads.params() {
        if id.0 >= store.len() {
            return Err(Error::dim(format!("gradient for unknown parameter {}", id.0)));
        }
        store.get(id).expect_shape(g.shape(), store.name(id))?;
        if !g.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {}", store.name(id))));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update. Parameters without a gradient are left as
/// they are. Non-finite gradients abort the step before anything changes.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::dim("optimizer state does not match the parameter store"));
    }
    check_grads(store, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (id, g) in grads.params() {
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain stochastic gradient descent.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
    check_grads(store, grads)?;
    for (id, g) in grads.params() {
        let p = store.get_mut(id).data_mut();
        for (pk, gk) in p.iter_mut().zip(g.data()) {
            *pk -= lr * gk;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn quad_grads(store: &ParamStore) -> Gradients {
        // loss = sum(w^2)
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let sq = tape.mul(vars[0], vars[0]).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap()
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[0.5, -1.5]));
        let mut state = AdamState::new(&store, 0.1);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let z = tape.scale(vars[0], 0.0).unwrap();
        let l = tape.sum(z).unwrap();
        let g = tape.backward(l).unwrap();
        drop(tape);
        adam_step(&mut store, &g, &mut state).unwrap();
        assert_eq!(store.get(id).data(), &[0.5, -1.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut state = AdamState::new(&store, 0.01);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let l = tape.scale(vars[0], 3.0).unwrap();
            let g = tape.backward(l).unwrap();
            drop(tape);
            adam_step(&mut store, &g, &mut state).unwrap();
        }
        assert!(store.get(id).item() < -0.4);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // Scalar simulation of the same recursion as the oracle.
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut oracle = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            oracle.push(w);
        }

        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut state = AdamState::new(&store, 0.1);
        let mut prev = 1.0f64;
        for want in oracle {
            let g = quad_grads(&store);
            adam_step(&mut store, &g, &mut state).unwrap();
            let w = store.get(id).item();
            assert!(w.abs() < prev.abs());
            assert!((w - want).abs() < 1e-15);
            prev = w;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_side_effects() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1e-300));
        let mut state = AdamState::new(&store, 0.1);
        // forward stays finite (1e100) but d/dw = 1e400 overflows
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let a = tape.scale(vars[0], 1e200).unwrap();
        let l = tape.scale(a, 1e200).unwrap();
        let g = tape.backward(l).unwrap();
        drop(tape);
        assert!(matches!(adam_step(&mut store, &g, &mut state), Err(Error::Numeric(_))));
        assert_eq!(store.get(id).item(), 1e-300);
        assert_eq!(state.step_count(), 0);
    }
}
