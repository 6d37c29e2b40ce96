use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction. Moments and the step counter are kept per
/// parameter so a parameter that sits out some steps (the ID classifier on
/// reconstruction-only epochs) resumes with its own bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: Vec::new(),
        }
    }

    /// Number of updates applied to `id` so far.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.slots
            .get(id.0)
            .and_then(|s| s.as_ref())
            .map_or(0, |s| s.t)
    }

    /// One update of a single parameter tensor.
    pub fn step_param(&mut self, id: ParamId, value: &mut [f64], grad: &[f64]) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        let slot = self.slots[id.0].get_or_insert_with(|| Moments {
            m: vec![0.0; value.len()],
            v: vec![0.0; value.len()],
            t: 0,
        });
        assert_eq!(slot.m.len(), value.len(), "adam state shape mismatch");
        slot.t += 1;
        let c1 = 1.0 - self.beta1.powi(slot.t as i32);
        let c2 = 1.0 - self.beta2.powi(slot.t as i32);
        for ((p, g), (m, v)) in value
            .iter_mut()
            .zip(grad)
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Updates every parameter selected by `filter` from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore, filter: impl Fn(ParamId) -> bool) {
        let ids: Vec<ParamId> = store.ids().filter(|&id| filter(id)).collect();
        for id in ids {
            let (value, grad) = store.value_and_grad(id);
            self.step_param(id, value, grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::Tensor;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::new(1e-4);
        let mut p = vec![0.5, -1.0];
        adam.step_param(ParamId(0), &mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(adam.steps(ParamId(0)), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut adam = Adam::new(1e-3);
        let mut p = vec![0.0, 0.0, 0.0];
        adam.step_param(ParamId(0), &mut p, &[3.0, -0.02, 250.0]);
        // m_hat = g, v_hat = g^2 at t = 1
        for (v, g) in p.iter().zip([3.0f64, -0.02, 250.0]) {
            let expect = -1e-3 * g / (g.abs() + 1e-8);
            assert_relative_eq!(*v, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let lr = 1e-4;
        let mut adam = Adam::new(lr);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..100 {
            let before = p[0];
            adam.step_param(ParamId(0), &mut p, &[7.5]);
            last = before - p[0];
        }
        // with a constant gradient the bias-corrected moments are exact:
        // m_hat = g, v_hat = g^2, so every step is lr * g / (|g| + eps)
        assert_relative_eq!(last, lr * 7.5 / (7.5 + 1e-8), max_relative = 1e-9);
    }

    #[test]
    fn step_honours_filter() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(vec![2], 1.0));
        let b = store.add("b", Tensor::filled(vec![2], 1.0));
        store.grad_mut(a).copy_from_slice(&[1.0, 1.0]);
        store.grad_mut(b).copy_from_slice(&[1.0, 1.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, |id| id == a);
        assert!(store.value(a).data()[0] < 1.0);
        assert_eq!(store.value(b).data(), &[1.0, 1.0]);
        assert_eq!(adam.steps(b), 0);
    }
}
