//! Adam with bias correction and a step learning-rate schedule.

use cloud_transform::{Error, ParamGrads, ParamStore, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Multiplies the base rate by `factor` every `interval` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub factor: f64,
    pub interval: usize,
}

impl StepDecay {
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        if self.interval == 0 {
            return base;
        }
        base * self.factor.powi((step / self.interval) as i32)
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect(),
            v: store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect(),
        }
    }
}

/// One Adam update of every trainable parameter at learning rate `lr`.
/// Parameters the loss did not reach see a zero gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for &id in &ids {
        if let Some(g) = grads.get(id) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "adam_step",
                    format!("non-finite gradient in {} at entry {i}", store.get(id).name),
                ));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in ids {
        let k = id.index();
        let g = grads.get(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, p) in store.value_mut(id).data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cloud_transform::{Forward, Tensor};

    fn scalar_problem(x0: f64, coeff: f64) -> (ParamStore, cloud_transform::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(&[1], vec![x0]).unwrap(), true);
        let _ = coeff;
        (store, id)
    }

    /// Gradients of `coeff * x` (constant) for the store's only parameter.
    fn linear_grads(
        store: &mut ParamStore,
        id: cloud_transform::ParamId,
        coeff: f64,
    ) -> ParamGrads {
        let mut fwd = Forward::new(store, true);
        let x = fwd.param(id);
        let y = fwd.tape.scale(x, coeff).unwrap();
        let l = fwd.tape.sum(y).unwrap();
        fwd.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = scalar_problem(1.5, 0.0);
        let mut st = AdamState::new(&store);
        let g = linear_grads(&mut store, id, 0.0);
        adam_step(&mut store, &g, &mut st, &AdamConfig::default(), 1e-3).unwrap();
        assert_eq!(store.value(id).data(), &[1.5]);
    }

    #[test]
    fn hand_trace_two_steps() {
        let (mut store, id) = scalar_problem(1.0, 2.0);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&store);
        let g = linear_grads(&mut store, id, 2.0);
        adam_step(&mut store, &g, &mut st, &cfg, 0.1).unwrap();
        // step 1: mhat = 2, vhat = 4 → x = 1 - 0.1 * 2 / (2 + 1e-8)
        let x1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((store.value(id).data()[0] - x1).abs() < 1e-15);
        let g = linear_grads(&mut store, id, 2.0);
        adam_step(&mut store, &g, &mut st, &cfg, 0.1).unwrap();
        let m = 0.9 * 0.2 + 0.1 * 2.0;
        let v = 0.999 * 0.004 + 0.001 * 4.0;
        let x2 = x1 - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((store.value(id).data()[0] - x2).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let (mut store, id) = scalar_problem(0.0, 3.0);
        let mut st = AdamState::new(&store);
        let mut last = 0.0;
        let mut step = 0.0;
        for _ in 0..2000 {
            let g = linear_grads(&mut store, id, 3.0);
            adam_step(&mut store, &g, &mut st, &AdamConfig::default(), 0.01).unwrap();
            let x = store.value(id).data()[0];
            step = last - x;
            last = x;
        }
        assert!((step - 0.01).abs() < 1e-9, "{step}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, id) = scalar_problem(0.0, f64::NAN);
        let mut st = AdamState::new(&store);
        let g = linear_grads(&mut store, id, f64::NAN);
        let err = adam_step(&mut store, &g, &mut st, &AdamConfig::default(), 0.01).unwrap_err();
        assert!(err.to_string().contains('x'));
    }

    #[test]
    fn step_decay_halves() {
        let s = StepDecay {
            factor: 0.5,
            interval: 10,
        };
        assert_eq!(s.lr_at(1.0, 9), 1.0);
        assert_eq!(s.lr_at(1.0, 10), 0.5);
        assert_eq!(s.lr_at(1.0, 25), 0.25);
    }
}
