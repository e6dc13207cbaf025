//! Named parameter collection with Adam state, plus the finite-difference
//! gradient checker used throughout the test suite.

use std::collections::BTreeMap;

use super::{Gradients, Matrix, NodeId, Tape};
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults follow the standard recommendation.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Named parameters plus per-parameter Adam moments and a step counter.
/// BTreeMap keeps iteration order deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    moment1: BTreeMap<String, Matrix>,
    moment2: BTreeMap<String, Matrix>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        self.moment1
            .insert(name.clone(), Matrix::zeros(value.rows(), value.cols()));
        self.moment2
            .insert(name.clone(), Matrix::zeros(value.rows(), value.cols()));
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total scalar entries across all parameters.
    pub fn entry_count(&self) -> usize {
        self.params.values().map(|m| m.data().len()).sum()
    }

    /// Order-sensitive fingerprint over every parameter tensor. Adam state
    /// is excluded: two stores agree iff their trainable values agree.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, value) in &self.params {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
            h ^= value.fingerprint();
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

/// One bias-corrected Adam update, applied in place. `grads` must carry
/// exactly the store's parameter names with matching shapes.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    lr: f64,
    adam: AdamParams,
) -> Result<()> {
    adam_step_by(store, grads, |_| lr, adam)
}

/// Adam update with a per-parameter learning rate, selected by name. The
/// alternating trainer uses this to drive GCN and detector groups at
/// different rates within one store.
pub fn adam_step_by(
    store: &mut ParamStore,
    grads: &Gradients,
    lr_for: impl Fn(&str) -> f64,
    adam: AdamParams,
) -> Result<()> {
    if grads.0.len() != store.params.len() {
        return Err(Error::contract(format!(
            "gradient keys ({}) do not match parameter keys ({})",
            grads.0.len(),
            store.params.len()
        )));
    }
    for name in grads.0.keys() {
        if !store.params.contains_key(name) {
            return Err(Error::contract(format!(
                "gradient for unknown parameter '{name}'"
            )));
        }
    }

    store.step += 1;
    let t = store.step as f64;
    let bias1 = 1.0 - adam.beta1.powf(t);
    let bias2 = 1.0 - adam.beta2.powf(t);

    for (name, theta) in store.params.iter_mut() {
        let g = &grads.0[name];
        if !g.same_shape(theta) {
            return Err(Error::contract(format!(
                "gradient shape {}x{} mismatches parameter '{name}' ({}x{})",
                g.rows(),
                g.cols(),
                theta.rows(),
                theta.cols()
            )));
        }
        let lr = lr_for(name);
        let m = self_entry(&mut store.moment1, name);
        let v = self_entry(&mut store.moment2, name);
        for ((th, (m_i, v_i)), &g_i) in theta
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            .zip(g.data())
        {
            *m_i = adam.beta1 * *m_i + (1.0 - adam.beta1) * g_i;
            *v_i = adam.beta2 * *v_i + (1.0 - adam.beta2) * g_i * g_i;
            let m_hat = *m_i / bias1;
            let v_hat = *v_i / bias2;
            *th -= lr * m_hat / (v_hat.sqrt() + adam.epsilon);
        }
    }
    Ok(())
}

fn self_entry<'a>(map: &'a mut BTreeMap<String, Matrix>, name: &str) -> &'a mut Matrix {
    map.get_mut(name).expect("moment buffer missing")
}

/// Compares `backward` against central finite differences on every
/// parameter entry. `f` must rebuild the same loss deterministically from
/// the store's current values. Returns the worst scale-floored relative
/// error max|ad - fd| / max(|ad|, |fd|, 1).
pub fn grad_check(
    mut f: impl FnMut(&mut Tape, &ParamStore) -> Result<NodeId>,
    store: &mut ParamStore,
    h: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss, store)?;

    let names: Vec<String> = store.names().cloned().collect();
    let mut worst = 0.0f64;
    for name in names {
        let entries = store.get(&name).unwrap().data().len();
        for e in 0..entries {
            let original = store.get(&name).unwrap().data()[e];

            store.get_mut(&name).unwrap().data_mut()[e] = original + h;
            let mut tp = Tape::new();
            let lp = f(&mut tp, store)?;
            let plus = tp.value(lp).get(0, 0);

            store.get_mut(&name).unwrap().data_mut()[e] = original - h;
            let mut tm = Tape::new();
            let lm = f(&mut tm, store)?;
            let minus = tm.value(lm).get(0, 0);

            store.get_mut(&name).unwrap().data_mut()[e] = original;

            let fd = (plus - minus) / (2.0 * h);
            let ad = grads.get(&name).unwrap().data()[e];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_vec(1, 1, vec![0.0]).unwrap());
        let mut grads = Gradients::default();
        grads.0.insert("w".into(), Matrix::from_vec(1, 1, vec![1.0]).unwrap());
        adam_step(&mut store, &grads, 0.1, AdamParams::default()).unwrap();
        // Bias correction at t=1 makes m_hat = g, v_hat = g^2: delta = -lr*g/(|g|+eps)
        let w = store.get("w").unwrap().get(0, 0);
        assert!((w + 0.1).abs() < 1e-8, "got {w}");
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let before = store.get("w").unwrap().clone();
        let mut grads = Gradients::default();
        grads.0.insert("w".into(), Matrix::zeros(2, 2));
        for _ in 0..5 {
            adam_step(&mut store, &grads, 0.1, AdamParams::default()).unwrap();
        }
        assert_eq!(store.get("w").unwrap(), &before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(theta) = theta^2 from theta = 1, lr = 0.05, 100 steps
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_vec(1, 1, vec![1.0]).unwrap());
        for _ in 0..100 {
            let theta = store.get("w").unwrap().get(0, 0);
            let mut grads = Gradients::default();
            grads
                .0
                .insert("w".into(), Matrix::from_vec(1, 1, vec![2.0 * theta]).unwrap());
            adam_step(&mut store, &grads, 0.05, AdamParams::default()).unwrap();
        }
        let theta = store.get("w").unwrap().get(0, 0);
        assert!(theta.abs() < 0.05, "theta = {theta}");
    }

    #[test]
    fn adam_shape_mismatch_is_contract_error() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::zeros(2, 2));
        let mut grads = Gradients::default();
        grads.0.insert("w".into(), Matrix::zeros(2, 3));
        assert!(adam_step(&mut store, &grads, 0.1, AdamParams::default()).is_err());
    }

    #[test]
    fn adam_missing_key_is_contract_error() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::zeros(1, 1));
        let grads = Gradients::default();
        assert!(adam_step(&mut store, &grads, 0.1, AdamParams::default()).is_err());
    }

    #[test]
    fn grad_check_linear_map_is_near_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("w", Matrix::standard_normal(3, 3, &mut rng));
        let x = Matrix::standard_normal(2, 3, &mut rng);
        let err = grad_check(
            |tape, store| {
                let w = tape.param(store, "w")?;
                let xc = tape.constant(x.clone());
                let p = tape.matmul(xc, w);
                Ok(tape.sum_all(p))
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-9, "linear grad check error {err}");
    }

    #[test]
    fn grad_check_composite_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert("w1", Matrix::standard_normal(4, 6, &mut rng));
        store.insert("w2", Matrix::standard_normal(6, 3, &mut rng));
        store.insert("w3", Matrix::standard_normal(3, 2, &mut rng));
        let x = Matrix::standard_normal(5, 4, &mut rng);
        let err = grad_check(
            |tape, store| {
                let w1 = tape.param(store, "w1")?;
                let w2 = tape.param(store, "w2")?;
                let w3 = tape.param(store, "w3")?;
                let xc = tape.constant(x.clone());
                let h1 = tape.matmul(xc, w1);
                let a1 = tape.relu(h1);
                let h2 = tape.matmul(a1, w2);
                let a2 = tape.relu(h2);
                let h3 = tape.matmul(a2, w3);
                let lse = tape.logsumexp_rows(h3);
                Ok(tape.mean_all(lse))
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "composite grad check error {err}");
    }
}
