//! Named parameter tensors and the adaptive-moment optimizer that updates them.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter matrices. Registration order is the
/// serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn register(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    /// Uniform `U(-1/√fan_in, 1/√fan_in)` initialisation.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..bound));
        self.register(name, value)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
        let value = Array2::from_shape_fn(shape, |_| rng.sample(dist));
        self.register(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.register(name, Array2::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.names[id.0].starts_with(prefix))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub(crate) m: Vec<Mat>,
    pub(crate) v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store
            .tensors
            .iter()
            .map(|t| Array2::zeros(t.dim()))
            .collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters absent from `grads` still decay.
    pub fn update(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Mat>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, param) in store.tensors.iter_mut().enumerate() {
            let grad = grads.get(&ParamId(i));
            if grad.is_none() && self.weight_decay == 0.0 {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let (b1, b2, lr, eps, wd) =
                (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
            ndarray::Zip::indexed(param.view_mut())
                .and(m.view_mut())
                .and(v.view_mut())
                .for_each(|ix, p, m, v| {
                    let g = grad.map_or(0.0, |g| g[ix]) + wd * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }

    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved moments; shapes must match `store`.
    pub fn from_state(
        store: &ParamStore,
        lr: f64,
        weight_decay: f64,
        step: u64,
        m: Vec<Mat>,
        v: Vec<Mat>,
    ) -> Option<Self> {
        let fits = |ms: &[Mat]| {
            ms.len() == store.len()
                && ms
                    .iter()
                    .zip(&store.tensors)
                    .all(|(a, b)| a.dim() == b.dim())
        };
        if !fits(&m) || !fits(&v) {
            return None;
        }
        let mut adam = Self::new(store, lr, weight_decay);
        adam.step = step;
        adam.m = m;
        adam.v = v;
        Some(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::default();
        let id = store.register("w", array![[1.0, -2.0]]);
        let mut adam = Adam::new(&store, 0.1, 0.0);
        let mut grads = HashMap::new();
        grads.insert(id, array![[3.0, -0.5]]);
        adam.update(&mut store, &grads);
        let w = store.get(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn groups_by_prefix() {
        let mut store = ParamStore::default();
        store.zeros("tsm.a", (1, 1));
        store.zeros("vlc.b", (1, 1));
        store.zeros("tsm.c", (2, 2));
        assert_eq!(store.group("tsm.").len(), 2);
        assert_eq!(store.num_scalars(), 6);
    }
}
