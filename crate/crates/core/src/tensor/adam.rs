//! Named parameter storage, gradient maps, and the Adam optimizer.

use std::collections::HashMap;

use super::tape::Var;
use super::{Result, Scalar, Tensor, TensorError};

/// Index of a parameter in a [`ParamStore`]. Stable for the store's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Insertion-ordered collection of named parameter tensors. Iteration is
/// always by insertion index, which keeps serialization deterministic.
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name_of(&self, id: ParamId) -> &str {
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

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Gradients produced by one backward pass, addressable by leaf [`Var`] and,
/// when the leaf was registered as a parameter, by [`ParamId`].
#[derive(Debug)]
pub struct Gradients<T> {
    by_var: HashMap<Var, Tensor<T>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Gradients {
            by_var: HashMap::with_capacity(n.min(64)),
            by_param: HashMap::new(),
        }
    }

    pub(crate) fn set(&mut self, var: Var, param: Option<ParamId>, grad: Tensor<T>) {
        if let Some(p) = param {
            self.by_param.insert(p, grad.clone());
        }
        self.by_var.insert(var, grad);
    }

    pub fn of_var(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&var)
    }

    pub fn of_param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn param_count(&self) -> usize {
        self.by_param.len()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(learning_rate: T) -> Self {
        AdamConfig {
            learning_rate,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            epsilon: T::from_f64_lossy(1e-8),
        }
    }
}

/// Optimizer state for one parameter group: step counter plus first and
/// second moment estimates matching each parameter's shape.
pub struct AdamState<T> {
    pub config: AdamConfig<T>,
    pub step: u64,
    params: Vec<ParamId>,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>, config: AdamConfig<T>) -> Self {
        let first_moment = params
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect();
        let second_moment = params
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect();
        AdamState {
            config,
            step: 0,
            params,
            first_moment,
            second_moment,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn set_learning_rate(&mut self, lr: T) {
        self.config.learning_rate = lr;
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn moments_mut(&mut self) -> (&mut Vec<Tensor<T>>, &mut Vec<Tensor<T>>) {
        (&mut self.first_moment, &mut self.second_moment)
    }
}

/// One Adam update with bias correction. Parameters without a gradient this
/// step are treated as having a zero gradient (moments still decay).
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let c = state.config;
    let bias1 = T::one() - c.beta1.powi(t as i32);
    let bias2 = T::one() - c.beta2.powi(t as i32);

    for (slot, &id) in state.params.iter().enumerate() {
        let param = store.get_mut(id);
        let m = &mut state.first_moment[slot];
        let v = &mut state.second_moment[slot];
        if m.shape() != param.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        if let Some(g) = grads.of_param(id) {
            if g.shape() != param.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = param.data_mut();
            for i in 0..pd.len() {
                md[i] = c.beta1 * md[i] + (T::one() - c.beta1) * gd[i];
                vd[i] = c.beta2 * vd[i] + (T::one() - c.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] = pd[i] - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        } else {
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = param.data_mut();
            for i in 0..pd.len() {
                md[i] = c.beta1 * md[i];
                vd[i] = c.beta2 * vd[i];
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] = pd[i] - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
    Ok(())
}
