//! Parameters, forward sessions and the handful of layers the model is built from.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::TensorError;
use crate::graph::Var;
use crate::tensor::Tensor;

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Buffers (e.g. batch-norm running statistics) are saved but never optimized.
    pub trainable: bool,
}

/// Named, ordered storage for every parameter and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, value: Tensor, group: ParamGroup, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            group,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn add(&mut self, name: &str, value: Tensor, group: ParamGroup) -> ParamId {
        self.push(name, value, group, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, ParamGroup::Head, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces a value by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let id = self
            .id_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(TensorError::ParamShape {
                name: name.to_string(),
                expected: e.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        e.value = value;
        Ok(())
    }
}

/// One forward pass over a [`ParamStore`].
///
/// In training mode each parameter becomes a gradient-tracking leaf (created
/// once per session); otherwise parameters are constants and no graph is kept.
pub struct Session<'s> {
    store: &'s ParamStore,
    training: bool,
    leaves: RefCell<HashMap<ParamId, Var>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Self {
            store,
            training,
            leaves: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// A bound or tracked parameter is returned as is; otherwise a leaf in
    /// training mode and a constant outside it.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.leaves.borrow().get(&id) {
            return v.clone();
        }
        let entry = self.store.entry(id);
        if !(self.training && entry.trainable) {
            return Var::constant(entry.value.clone());
        }
        self.leaves
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| Var::leaf(entry.value.clone()))
            .clone()
    }

    /// Substitutes `value` for a parameter for the rest of the session, so a
    /// caller can differentiate a module with respect to its weights.
    pub fn bind(&self, id: ParamId, value: Var) {
        assert_eq!(
            value.shape(),
            self.store.get(id).shape(),
            "bound value must match the parameter shape"
        );
        self.leaves.borrow_mut().insert(id, value);
    }

    /// Tracks a parameter as a leaf even outside training mode (for gradient checks).
    pub fn track(&self, id: ParamId) -> Var {
        self.leaves
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| Var::leaf(self.store.get(id).clone()))
            .clone()
    }

    pub fn queue_buffer_update(&self, id: ParamId, value: Tensor) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Gradients of every parameter leaf touched in this session, ordered by id.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        let leaves = self.leaves.borrow();
        let mut out: Vec<(ParamId, Tensor)> = leaves
            .iter()
            .map(|(&id, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// `y = x · W + b` over the last axis. `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            uniform_init(&[d_in, d_out], d_in, rng),
            group,
        );
        let bias = store.add(
            &format!("{name}.bias"),
            uniform_init(&[d_out], d_in, rng),
            group,
        );
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Var {
        x.matmul(&s.param(self.weight)).add(&s.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            uniform_init(&[c_out, c_in, kernel, kernel], fan_in, rng),
            group,
        );
        let bias = bias.then(|| {
            store.add(
                &format!("{name}.bias"),
                uniform_init(&[c_out], fan_in, rng),
                group,
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Var {
        let b = self.bias.map(|id| s.param(id));
        x.conv2d(&s.param(self.weight), b.as_ref(), self.stride, self.pad)
    }
}

/// Batch normalization over `[B, C, H, W]`: batch statistics while training,
/// running statistics otherwise.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[channels]), group),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]), group),
            running_mean: store
                .add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store
                .add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Var {
        let c = x.shape()[1];
        let cshape = [1, c, 1, 1];
        let gamma = s.param(self.gamma).reshape(&cshape);
        let beta = s.param(self.beta).reshape(&cshape);
        let normalized = if s.training() {
            let mean = x.mean_axes(&[0, 2, 3]);
            let centered = x.sub(&mean);
            let var = centered.square().mean_axes(&[0, 2, 3]);
            let n = (x.value().numel() / c) as f64;
            let m = self.momentum;
            let old_mean = s.store().get(self.running_mean);
            let old_var = s.store().get(self.running_var);
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let new_mean = Tensor::from_vec(
                &[c],
                (0..c)
                    .map(|i| (1.0 - m) * old_mean.data()[i] + m * mean.value().data()[i])
                    .collect(),
            );
            let new_var = Tensor::from_vec(
                &[c],
                (0..c)
                    .map(|i| (1.0 - m) * old_var.data()[i] + m * var.value().data()[i] * unbiased)
                    .collect(),
            );
            s.queue_buffer_update(self.running_mean, new_mean);
            s.queue_buffer_update(self.running_var, new_var);
            centered.div(&var.add_scalar(self.eps).sqrt())
        } else {
            let mean = s.param(self.running_mean).reshape(&cshape);
            let var = s.param(self.running_var).reshape(&cshape);
            x.sub(&mean).div(&var.add_scalar(self.eps).sqrt())
        };
        normalized.mul(&gamma).add(&beta)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[dim]), group),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), group),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Var {
        x.layer_norm(&s.param(self.gamma), &s.param(self.beta), self.eps)
    }
}
