//! Named parameter registry. Modules register their weights here once; each
//! forward pass binds the current values onto a fresh tape, and the
//! optimizer updates the master copies from the tape's gradients.

use rand::Rng;

use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), trainable: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    /// Xavier-uniform weight matrix `[rows, cols]`.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::new(vec![rows, cols], data).unwrap(), true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn add_ones(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::new(vec![len], vec![1.0; len]).unwrap(), true)
    }

    /// Uniform(-0.1, 0.1) embedding rows.
    pub fn add_embedding(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> ParamId {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-0.1..0.1)).collect();
        self.add(name, Tensor::new(vec![rows, cols], data).unwrap(), trainable)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "parameter shape is fixed");
        self.values[id.0] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor, bool)> {
        (0..self.values.len())
            .map(move |i| (ParamId(i), self.names[i].as_str(), &self.values[i], self.trainable[i]))
    }

    /// Total number of scalar parameters (trainable only).
    pub fn scalar_count(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.numel())
            .sum()
    }

    /// Push every parameter onto the tape as a leaf; index the result by
    /// [`ParamId`] to get the bound [`TensorId`].
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let ids = self
            .values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| tape.leaf(v.clone(), t))
            .collect();
        ParamBinding { ids }
    }
}

pub struct ParamBinding {
    ids: Vec<TensorId>,
}

impl ParamBinding {
    pub fn get(&self, id: ParamId) -> TensorId {
        self.ids[id.0]
    }
}

impl std::ops::Index<ParamId> for ParamBinding {
    type Output = TensorId;

    fn index(&self, id: ParamId) -> &TensorId {
        &self.ids[id.0]
    }
}
