use std::collections::HashMap;

use super::tensor::{Scalar, Tensor};
use super::MathError;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered table of named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<F>) -> Result<ParamId, MathError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(MathError::DuplicateParam(name));
        }
        tensor.requires_grad = true;
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<F>) -> Result<(), MathError> {
        let cur = &self.tensors[id.0];
        if cur.shape() != tensor.shape() {
            return Err(MathError::ShapeMismatch {
                op: "param_set",
                lhs: cur.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        let mut tensor = tensor;
        tensor.requires_grad = true;
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) -> Gradients<F> {
        Gradients {
            grads: self.tensors.iter().map(|t| vec![F::zero(); t.numel()]).collect(),
            shapes: self.tensors.iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients aligned with a [`ParamSet`]; parameters the loss does not reach
/// hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F = f32> {
    grads: Vec<Vec<F>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[F]) {
        for (a, &b) in self.grads[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.grads[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> Tensor<F> {
        Tensor::new(&self.shapes[id.0], self.grads[id.0].clone()).expect("gradient shape")
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> F {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<F>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: F) -> F {
        let norm = self.global_norm();
        if norm > max_norm && norm > F::zero() {
            let s = max_norm / norm;
            for g in &mut self.grads {
                for x in g.iter_mut() {
                    *x *= s;
                }
            }
        }
        norm
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Adds `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}
