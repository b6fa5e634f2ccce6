//! Named trainable arrays with parallel gradient slots.

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    /// Present iff the parameter is trainable; always the shape of `value`.
    pub grad: Option<Mat>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> usize {
        let grad = trainable.then(|| Mat::zeros(value.rows(), value.cols()));
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Mat {
        &self.params[idx].value
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    /// Overwrite a value in place; the shape must not change.
    pub fn set(&mut self, idx: usize, value: Mat) -> Result<()> {
        let p = &mut self.params[idx];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                format!("parameter {}", p.name),
                format!("{:?}", p.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.grad = trainable.then(|| Mat::zeros(p.value.rows(), p.value.cols()));
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    /// Record every parameter as a tape leaf. Trainable ones become gradient
    /// leaves; frozen ones become constants.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if p.grad.is_some() {
                    g.param(&p.value)
                } else {
                    g.constant_ref(&p.value)
                }
            })
            .collect()
    }

    /// Bind every parameter as a constant regardless of trainability.
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> Vec<NodeId> {
        self.params.iter().map(|p| g.constant_ref(&p.value)).collect()
    }

    /// Pull the gradients for `ids` out of a backward pass.
    pub fn collect_grads(&self, ids: &[NodeId], grads: &mut Gradients) -> Vec<Option<Mat>> {
        self.params
            .iter()
            .zip(ids)
            .map(|(p, &id)| {
                p.grad.as_ref()?;
                Some(grads.take(id).unwrap_or_else(|| Mat::zeros(p.value.rows(), p.value.cols())))
            })
            .collect()
    }

    /// Store gradients produced by [`collect_grads`](Self::collect_grads).
    pub fn store_grads(&mut self, grads: Vec<Option<Mat>>) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let (Some(slot), Some(g)) = (p.grad.as_mut(), g) {
                *slot = g;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    pub fn grads(&self) -> impl Iterator<Item = &Mat> {
        self.params.iter().filter_map(|p| p.grad.as_ref())
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Flattened view of all values, in declaration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_slot_iff_trainable() {
        let mut s = ParamStore::new();
        s.push("a", Mat::zeros(2, 3), true);
        s.push("b", Mat::zeros(1, 3), false);
        assert!(s.param(0).grad.is_some());
        assert!(s.param(1).grad.is_none());
        assert_eq!(s.param(0).grad.as_ref().unwrap().shape(), (2, 3));
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new();
        s.push("a", Mat::zeros(2, 2), true);
        assert!(s.set(0, Mat::zeros(2, 3)).is_err());
        assert!(s.set(0, Mat::identity(2)).is_ok());
    }
}
