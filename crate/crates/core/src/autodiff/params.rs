use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named value with a gradient accumulator of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// Owns every parameter of a model. Tapes read values from here and
/// `Tape::backward` accumulates gradients back into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replace a value. The new value must keep the parameter's shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("parameter `{}` has shape {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        for (acc, v) in p.grad.data_mut().iter_mut().zip(g) {
            *acc += v;
        }
    }

    /// Plain gradient descent on trainable parameters: `value -= lr * scale * grad`.
    pub fn sgd_step(&mut self, lr: f64, scale: f64) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let (value, grad) = (&mut p.value, &p.grad);
            for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * scale * g;
            }
        }
    }

    /// Total number of scalar values held by parameters matching `filter`.
    pub fn count(&self, filter: impl Fn(&Parameter) -> bool) -> usize {
        self.params.iter().filter(|p| filter(p)).map(|p| p.value.len()).sum()
    }
}
