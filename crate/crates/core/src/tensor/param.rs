use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Learning-rate group for the optimizer's differential rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    Encoder,
    Other,
}

/// A named tensor with its accumulated gradient. Non-trainable slots are
/// buffers (running statistics) that are saved and loaded but never updated
/// by the optimizer or the tape.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub group: LrGroup,
}

/// Flat arena holding every parameter and buffer of a model. Layer structs
/// keep `ParamId` handles; the store owns the data so a model is plain `Sync`
/// data that can be shared read-only across tracking threads.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
        group: LrGroup,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        let p = &mut self.params[id.0];
        if p.trainable {
            p.grad.add_assign(grad);
        }
    }

    /// Overwrite a slot's value, keeping shape. Used by the weights loader
    /// and by buffer updates from batch-norm forward passes.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::DimensionMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }
}
