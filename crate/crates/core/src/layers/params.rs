//! Named parameter storage shared by all layers.
//!
//! Layers allocate their tensors in a [`ParamSet`] and keep only [`ParamId`]
//! handles, so the optimizer, checkpointing, weight noise, and L2 decay can
//! all walk one flat collection. Before a forward pass the set is bound onto
//! a tape; layers read their variables out of the resulting [`Binding`].

use crate::error::{Error, Result};
use crate::tensor::{Element, Init, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a parameter is, which decides how training treats it: weight noise
/// and L2 decay hit `Weight` only; `Buffer` is never optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix or filter bank.
    Weight,
    Bias,
    /// Batch-norm scale (gamma).
    Gain,
    /// Batch-norm shift (beta).
    Shift,
    /// Non-trainable state (batch-norm running estimates).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct ParamSet<E> {
    params: Vec<Param<E>>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        shape: &[usize],
        scheme: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let value = Tensor::from_init_rng(shape, scheme, rng)?;
        Ok(self.add(name, kind, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<E>) {
        assert_eq!(self.params[id.0].value.shape(), value.shape());
        self.params[id.0].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<E>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Count of elements in trainable parameters (buffers excluded).
    pub fn trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.value.numel())
            .sum()
    }

    /// `(name, value)` pairs for every trainable parameter, in id order.
    /// This is the input format of the gradient-check harness.
    pub fn named_values(&self) -> Vec<(String, Tensor<E>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Put every parameter on the tape: trainables as differentiable leaves,
    /// buffers as constants.
    pub fn bind(&self, tape: &mut Tape<E>) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::Buffer => tape.constant(p.value.clone()),
                _ => tape.leaf(p.value.clone(), true),
            })
            .collect();
        Binding { vars }
    }

    /// As [`ParamSet::bind`], but weights enter the tape perturbed by fresh
    /// Gaussian noise. The leaf is the perturbed value, so gradients read
    /// back through the binding apply to the clean parameters unchanged
    /// (the perturbation is constant under differentiation).
    pub fn bind_noisy(&self, tape: &mut Tape<E>, std: f64, rng: &mut ChaCha8Rng) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::Buffer => tape.constant(p.value.clone()),
                ParamKind::Weight if std > 0.0 => {
                    let noisy = p.value.map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        v + E::from_f64(std * z)
                    });
                    tape.leaf(noisy, true)
                }
                _ => tape.leaf(p.value.clone(), true),
            })
            .collect();
        Binding { vars }
    }

    /// Validate that every parameter holds finite values.
    pub fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            if p.value.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", p.name)));
            }
        }
        Ok(())
    }
}

/// Tape variables for one bound [`ParamSet`], indexed by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wrap externally created leaves (the gradient-check harness owns its
    /// own leaf creation and passes the variables through here).
    pub fn from_vars(vars: &[Var]) -> Self {
        Binding { vars: vars.to_vec() }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
