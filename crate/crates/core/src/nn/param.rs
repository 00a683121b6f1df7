use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

/// A trainable tensor. Cloning yields a new, independent parameter.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    value: Rc<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)), value: Rc::new(value) }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Rc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) {
        assert_eq!(value.shape(), self.value.shape(), "parameter shape is fixed");
        self.value = Rc::new(value);
    }

    pub(crate) fn shared_value(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Param::new((*self.value).clone())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name, p)));
        out
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.named_params().into_iter().map(|(_, p)| p.id()).collect()
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value().numel()).sum()
    }

    /// SHA-256 over parameter names, shapes and exact bit patterns.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.named_params() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in p.value().shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value().to_le_bytes());
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl<M: Module> Module for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

impl Module for Param {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(prefix.to_string(), self);
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields.
macro_rules! module_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::nn::Param)) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::param::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::nn::Param)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::param::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use module_fields;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clones_are_distinct_parameters() {
        let p = Param::new(Tensor::ones(vec![2]));
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p.value(), q.value());
    }

    #[test]
    fn hash_sees_last_bit() {
        let mut p = Param::new(Tensor::ones(vec![3]));
        let before = p.param_hash();
        p.value_mut().data_mut()[1] += 1e-7;
        assert_ne!(before, p.param_hash());
    }
}
