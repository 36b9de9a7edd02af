//! Named views over parameter tensors.

use crate::numerics::{AffineParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a Tensor,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor,
}

/// Anything that exposes its parameters as an ordered list of named tensors.
/// The order is stable and is the serialization order of checkpoints.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>);

    fn param_refs(&self) -> Vec<ParamRef<'_>> {
        let mut v = Vec::new();
        self.visit("", &mut v);
        v
    }

    fn param_muts(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = Vec::new();
        self.visit_mut("", &mut v);
        v
    }

    fn scalar_count(&self) -> usize {
        self.param_refs().iter().map(|p| p.tensor.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameterized for AffineParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            tensor: &self.weight,
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            tensor: &self.bias,
        });
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(ParamMut {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            tensor: &mut self.weight,
        });
        out.push(ParamMut {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            tensor: &mut self.bias,
        });
    }
}

impl Parameterized for crate::kernels::KernelParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), out);
        }
    }
}

/// Pushes a single tensor.
pub(crate) fn push<'a>(out: &mut Vec<ParamRef<'a>>, prefix: &str, name: &str, kind: ParamKind, t: &'a Tensor) {
    out.push(ParamRef {
        name: join(prefix, name),
        kind,
        tensor: t,
    });
}

pub(crate) fn push_mut<'a>(
    out: &mut Vec<ParamMut<'a>>,
    prefix: &str,
    name: &str,
    kind: ParamKind,
    t: &'a mut Tensor,
) {
    out.push(ParamMut {
        name: join(prefix, name),
        kind,
        tensor: t,
    });
}
