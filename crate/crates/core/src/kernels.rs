//! Temporal kernels: the parameterized map applied at every TDNN position.
//!
//! A kernel turns a spliced input `[B, in_dim]` into `[B, width]`:
//!
//! - `Standard`: `σ(A₁x)`
//! - `Double`: `σ(A₂σ(A₁x))`
//! - `Resnet`: `h = σ(A₁x); y = A₃σ(A₂h) + h` (the last layer is linear and
//!   nothing is applied after the addition)
//! - `DeepStack(n)`: `n` chained sigmoid layers

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{affine_backward_acc, affine_forward, sigmoid_backward, sigmoid_in_place, AffineParams, Tensor};

/// Glorot range multiplier for layers followed by a sigmoid; offsets the
/// sigmoid slope of 1/4 at the origin.
pub const SIGMOID_INIT_GAIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Standard,
    Double,
    Resnet,
    DeepStack(usize),
}

impl KernelKind {
    /// Number of FC layers inside the kernel.
    pub fn layer_count(self) -> usize {
        match self {
            KernelKind::Standard => 1,
            KernelKind::Double => 2,
            KernelKind::Resnet => 3,
            KernelKind::DeepStack(n) => n,
        }
    }

    pub fn name(self) -> String {
        match self {
            KernelKind::Standard => "standard".into(),
            KernelKind::Double => "double".into(),
            KernelKind::Resnet => "resnet".into(),
            KernelKind::DeepStack(n) => format!("deep_stack({n})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub in_dim: usize,
    pub width: usize,
}

impl KernelConfig {
    pub fn new(kind: KernelKind, in_dim: usize, width: usize) -> Result<Self> {
        let cfg = Self { kind, in_dim, width };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.in_dim == 0 {
            return Err(Error::spec(format!(
                "kernel dims must be positive (in_dim={}, width={})",
                self.in_dim, self.width
            )));
        }
        if self.kind.layer_count() == 0 {
            return Err(Error::spec("deep_stack kernel needs at least one layer"));
        }
        Ok(())
    }

    /// `(in, out)` of every internal layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.kind.layer_count())
            .map(|i| (if i == 0 { self.in_dim } else { self.width }, self.width))
            .collect()
    }
}

/// Exact scalar count including biases.
pub fn kernel_param_count(cfg: &KernelConfig) -> usize {
    cfg.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub layers: Vec<AffineParams>,
}

impl KernelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &KernelConfig, rng: &mut R) -> Self {
        Self {
            layers: cfg
                .layer_dims()
                .into_iter()
                .enumerate()
                .map(|(l, (i, o))| {
                    let gain = if cfg.kind == KernelKind::Resnet && l == 2 { 1.0 } else { SIGMOID_INIT_GAIN };
                    AffineParams::glorot_scaled(i, o, gain, rng)
                })
                .collect(),
        }
    }

    pub fn zeros(cfg: &KernelConfig) -> Self {
        Self {
            layers: cfg
                .layer_dims()
                .into_iter()
                .map(|(i, o)| AffineParams::zeros(i, o))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(AffineParams::param_count).sum()
    }

    pub fn check(&self, cfg: &KernelConfig) -> Result<()> {
        let dims = cfg.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::dim(format!(
                "{} kernel expects {} layers, params have {}",
                cfg.kind.name(),
                dims.len(),
                self.layers.len()
            )));
        }
        for (l, (i, o)) in self.layers.iter().zip(dims) {
            if l.in_dim() != i || l.out_dim() != o {
                return Err(Error::dim(format!(
                    "kernel layer {:?} does not match expected [{o}, {i}]",
                    l.weight.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &KernelParams) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.scale(s);
        }
    }
}

/// Intermediates of one kernel forward pass.
#[derive(Debug, Clone)]
pub struct KernelCache {
    kind: KernelKind,
    input: Tensor,
    /// Post-sigmoid output of every sigmoid layer, in order.
    hidden: Vec<Tensor>,
}

impl KernelCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

pub fn kernel_forward(cfg: &KernelConfig, p: &KernelParams, x: &Tensor) -> Result<(Tensor, KernelCache)> {
    p.check(cfg)?;
    if x.rank() != 2 || x.cols() != cfg.in_dim {
        return Err(Error::dim(format!(
            "kernel input {:?} does not match in_dim {}",
            x.shape(),
            cfg.in_dim
        )));
    }
    let sigmoid_layers = match cfg.kind {
        KernelKind::Resnet => 2,
        k => k.layer_count(),
    };
    let mut hidden = Vec::with_capacity(sigmoid_layers);
    let mut h = x.clone();
    for layer in &p.layers[..sigmoid_layers] {
        h = affine_forward(&h, layer)?;
        sigmoid_in_place(&mut h);
        hidden.push(h.clone());
    }
    let y = if cfg.kind == KernelKind::Resnet {
        let mut y = affine_forward(&hidden[1], &p.layers[2])?;
        y.add_assign(&hidden[0])?;
        y
    } else {
        h
    };
    Ok((
        y,
        KernelCache {
            kind: cfg.kind,
            input: x.clone(),
            hidden,
        },
    ))
}

pub fn kernel_backward(
    cfg: &KernelConfig,
    p: &KernelParams,
    cache: &KernelCache,
    grad_y: &Tensor,
) -> Result<(Tensor, KernelParams)> {
    let mut grads = KernelParams::zeros(cfg);
    let gx = kernel_backward_acc(cfg, p, cache, grad_y, &mut grads, true)?.expect("grad_x requested");
    Ok((gx, grads))
}

/// Accumulates parameter gradients into `acc`; returns the input gradient if
/// requested.
pub fn kernel_backward_acc(
    cfg: &KernelConfig,
    p: &KernelParams,
    cache: &KernelCache,
    grad_y: &Tensor,
    acc: &mut KernelParams,
    want_grad_x: bool,
) -> Result<Option<Tensor>> {
    p.check(cfg)?;
    acc.check(cfg)?;
    let expected_hidden = match cfg.kind {
        KernelKind::Resnet => 2,
        k => k.layer_count(),
    };
    if cache.kind != cfg.kind || cache.hidden.len() != expected_hidden || cache.input.cols() != cfg.in_dim {
        return Err(Error::usage(format!(
            "kernel cache was produced by a different {} kernel",
            cache.kind.name()
        )));
    }
    let rows = cache.input.rows();
    if grad_y.rank() != 2 || grad_y.rows() != rows || grad_y.cols() != cfg.width {
        return Err(Error::usage(format!(
            "grad_y {:?} does not match cached batch [{rows}, {}]",
            grad_y.shape(),
            cfg.width
        )));
    }

    // Gradient w.r.t. the output of the last sigmoid layer.
    let mut g = match cfg.kind {
        KernelKind::Resnet => {
            let gh2 = affine_backward_acc(&cache.hidden[1], &p.layers[2], grad_y, &mut acc.layers[2], true)?
                .expect("requested");
            let dz2 = sigmoid_backward(&cache.hidden[1], &gh2)?;
            let mut gh1 = affine_backward_acc(&cache.hidden[0], &p.layers[1], &dz2, &mut acc.layers[1], true)?
                .expect("requested");
            // identity path
            gh1.add_assign(grad_y)?;
            let dz1 = sigmoid_backward(&cache.hidden[0], &gh1)?;
            return affine_backward_acc(&cache.input, &p.layers[0], &dz1, &mut acc.layers[0], want_grad_x);
        }
        _ => grad_y.clone(),
    };
    let n = cache.hidden.len();
    for i in (0..n).rev() {
        let dz = sigmoid_backward(&cache.hidden[i], &g)?;
        let input = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
        let need = i > 0 || want_grad_x;
        match affine_backward_acc(input, &p.layers[i], &dz, &mut acc.layers[i], need)? {
            Some(gi) => g = gi,
            None => return Ok(None),
        }
    }
    Ok(Some(g))
}
