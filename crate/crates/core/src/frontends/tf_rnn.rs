//! TF-RNN: one σ-recurrence fed by both its time and frequency neighbours,
//! `h[t,k] = σ(W·x[t,k] + V_T·h[t-1,k] + V_F·h[t,k-1] + b)`.

use rand::Rng;

use super::grid::{Grid, GridRnnConfig};
use super::{add_bias, bias_back, glorot, lin_acc, lin_back, sigmoid_grad_in_place};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid_in_place, Tensor};
use crate::params::{push, push_mut, ParamKind, ParamMut, ParamRef, Parameterized};

pub(crate) fn tf_param_count(cfg: &GridRnnConfig, context: usize) -> usize {
    let (s, i) = (cfg.sigma_width, cfg.cell_input_dim(context));
    s * i + 2 * s * s + s
}

/// `w: [σ, in]`, `v_t: [σ, σ]`, `v_f: [σ, σ]`, `b: [σ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfRnnParams {
    pub w: Tensor,
    pub v_t: Tensor,
    pub v_f: Tensor,
    pub b: Tensor,
}

impl TfRnnParams {
    pub fn init<R: Rng + ?Sized>(cfg: &GridRnnConfig, context: usize, rng: &mut R) -> Self {
        let (s, i) = (cfg.sigma_width, cfg.cell_input_dim(context));
        Self {
            w: glorot(s, i, rng),
            v_t: glorot(s, s, rng),
            v_f: glorot(s, s, rng),
            b: Tensor::zeros(&[s]),
        }
    }

    pub fn zeros(cfg: &GridRnnConfig, context: usize) -> Self {
        let (s, i) = (cfg.sigma_width, cfg.cell_input_dim(context));
        Self {
            w: Tensor::zeros(&[s, i]),
            v_t: Tensor::zeros(&[s, s]),
            v_f: Tensor::zeros(&[s, s]),
            b: Tensor::zeros(&[s]),
        }
    }

    fn check(&self, cfg: &GridRnnConfig, in_dim: usize) -> Result<()> {
        let s = cfg.sigma_width;
        if self.w.shape() != [s, in_dim] || self.v_t.shape() != [s, s] || self.v_f.shape() != [s, s] || self.b.shape() != [s] {
            return Err(Error::dim(format!("TF-RNN params do not match sigma {s}, input {in_dim}")));
        }
        Ok(())
    }
}

impl Parameterized for TfRnnParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push(out, prefix, "w", ParamKind::Weight, &self.w);
        push(out, prefix, "v_t", ParamKind::Weight, &self.v_t);
        push(out, prefix, "v_f", ParamKind::Weight, &self.v_f);
        push(out, prefix, "b", ParamKind::Bias, &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_mut(out, prefix, "w", ParamKind::Weight, &mut self.w);
        push_mut(out, prefix, "v_t", ParamKind::Weight, &mut self.v_t);
        push_mut(out, prefix, "v_f", ParamKind::Weight, &mut self.v_f);
        push_mut(out, prefix, "b", ParamKind::Bias, &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct TfRnnCache {
    input: Grid,
    h: Vec<Tensor>,
}

pub(crate) fn forward_cached(grid: &Grid, cfg: &GridRnnConfig, p: &TfRnnParams) -> Result<(Vec<Tensor>, TfRnnCache)> {
    p.check(cfg, grid.cell_dim())?;
    let (tn, kn, b) = (grid.n_time(), grid.n_freq(), grid.batch());
    let mut h: Vec<Tensor> = Vec::with_capacity(tn * kn);
    for t in 0..tn {
        for k in 0..kn {
            let idx = t * kn + k;
            let mut a = Tensor::zeros(&[b, cfg.sigma_width]);
            add_bias(&mut a, &p.b);
            lin_acc(grid.cell(t, k), &p.w, &mut a);
            if t > 0 {
                lin_acc(&h[idx - kn], &p.v_t, &mut a);
            }
            if k > 0 {
                lin_acc(&h[idx - 1], &p.v_f, &mut a);
            }
            sigmoid_in_place(&mut a);
            h.push(a);
        }
    }
    let out = (0..tn)
        .map(|t| Tensor::concat_cols(&h[t * kn..(t + 1) * kn].iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, TfRnnCache { input: grid.clone(), h }))
}

/// Per-time-bin outputs `[B, K·σ]`.
pub fn tf_rnn_forward(grid: &Grid, cfg: &GridRnnConfig, p: &TfRnnParams) -> Result<Vec<Tensor>> {
    Ok(forward_cached(grid, cfg, p)?.0)
}

pub(crate) fn backward_acc(
    cfg: &GridRnnConfig,
    p: &TfRnnParams,
    cache: &TfRnnCache,
    grad_bins: &[Tensor],
    acc: &mut TfRnnParams,
) -> Result<()> {
    let grid = &cache.input;
    p.check(cfg, grid.cell_dim())?;
    acc.check(cfg, grid.cell_dim())?;
    let (tn, kn, b) = (grid.n_time(), grid.n_freq(), grid.batch());
    let s = cfg.sigma_width;
    if grad_bins.len() != tn || grad_bins.iter().any(|g| g.rows() != b || g.cols() != kn * s) {
        return Err(Error::usage("TF-RNN cache does not match the incoming gradients"));
    }
    let mut g_h = Vec::with_capacity(tn * kn);
    for g in grad_bins {
        g_h.extend(g.split_cols(&vec![s; kn])?);
    }
    for t in (0..tn).rev() {
        for k in (0..kn).rev() {
            let idx = t * kn + k;
            let mut dz = std::mem::replace(&mut g_h[idx], Tensor::zeros(&[1, 1]));
            sigmoid_grad_in_place(&mut dz, &cache.h[idx]);
            lin_back(grid.cell(t, k), &p.w, &dz, &mut acc.w, None);
            bias_back(&dz, &mut acc.b);
            if t > 0 {
                lin_back(&cache.h[idx - kn], &p.v_t, &dz, &mut acc.v_t, Some(&mut g_h[idx - kn]));
            }
            if k > 0 {
                lin_back(&cache.h[idx - 1], &p.v_f, &dz, &mut acc.v_f, Some(&mut g_h[idx - 1]));
            }
        }
    }
    Ok(())
}
