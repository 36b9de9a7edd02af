//! Coupled grid cell: two σ-recurrences sharing their recurrent matrices,
//!
//! ```text
//! hT[t,k] = σ(W_T·x[t,k] + V_T·hT[t-1,k] + V_F·hF[t,k-1] + b_T)
//! hF[t,k] = σ(W_F·x[t,k] + V_T·hT[t-1,k] + V_F·hF[t,k-1] + b_F)
//! ```
//!
//! Each time bin emits `hT[t,0] ‖ hF[t,0] ‖ … ‖ hT[t,K-1] ‖ hF[t,K-1]`.

use rand::Rng;

use super::grid::{Grid, GridRnnConfig};
use super::{add_bias, bias_back, glorot, lin_acc, lin_back, sigmoid_grad_in_place};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid_in_place, Tensor};
use crate::params::{push, push_mut, ParamKind, ParamMut, ParamRef, Parameterized};

pub(crate) fn coupled_param_count(cfg: &GridRnnConfig, context: usize) -> usize {
    let (s, i) = (cfg.sigma_width, cfg.cell_input_dim(context));
    2 * s * i + 2 * s * s + 2 * s
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledParams {
    pub w_t: Tensor,
    pub w_f: Tensor,
    pub v_t: Tensor,
    pub v_f: Tensor,
    pub b_t: Tensor,
    pub b_f: Tensor,
}

impl CoupledParams {
    pub fn init<R: Rng + ?Sized>(cfg: &GridRnnConfig, context: usize, rng: &mut R) -> Self {
        let (s, i) = (cfg.sigma_width, cfg.cell_input_dim(context));
        Self {
            w_t: glorot(s, i, rng),
            w_f: glorot(s, i, rng),
            v_t: glorot(s, s, rng),
            v_f: glorot(s, s, rng),
            b_t: Tensor::zeros(&[s]),
            b_f: Tensor::zeros(&[s]),
        }
    }

    pub fn zeros(cfg: &GridRnnConfig, context: usize) -> Self {
        let (s, i) = (cfg.sigma_width, cfg.cell_input_dim(context));
        Self {
            w_t: Tensor::zeros(&[s, i]),
            w_f: Tensor::zeros(&[s, i]),
            v_t: Tensor::zeros(&[s, s]),
            v_f: Tensor::zeros(&[s, s]),
            b_t: Tensor::zeros(&[s]),
            b_f: Tensor::zeros(&[s]),
        }
    }

    fn check(&self, cfg: &GridRnnConfig, in_dim: usize) -> Result<()> {
        let s = cfg.sigma_width;
        let ok = self.w_t.shape() == [s, in_dim]
            && self.w_f.shape() == [s, in_dim]
            && self.v_t.shape() == [s, s]
            && self.v_f.shape() == [s, s]
            && self.b_t.shape() == [s]
            && self.b_f.shape() == [s];
        if !ok {
            return Err(Error::dim(format!("coupled grid params do not match sigma {s}, input {in_dim}")));
        }
        Ok(())
    }
}

impl Parameterized for CoupledParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push(out, prefix, "w_t", ParamKind::Weight, &self.w_t);
        push(out, prefix, "w_f", ParamKind::Weight, &self.w_f);
        push(out, prefix, "v_t", ParamKind::Weight, &self.v_t);
        push(out, prefix, "v_f", ParamKind::Weight, &self.v_f);
        push(out, prefix, "b_t", ParamKind::Bias, &self.b_t);
        push(out, prefix, "b_f", ParamKind::Bias, &self.b_f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_mut(out, prefix, "w_t", ParamKind::Weight, &mut self.w_t);
        push_mut(out, prefix, "w_f", ParamKind::Weight, &mut self.w_f);
        push_mut(out, prefix, "v_t", ParamKind::Weight, &mut self.v_t);
        push_mut(out, prefix, "v_f", ParamKind::Weight, &mut self.v_f);
        push_mut(out, prefix, "b_t", ParamKind::Bias, &mut self.b_t);
        push_mut(out, prefix, "b_f", ParamKind::Bias, &mut self.b_f);
    }
}

#[derive(Debug, Clone)]
pub struct CoupledCache {
    input: Grid,
    ht: Vec<Tensor>,
    hf: Vec<Tensor>,
}

pub(crate) fn forward_cached(grid: &Grid, cfg: &GridRnnConfig, p: &CoupledParams) -> Result<(Vec<Tensor>, CoupledCache)> {
    p.check(cfg, grid.cell_dim())?;
    let (tn, kn, b) = (grid.n_time(), grid.n_freq(), grid.batch());
    let s = cfg.sigma_width;
    let mut ht: Vec<Tensor> = Vec::with_capacity(tn * kn);
    let mut hf: Vec<Tensor> = Vec::with_capacity(tn * kn);
    for t in 0..tn {
        for k in 0..kn {
            let idx = t * kn + k;
            let mut rec = Tensor::zeros(&[b, s]);
            if t > 0 {
                lin_acc(&ht[idx - kn], &p.v_t, &mut rec);
            }
            if k > 0 {
                lin_acc(&hf[idx - 1], &p.v_f, &mut rec);
            }
            let mut a_t = Tensor::zeros(&[b, s]);
            add_bias(&mut a_t, &p.b_t);
            lin_acc(grid.cell(t, k), &p.w_t, &mut a_t);
            a_t.add_assign(&rec)?;
            let mut a_f = Tensor::zeros(&[b, s]);
            add_bias(&mut a_f, &p.b_f);
            lin_acc(grid.cell(t, k), &p.w_f, &mut a_f);
            a_f.add_assign(&rec)?;
            sigmoid_in_place(&mut a_t);
            sigmoid_in_place(&mut a_f);
            ht.push(a_t);
            hf.push(a_f);
        }
    }
    let out = (0..tn)
        .map(|t| {
            let parts: Vec<&Tensor> = (0..kn).flat_map(|k| [&ht[t * kn + k], &hf[t * kn + k]]).collect();
            Tensor::concat_cols(&parts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, CoupledCache { input: grid.clone(), ht, hf }))
}

/// Per-time-bin outputs `[B, K·2σ]`.
pub fn coupled_grid_forward(grid: &Grid, cfg: &GridRnnConfig, p: &CoupledParams) -> Result<Vec<Tensor>> {
    Ok(forward_cached(grid, cfg, p)?.0)
}

pub(crate) fn backward_acc(
    cfg: &GridRnnConfig,
    p: &CoupledParams,
    cache: &CoupledCache,
    grad_bins: &[Tensor],
    acc: &mut CoupledParams,
) -> Result<()> {
    let grid = &cache.input;
    p.check(cfg, grid.cell_dim())?;
    acc.check(cfg, grid.cell_dim())?;
    let (tn, kn, b) = (grid.n_time(), grid.n_freq(), grid.batch());
    let s = cfg.sigma_width;
    if grad_bins.len() != tn || grad_bins.iter().any(|g| g.rows() != b || g.cols() != 2 * kn * s) {
        return Err(Error::usage("coupled grid cache does not match the incoming gradients"));
    }
    let mut g_t = Vec::with_capacity(tn * kn);
    let mut g_f = Vec::with_capacity(tn * kn);
    for g in grad_bins {
        let mut parts = g.split_cols(&vec![s; 2 * kn])?.into_iter();
        while let (Some(a), Some(b)) = (parts.next(), parts.next()) {
            g_t.push(a);
            g_f.push(b);
        }
    }
    for t in (0..tn).rev() {
        for k in (0..kn).rev() {
            let idx = t * kn + k;
            let mut dz_t = std::mem::replace(&mut g_t[idx], Tensor::zeros(&[1, 1]));
            let mut dz_f = std::mem::replace(&mut g_f[idx], Tensor::zeros(&[1, 1]));
            sigmoid_grad_in_place(&mut dz_t, &cache.ht[idx]);
            sigmoid_grad_in_place(&mut dz_f, &cache.hf[idx]);
            let x = grid.cell(t, k);
            lin_back(x, &p.w_t, &dz_t, &mut acc.w_t, None);
            lin_back(x, &p.w_f, &dz_f, &mut acc.w_f, None);
            bias_back(&dz_t, &mut acc.b_t);
            bias_back(&dz_f, &mut acc.b_f);
            // both streams read the same recurrent term
            let mut dz = dz_t;
            dz.add_assign(&dz_f)?;
            if t > 0 {
                lin_back(&cache.ht[idx - kn], &p.v_t, &dz, &mut acc.v_t, Some(&mut g_t[idx - kn]));
            }
            if k > 0 {
                lin_back(&cache.hf[idx - 1], &p.v_f, &dz, &mut acc.v_f, Some(&mut g_f[idx - 1]));
            }
        }
    }
    Ok(())
}
