//! Spectro-temporal processors that replace the raw spliced stack feeding
//! kernel 1.
//!
//! Every front-end consumes a batch of context windows `[B, span, feat_dim]`
//! and emits one matrix `[B, output_dim]` per TDNN time bin. Front-ends sit at
//! the bottom of the network, so their backward passes produce parameter
//! gradients only.

pub mod banded;
pub mod coupled;
pub mod grid;
pub mod tf_rnn;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use banded::{banded_conv_forward, full_conv_forward, BandedConvConfig, BandedConvParams};
pub use coupled::{coupled_grid_forward, CoupledParams};
pub use grid::{bd_grid_rnn_forward, grid_rnn_backward, grid_rnn_forward, Grid, GridDirParams, GridRnnConfig};
pub use tf_rnn::{tf_rnn_forward, TfRnnParams};

use crate::error::{Error, Result};
use crate::numerics::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, col_sum_acc, Tensor};
use crate::params::{ParamMut, ParamRef, Parameterized};
use crate::tdnn::WindowGeometry;

/// Which front-end feeds kernel 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontendSpec {
    None,
    BandedCnn(BandedConvConfig),
    GridRnn(GridRnnConfig),
    TfRnn(GridRnnConfig),
    CoupledGrid(GridRnnConfig),
}

impl FrontendSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FrontendSpec::None => "none",
            FrontendSpec::BandedCnn(_) => "banded_cnn",
            FrontendSpec::GridRnn(c) => match (c.frequency_dependent, c.bidirectional) {
                (false, false) => "grid_rnn",
                (true, false) => "fd_grid_rnn",
                (true, true) => "bd_fd_grid_rnn",
                (false, true) => "bd_grid_rnn",
            },
            FrontendSpec::TfRnn(_) => "tf_rnn",
            FrontendSpec::CoupledGrid(_) => "coupled_grid",
        }
    }

    pub fn validate(&self, geom: &WindowGeometry) -> Result<()> {
        match self {
            FrontendSpec::None => Ok(()),
            FrontendSpec::BandedCnn(c) => c.validate(geom),
            FrontendSpec::GridRnn(c) => c.validate(geom),
            FrontendSpec::TfRnn(c) | FrontendSpec::CoupledGrid(c) => {
                if c.frequency_dependent || c.bidirectional {
                    return Err(Error::spec(format!(
                        "{} front-end supports neither frequency_dependent nor bidirectional",
                        self.kind_name()
                    )));
                }
                c.validate(geom)
            }
        }
    }

    /// Per-time-bin output dimension.
    pub fn output_dim(&self, geom: &WindowGeometry) -> usize {
        match self {
            FrontendSpec::None => geom.context * geom.feat_dim,
            FrontendSpec::BandedCnn(c) => c.output_dim(geom.context),
            FrontendSpec::GridRnn(c) => c.n_freq_bins() * c.sigma_width * if c.bidirectional { 2 } else { 1 },
            FrontendSpec::TfRnn(c) => c.n_freq_bins() * c.sigma_width,
            FrontendSpec::CoupledGrid(c) => c.n_freq_bins() * 2 * c.sigma_width,
        }
    }

    /// Exact scalar count under the layout documented on each params type.
    pub fn param_count(&self, geom: &WindowGeometry) -> usize {
        match self {
            FrontendSpec::None => 0,
            FrontendSpec::BandedCnn(c) => c.weight_count() + c.bias_count(),
            FrontendSpec::GridRnn(c) => grid::grid_param_count(c, geom.context),
            FrontendSpec::TfRnn(c) => tf_rnn::tf_param_count(c, geom.context),
            FrontendSpec::CoupledGrid(c) => coupled::coupled_param_count(c, geom.context),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, geom: &WindowGeometry, rng: &mut R) -> FrontendParams {
        match self {
            FrontendSpec::None => FrontendParams::None,
            FrontendSpec::BandedCnn(c) => FrontendParams::Banded(BandedConvParams::init(c, rng)),
            FrontendSpec::GridRnn(c) => {
                let fwd = GridDirParams::init(c, geom.context, rng);
                let bwd = c.bidirectional.then(|| GridDirParams::init(c, geom.context, rng));
                FrontendParams::Grid { fwd, bwd }
            }
            FrontendSpec::TfRnn(c) => FrontendParams::TfRnn(TfRnnParams::init(c, geom.context, rng)),
            FrontendSpec::CoupledGrid(c) => FrontendParams::Coupled(CoupledParams::init(c, geom.context, rng)),
        }
    }

    pub fn zero_params(&self, geom: &WindowGeometry) -> FrontendParams {
        match self {
            FrontendSpec::None => FrontendParams::None,
            FrontendSpec::BandedCnn(c) => FrontendParams::Banded(BandedConvParams::zeros(c)),
            FrontendSpec::GridRnn(c) => FrontendParams::Grid {
                fwd: GridDirParams::zeros(c, geom.context),
                bwd: c.bidirectional.then(|| GridDirParams::zeros(c, geom.context)),
            },
            FrontendSpec::TfRnn(c) => FrontendParams::TfRnn(TfRnnParams::zeros(c, geom.context)),
            FrontendSpec::CoupledGrid(c) => FrontendParams::Coupled(CoupledParams::zeros(c, geom.context)),
        }
    }
}

/// Per-front-end parameter block.
#[derive(Debug, Clone, PartialEq)]
pub enum FrontendParams {
    None,
    Banded(BandedConvParams),
    Grid {
        fwd: GridDirParams,
        bwd: Option<GridDirParams>,
    },
    TfRnn(TfRnnParams),
    Coupled(CoupledParams),
}

impl Parameterized for FrontendParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        match self {
            FrontendParams::None => {}
            FrontendParams::Banded(p) => p.visit(prefix, out),
            FrontendParams::Grid { fwd, bwd } => {
                fwd.visit(&crate::params::join(prefix, "fwd"), out);
                if let Some(b) = bwd {
                    b.visit(&crate::params::join(prefix, "bwd"), out);
                }
            }
            FrontendParams::TfRnn(p) => p.visit(prefix, out),
            FrontendParams::Coupled(p) => p.visit(prefix, out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        match self {
            FrontendParams::None => {}
            FrontendParams::Banded(p) => p.visit_mut(prefix, out),
            FrontendParams::Grid { fwd, bwd } => {
                fwd.visit_mut(&crate::params::join(prefix, "fwd"), out);
                if let Some(b) = bwd {
                    b.visit_mut(&crate::params::join(prefix, "bwd"), out);
                }
            }
            FrontendParams::TfRnn(p) => p.visit_mut(prefix, out),
            FrontendParams::Coupled(p) => p.visit_mut(prefix, out),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FrontendCache {
    None,
    Banded(banded::BandedCache),
    Grid {
        fwd: grid::GridCache,
        bwd: Option<grid::GridCache>,
    },
    TfRnn(tf_rnn::TfRnnCache),
    Coupled(coupled::CoupledCache),
}

fn check_window(window: &Tensor, geom: &WindowGeometry) -> Result<()> {
    if window.rank() != 3 || window.shape()[1] != geom.span() || window.shape()[2] != geom.feat_dim {
        return Err(Error::dim(format!(
            "window batch {:?} does not match [B, {}, {}]",
            window.shape(),
            geom.span(),
            geom.feat_dim
        )));
    }
    Ok(())
}

/// Spliced frames `[start, start + context)` of every window, `[B, context * feat_dim]`.
pub fn splice_bin(window: &Tensor, start: usize, context: usize) -> Tensor {
    let feat = window.shape()[2];
    let b = window.rows();
    let mut data = Vec::with_capacity(b * context * feat);
    for r in 0..b {
        data.extend_from_slice(&window.row(r)[start * feat..(start + context) * feat]);
    }
    Tensor::matrix(b, context * feat, data).expect("splice shape")
}

pub fn frontend_forward(
    spec: &FrontendSpec,
    params: &FrontendParams,
    window: &Tensor,
    geom: &WindowGeometry,
) -> Result<(Vec<Tensor>, FrontendCache)> {
    check_window(window, geom)?;
    match (spec, params) {
        (FrontendSpec::None, FrontendParams::None) => Ok((
            geom.bin_starts()
                .into_iter()
                .map(|s| splice_bin(window, s, geom.context))
                .collect(),
            FrontendCache::None,
        )),
        (FrontendSpec::BandedCnn(c), FrontendParams::Banded(p)) => {
            let (out, cache) = banded::banded_forward_window(window, geom, c, p)?;
            Ok((out, FrontendCache::Banded(cache)))
        }
        (FrontendSpec::GridRnn(c), FrontendParams::Grid { fwd, bwd }) => {
            let grid = Grid::from_window(window, geom, c)?;
            if c.bidirectional {
                let bwd = bwd
                    .as_ref()
                    .ok_or_else(|| Error::dim("bidirectional grid needs backward-direction params"))?;
                let (out, cf, cb) = grid::bd_forward_cached(&grid, c, fwd, bwd)?;
                Ok((out, FrontendCache::Grid { fwd: cf, bwd: Some(cb) }))
            } else {
                let (out, cf) = grid::forward_cached(&grid, c, fwd)?;
                Ok((out, FrontendCache::Grid { fwd: cf, bwd: None }))
            }
        }
        (FrontendSpec::TfRnn(c), FrontendParams::TfRnn(p)) => {
            let grid = Grid::from_window(window, geom, c)?;
            let (out, cache) = tf_rnn::forward_cached(&grid, c, p)?;
            Ok((out, FrontendCache::TfRnn(cache)))
        }
        (FrontendSpec::CoupledGrid(c), FrontendParams::Coupled(p)) => {
            let grid = Grid::from_window(window, geom, c)?;
            let (out, cache) = coupled::forward_cached(&grid, c, p)?;
            Ok((out, FrontendCache::Coupled(cache)))
        }
        _ => Err(Error::dim(format!(
            "{} front-end given parameters of another kind",
            spec.kind_name()
        ))),
    }
}

/// Accumulates front-end parameter gradients into `acc`.
pub fn frontend_backward(
    spec: &FrontendSpec,
    params: &FrontendParams,
    cache: &FrontendCache,
    grad_bins: &[Tensor],
    acc: &mut FrontendParams,
) -> Result<()> {
    match (spec, params, cache, acc) {
        (FrontendSpec::None, FrontendParams::None, FrontendCache::None, FrontendParams::None) => Ok(()),
        (FrontendSpec::BandedCnn(c), FrontendParams::Banded(p), FrontendCache::Banded(cache), FrontendParams::Banded(a)) => {
            banded::banded_backward_acc(c, p, cache, grad_bins, a)
        }
        (
            FrontendSpec::GridRnn(c),
            FrontendParams::Grid { fwd, bwd },
            FrontendCache::Grid { fwd: cf, bwd: cb },
            FrontendParams::Grid { fwd: af, bwd: ab },
        ) => match (bwd, cb, ab) {
            (Some(pb), Some(cb), Some(ab)) => grid::bd_backward_acc(c, fwd, pb, cf, cb, grad_bins, af, ab),
            (None, None, None) => grid::backward_acc(c, fwd, cf, grad_bins, af),
            _ => Err(Error::usage("grid cache direction count does not match parameters")),
        },
        (FrontendSpec::TfRnn(c), FrontendParams::TfRnn(p), FrontendCache::TfRnn(cache), FrontendParams::TfRnn(a)) => {
            tf_rnn::backward_acc(c, p, cache, grad_bins, a)
        }
        (FrontendSpec::CoupledGrid(c), FrontendParams::Coupled(p), FrontendCache::Coupled(cache), FrontendParams::Coupled(a)) => {
            coupled::backward_acc(c, p, cache, grad_bins, a)
        }
        _ => Err(Error::usage(format!(
            "front-end cache does not belong to a {} front-end",
            spec.kind_name()
        ))),
    }
}

// Matrix helpers shared by the recurrent front-ends. Weights are `[out, in]`.

/// `out += x · wᵀ`
pub(crate) fn lin_acc(x: &Tensor, w: &Tensor, out: &mut Tensor) {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.cols(), i);
    debug_assert_eq!(out.cols(), o);
    matmul_nt_acc(x.data(), i, w.data(), o, out.data_mut());
}

/// Broadcast-adds a bias row.
pub(crate) fn add_bias(out: &mut Tensor, b: &Tensor) {
    let c = b.len();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
}

/// Backward of `out = x · wᵀ`: `gw += gᵀ x`, `gx += g w`.
pub(crate) fn lin_back(x: &Tensor, w: &Tensor, g: &Tensor, gw: &mut Tensor, gx: Option<&mut Tensor>) {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    matmul_tn_acc(g.data(), o, x.data(), i, gw.data_mut());
    if let Some(gx) = gx {
        matmul_nn_acc(g.data(), o, w.data(), i, gx.data_mut());
    }
}

pub(crate) fn bias_back(g: &Tensor, gb: &mut Tensor) {
    col_sum_acc(g.data(), gb.len(), gb.data_mut());
}

/// In-place `g *= y (1 - y)`.
pub(crate) fn sigmoid_grad_in_place(g: &mut Tensor, y: &Tensor) {
    for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv *= yv * (1.0 - yv);
    }
}

pub(crate) fn glorot<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Tensor::uniform(&[out_dim, in_dim], limit, rng)
}
