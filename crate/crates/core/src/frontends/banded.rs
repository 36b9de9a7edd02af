//! Banded frequency convolution.
//!
//! The frequency axis is cut into overlapping bands of `band_size` dims,
//! `band_shift` apart. Each band owns `n_filters` filters of
//! `filter_time × filter_freq`; a valid convolution inside the band is
//! followed by a sigmoid and non-overlapping max-pooling along frequency.
//! Band outputs are concatenated as `[band, filter, time_row, pooled]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{max_pool_1d, pooled_len, sigmoid_scalar, Tensor};
use crate::params::{push, push_mut, ParamKind, ParamMut, ParamRef, Parameterized};
use crate::tdnn::WindowGeometry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandedConvConfig {
    pub band_size: usize,
    pub band_shift: usize,
    pub n_bands: usize,
    pub filter_time: usize,
    pub filter_freq: usize,
    pub n_filters: usize,
    pub pool_size: usize,
}

impl Default for BandedConvConfig {
    fn default() -> Self {
        Self {
            band_size: 10,
            band_shift: 5,
            n_bands: 7,
            filter_time: 5,
            filter_freq: 5,
            n_filters: 100,
            pool_size: 2,
        }
    }
}

impl BandedConvConfig {
    pub fn validate(&self, geom: &WindowGeometry) -> Result<()> {
        self.validate_map(geom.context, geom.feat_dim)
    }

    pub fn validate_map(&self, rows: usize, feat_dim: usize) -> Result<()> {
        if self.n_bands == 0 || self.n_filters == 0 || self.filter_time == 0 || self.filter_freq == 0 {
            return Err(Error::Geometry(format!("banded conv dims must be positive: {self:?}")));
        }
        if self.n_bands > 1 && self.band_shift == 0 {
            return Err(Error::Geometry("several bands need a positive band_shift".into()));
        }
        if self.filter_freq > self.band_size || self.filter_time > rows {
            return Err(Error::Geometry(format!(
                "filter {}x{} larger than band {}x{}",
                self.filter_time, self.filter_freq, rows, self.band_size
            )));
        }
        let last_end = (self.n_bands - 1) * self.band_shift + self.band_size;
        if last_end > feat_dim {
            return Err(Error::Geometry(format!(
                "{} bands of size {} at shift {} end at {last_end}, past the {feat_dim}-dim axis",
                self.n_bands, self.band_size, self.band_shift
            )));
        }
        pooled_len(self.conv_cols(), self.pool_size, self.pool_size)?;
        Ok(())
    }

    pub fn band_starts(&self) -> Vec<usize> {
        (0..self.n_bands).map(|f| f * self.band_shift).collect()
    }

    fn conv_cols(&self) -> usize {
        self.band_size + 1 - self.filter_freq
    }

    fn conv_rows(&self, rows: usize) -> usize {
        rows + 1 - self.filter_time
    }

    fn pooled(&self) -> usize {
        self.conv_cols() / self.pool_size
    }

    pub fn output_dim(&self, rows: usize) -> usize {
        self.n_bands * self.n_filters * self.conv_rows(rows) * self.pooled()
    }

    /// Filter weights, biases excluded.
    pub fn weight_count(&self) -> usize {
        self.n_bands * self.n_filters * self.filter_time * self.filter_freq
    }

    pub fn bias_count(&self) -> usize {
        self.n_bands * self.n_filters
    }
}

/// `filters: [n_bands, n_filters, filter_time, filter_freq]`, `bias: [n_bands, n_filters]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedConvParams {
    pub filters: Tensor,
    pub bias: Tensor,
}

impl BandedConvParams {
    pub fn init<R: Rng + ?Sized>(cfg: &BandedConvConfig, rng: &mut R) -> Self {
        let fan_in = cfg.filter_time * cfg.filter_freq;
        let limit = (6.0 / (fan_in + cfg.n_filters) as f64).sqrt();
        Self {
            filters: Tensor::uniform(
                &[cfg.n_bands, cfg.n_filters, cfg.filter_time, cfg.filter_freq],
                limit,
                rng,
            ),
            bias: Tensor::zeros(&[cfg.n_bands, cfg.n_filters]),
        }
    }

    pub fn zeros(cfg: &BandedConvConfig) -> Self {
        Self {
            filters: Tensor::zeros(&[cfg.n_bands, cfg.n_filters, cfg.filter_time, cfg.filter_freq]),
            bias: Tensor::zeros(&[cfg.n_bands, cfg.n_filters]),
        }
    }

    fn check(&self, cfg: &BandedConvConfig) -> Result<()> {
        if self.filters.shape() != [cfg.n_bands, cfg.n_filters, cfg.filter_time, cfg.filter_freq]
            || self.bias.shape() != [cfg.n_bands, cfg.n_filters]
        {
            return Err(Error::dim(format!(
                "banded params {:?}/{:?} do not match config",
                self.filters.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

impl Parameterized for BandedConvParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push(out, prefix, "filters", ParamKind::Weight, &self.filters);
        push(out, prefix, "bias", ParamKind::Bias, &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_mut(out, prefix, "filters", ParamKind::Weight, &mut self.filters);
        push_mut(out, prefix, "bias", ParamKind::Bias, &mut self.bias);
    }
}

struct ConvGeom {
    /// Row stride of the input map.
    stride: usize,
    rows_in: usize,
    col0: usize,
    width: usize,
    t: usize,
    f: usize,
}

/// Valid correlation of every filter over columns `[col0, col0 + width)` of a
/// row-major map, followed by a sigmoid. Output is `[K, rows_out, cols_out]`.
fn conv_sigmoid(x: &[f64], g: &ConvGeom, filters: &[f64], bias: &[f64], out: &mut Vec<f64>) {
    let rows_out = g.rows_in + 1 - g.t;
    let cols_out = g.width + 1 - g.f;
    for (k, filt) in filters.chunks_exact(g.t * g.f).enumerate() {
        for i in 0..rows_out {
            for j in 0..cols_out {
                let mut acc = 0.0;
                for l in 0..g.t {
                    let xr = &x[(i + l) * g.stride + g.col0 + j..];
                    let fr = &filt[l * g.f..(l + 1) * g.f];
                    for m in 0..g.f {
                        acc += xr[m] * fr[m];
                    }
                }
                out.push(sigmoid_scalar(acc + bias[k]));
            }
        }
    }
}

/// Full-weight-sharing convolution of one `[L, M]` map with `[K, T, F]`
/// filters: `[K, L - T + 1, M - F + 1]` sigmoid outputs.
pub fn full_conv_forward(x: &Tensor, filters: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || filters.rank() != 3 {
        return Err(Error::dim(format!(
            "full conv expects a map and [K, T, F] filters, got {:?} and {:?}",
            x.shape(),
            filters.shape()
        )));
    }
    let (l, m) = (x.shape()[0], x.shape()[1]);
    let (k, t, f) = (filters.shape()[0], filters.shape()[1], filters.shape()[2]);
    if t > l || f > m {
        return Err(Error::Geometry(format!("filter {t}x{f} larger than input {l}x{m}")));
    }
    let zeros = vec![0.0; k];
    let b = match bias {
        Some(b) if b.len() == k => b.data(),
        Some(b) => return Err(Error::dim(format!("bias {:?} for {k} filters", b.shape()))),
        None => &zeros,
    };
    let g = ConvGeom {
        stride: m,
        rows_in: l,
        col0: 0,
        width: m,
        t,
        f,
    };
    let mut out = Vec::with_capacity(k * (l + 1 - t) * (m + 1 - f));
    conv_sigmoid(x.data(), &g, filters.data(), b, &mut out);
    Tensor::new(vec![k, l + 1 - t, m + 1 - f], out)
}

/// Forward for one map `[rows, feat_dim]`; returns the concatenated pooled
/// output vector.
pub fn banded_conv_forward(x: &Tensor, cfg: &BandedConvConfig, params: &BandedConvParams) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("banded conv expects a map, got {:?}", x.shape())));
    }
    cfg.validate_map(x.shape()[0], x.shape()[1])?;
    params.check(cfg)?;
    let mut conv = Vec::new();
    let mut out = Vec::with_capacity(cfg.output_dim(x.shape()[0]));
    let mut argmax = Vec::new();
    banded_map(x.data(), x.shape()[0], x.shape()[1], cfg, params, &mut conv, &mut out, &mut argmax)?;
    Tensor::vector(out)
}

#[allow(clippy::too_many_arguments)]
fn banded_map(
    x: &[f64],
    rows: usize,
    stride: usize,
    cfg: &BandedConvConfig,
    params: &BandedConvParams,
    conv: &mut Vec<f64>,
    out: &mut Vec<f64>,
    argmax: &mut Vec<usize>,
) -> Result<()> {
    let kf = cfg.n_filters * cfg.filter_time * cfg.filter_freq;
    let cols = cfg.conv_cols();
    for (band, start) in cfg.band_starts().into_iter().enumerate() {
        let g = ConvGeom {
            stride,
            rows_in: rows,
            col0: start,
            width: cfg.band_size,
            t: cfg.filter_time,
            f: cfg.filter_freq,
        };
        let base = conv.len();
        conv_sigmoid(
            x,
            &g,
            &params.filters.data()[band * kf..(band + 1) * kf],
            &params.bias.data()[band * cfg.n_filters..(band + 1) * cfg.n_filters],
            conv,
        );
        for row in conv[base..].chunks_exact(cols) {
            let (p, idx) = max_pool_1d(row, cfg.pool_size, cfg.pool_size)?;
            out.extend_from_slice(&p);
            argmax.extend_from_slice(&idx);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BandedCache {
    window: Tensor,
    bin_starts: Vec<usize>,
    context: usize,
    /// Per bin: `[B, n_bands, K, rows, cols]` sigmoid outputs.
    conv: Vec<Vec<f64>>,
    /// Per bin: winning column of every pooled value.
    argmax: Vec<Vec<usize>>,
}

pub(crate) fn banded_forward_window(
    window: &Tensor,
    geom: &WindowGeometry,
    cfg: &BandedConvConfig,
    params: &BandedConvParams,
) -> Result<(Vec<Tensor>, BandedCache)> {
    cfg.validate(geom)?;
    params.check(cfg)?;
    let b = window.rows();
    let feat = geom.feat_dim;
    let out_dim = cfg.output_dim(geom.context);
    let mut outs = Vec::new();
    let mut convs = Vec::new();
    let mut argmaxes = Vec::new();
    for start in geom.bin_starts() {
        let mut out = Vec::with_capacity(b * out_dim);
        let mut conv = Vec::new();
        let mut argmax = Vec::new();
        for r in 0..b {
            let map = &window.row(r)[start * feat..(start + geom.context) * feat];
            banded_map(map, geom.context, feat, cfg, params, &mut conv, &mut out, &mut argmax)?;
        }
        outs.push(Tensor::matrix(b, out_dim, out)?);
        convs.push(conv);
        argmaxes.push(argmax);
    }
    Ok((
        outs,
        BandedCache {
            window: window.clone(),
            bin_starts: geom.bin_starts(),
            context: geom.context,
            conv: convs,
            argmax: argmaxes,
        },
    ))
}

pub(crate) fn banded_backward_acc(
    cfg: &BandedConvConfig,
    params: &BandedConvParams,
    cache: &BandedCache,
    grad_bins: &[Tensor],
    acc: &mut BandedConvParams,
) -> Result<()> {
    params.check(cfg)?;
    acc.check(cfg)?;
    let b = cache.window.rows();
    let out_dim = cfg.output_dim(cache.context);
    if grad_bins.len() != cache.bin_starts.len()
        || grad_bins.iter().any(|g| g.rows() != b || g.cols() != out_dim)
    {
        return Err(Error::usage("banded cache does not match the incoming gradients"));
    }
    let feat = cache.window.shape()[2];
    let (t, f) = (cfg.filter_time, cfg.filter_freq);
    let rows = cfg.conv_rows(cache.context);
    let cols = cfg.conv_cols();
    let pooled = cfg.pooled();
    let starts = cfg.band_starts();
    let k_count = cfg.n_filters;
    for (bin, start) in cache.bin_starts.iter().enumerate() {
        let conv = &cache.conv[bin];
        let argmax = &cache.argmax[bin];
        let g = grad_bins[bin].data();
        for r in 0..b {
            let map = &cache.window.row(r)[start * feat..(start + cache.context) * feat];
            for (band, &col0) in starts.iter().enumerate() {
                for k in 0..k_count {
                    let fk = band * k_count + k;
                    let filt = &mut acc.filters.data_mut()[fk * t * f..(fk + 1) * t * f];
                    let mut gbias = 0.0;
                    for i in 0..rows {
                        for j in 0..pooled {
                            let o = ((r * cfg.n_bands * k_count + fk) * rows + i) * pooled + j;
                            let go = g[o];
                            if go == 0.0 {
                                continue;
                            }
                            let col = argmax[o];
                            let y = conv[((r * cfg.n_bands * k_count + fk) * rows + i) * cols + col];
                            let dz = go * y * (1.0 - y);
                            gbias += dz;
                            for l in 0..t {
                                let xr = &map[(i + l) * feat + col0 + col..];
                                for m in 0..f {
                                    filt[l * f + m] += dz * xr[m];
                                }
                            }
                        }
                    }
                    acc.bias.data_mut()[fk] += gbias;
                }
            }
        }
    }
    Ok(())
}
