//! Grid-RNN front-end.
//!
//! Two coupled vanilla RNNs unfolded over a (time bin × frequency bin) grid:
//!
//! ```text
//! hI[t,k] = V_IF · hF[t,k-1] + V_II · hI[t-1,k] + b_I          (linear)
//! hF[t,k] = σ(W_F(k) · x[t,k] + V_F(k) · hI[t,k-1] + b_F(k))
//! ```
//!
//! States outside the grid are zero. The σ-RNN output `hF` is the extracted
//! feature; each time bin emits `hF[t,0] ‖ … ‖ hF[t,K-1]`. In
//! frequency-dependent mode `W_F`, `V_F` and `b_F` have one copy per frequency
//! bin. The bidirectional variant runs a second grid over the input reversed
//! along both axes and concatenates its time-realigned outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_bias, bias_back, glorot, lin_acc, lin_back, sigmoid_grad_in_place};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid_in_place, Tensor};
use crate::params::{push, push_mut, ParamKind, ParamMut, ParamRef, Parameterized};
use crate::tdnn::WindowGeometry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridRnnConfig {
    pub freq_bin_size: usize,
    pub freq_bin_starts: Vec<usize>,
    pub sigma_width: usize,
    pub linear_width: usize,
    pub frequency_dependent: bool,
    pub bidirectional: bool,
}

impl Default for GridRnnConfig {
    fn default() -> Self {
        Self {
            freq_bin_size: 10,
            freq_bin_starts: vec![0, 8, 15, 23, 30],
            sigma_width: 250,
            linear_width: 500,
            frequency_dependent: false,
            bidirectional: false,
        }
    }
}

impl GridRnnConfig {
    pub fn n_freq_bins(&self) -> usize {
        self.freq_bin_starts.len()
    }

    pub fn cell_input_dim(&self, context: usize) -> usize {
        context * self.freq_bin_size
    }

    pub fn validate(&self, geom: &WindowGeometry) -> Result<()> {
        if self.freq_bin_starts.is_empty() || self.freq_bin_size == 0 {
            return Err(Error::spec("grid needs at least one non-empty frequency bin"));
        }
        if self.sigma_width == 0 || self.linear_width == 0 {
            return Err(Error::spec(format!(
                "grid widths must be positive (sigma {}, linear {})",
                self.sigma_width, self.linear_width
            )));
        }
        for &s in &self.freq_bin_starts {
            if s + self.freq_bin_size > geom.feat_dim {
                return Err(Error::spec(format!(
                    "frequency bin at {s} of size {} leaves the {}-dim axis",
                    self.freq_bin_size, geom.feat_dim
                )));
            }
        }
        Ok(())
    }

    fn copies(&self) -> usize {
        if self.frequency_dependent {
            self.n_freq_bins()
        } else {
            1
        }
    }
}

pub(crate) fn grid_param_count(cfg: &GridRnnConfig, context: usize) -> usize {
    let (s, l, i) = (cfg.sigma_width, cfg.linear_width, cfg.cell_input_dim(context));
    let per_dir = cfg.copies() * (s * i + s * l + s) + l * s + l * l + l;
    per_dir * if cfg.bidirectional { 2 } else { 1 }
}

/// Inputs of every grid cell, `[B, in_dim]` each, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n_time: usize,
    n_freq: usize,
    cells: Vec<Tensor>,
}

impl Grid {
    pub fn new(n_time: usize, n_freq: usize, cells: Vec<Tensor>) -> Result<Self> {
        if n_time == 0 || n_freq == 0 || cells.len() != n_time * n_freq {
            return Err(Error::Input(format!(
                "grid {n_time}x{n_freq} needs {} cells, got {}",
                n_time * n_freq,
                cells.len()
            )));
        }
        let shape = cells[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Input(format!("grid cells must be matrices, got {shape:?}")));
        }
        if let Some(i) = cells.iter().position(|c| c.shape() != shape.as_slice()) {
            return Err(Error::Input(format!(
                "grid cell ({}, {}) has shape {:?}, expected {shape:?}",
                i / n_freq,
                i % n_freq,
                cells[i].shape()
            )));
        }
        Ok(Self { n_time, n_freq, cells })
    }

    /// Cuts every time bin of the windows into frequency bins.
    pub fn from_window(window: &Tensor, geom: &WindowGeometry, cfg: &GridRnnConfig) -> Result<Self> {
        let b = window.rows();
        let feat = geom.feat_dim;
        let fbs = cfg.freq_bin_size;
        let mut cells = Vec::new();
        for start in geom.bin_starts() {
            for &f0 in &cfg.freq_bin_starts {
                let mut data = Vec::with_capacity(b * geom.context * fbs);
                for r in 0..b {
                    let row = window.row(r);
                    for fr in start..start + geom.context {
                        data.extend_from_slice(&row[fr * feat + f0..fr * feat + f0 + fbs]);
                    }
                }
                cells.push(Tensor::matrix(b, geom.context * fbs, data)?);
            }
        }
        Self::new(geom.n_bins(), cfg.n_freq_bins(), cells)
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    pub fn batch(&self) -> usize {
        self.cells[0].rows()
    }

    pub fn cell_dim(&self) -> usize {
        self.cells[0].cols()
    }

    pub fn cell(&self, t: usize, k: usize) -> &Tensor {
        &self.cells[t * self.n_freq + k]
    }

    pub fn cell_mut(&mut self, t: usize, k: usize) -> &mut Tensor {
        &mut self.cells[t * self.n_freq + k]
    }

    /// The grid with both the time and the frequency axes reversed.
    pub fn reversed(&self) -> Self {
        let mut cells = Vec::with_capacity(self.cells.len());
        for t in (0..self.n_time).rev() {
            for k in (0..self.n_freq).rev() {
                cells.push(self.cell(t, k).clone());
            }
        }
        Self {
            n_time: self.n_time,
            n_freq: self.n_freq,
            cells,
        }
    }
}

/// Parameters of one grid direction. `w_f`, `v_f`, `b_f` hold one entry in
/// shared mode and one per frequency bin in frequency-dependent mode.
///
/// Shapes: `w_f[c]: [σ, in]`, `v_f[c]: [σ, L]`, `b_f[c]: [σ]`,
/// `v_if: [L, σ]`, `v_ii: [L, L]`, `b_i: [L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDirParams {
    pub w_f: Vec<Tensor>,
    pub v_f: Vec<Tensor>,
    pub b_f: Vec<Tensor>,
    pub v_if: Tensor,
    pub v_ii: Tensor,
    pub b_i: Tensor,
}

impl GridDirParams {
    pub fn init<R: Rng + ?Sized>(cfg: &GridRnnConfig, context: usize, rng: &mut R) -> Self {
        let (s, l, i) = (cfg.sigma_width, cfg.linear_width, cfg.cell_input_dim(context));
        let mut w_f = Vec::new();
        let mut v_f = Vec::new();
        let mut b_f = Vec::new();
        for _ in 0..cfg.copies() {
            w_f.push(glorot(s, i, rng));
            v_f.push(glorot(s, l, rng));
            b_f.push(Tensor::zeros(&[s]));
        }
        Self {
            w_f,
            v_f,
            b_f,
            v_if: glorot(l, s, rng),
            v_ii: glorot(l, l, rng),
            b_i: Tensor::zeros(&[l]),
        }
    }

    pub fn zeros(cfg: &GridRnnConfig, context: usize) -> Self {
        let (s, l, i) = (cfg.sigma_width, cfg.linear_width, cfg.cell_input_dim(context));
        let c = cfg.copies();
        Self {
            w_f: vec![Tensor::zeros(&[s, i]); c],
            v_f: vec![Tensor::zeros(&[s, l]); c],
            b_f: vec![Tensor::zeros(&[s]); c],
            v_if: Tensor::zeros(&[l, s]),
            v_ii: Tensor::zeros(&[l, l]),
            b_i: Tensor::zeros(&[l]),
        }
    }

    /// Frequency-dependent copy of the shared-mode parameters.
    pub fn untied(&self, n_freq: usize) -> Self {
        let rep = |v: &Vec<Tensor>| vec![v[0].clone(); n_freq];
        Self {
            w_f: rep(&self.w_f),
            v_f: rep(&self.v_f),
            b_f: rep(&self.b_f),
            ..self.clone()
        }
    }

    fn copy_index(&self, k: usize) -> usize {
        if self.w_f.len() == 1 {
            0
        } else {
            k
        }
    }

    fn check(&self, cfg: &GridRnnConfig, in_dim: usize) -> Result<()> {
        let (s, l) = (cfg.sigma_width, cfg.linear_width);
        let c = cfg.copies();
        let ok = self.w_f.len() == c
            && self.v_f.len() == c
            && self.b_f.len() == c
            && self.w_f.iter().all(|w| w.shape() == [s, in_dim])
            && self.v_f.iter().all(|w| w.shape() == [s, l])
            && self.b_f.iter().all(|b| b.shape() == [s])
            && self.v_if.shape() == [l, s]
            && self.v_ii.shape() == [l, l]
            && self.b_i.shape() == [l];
        if !ok {
            return Err(Error::dim(format!(
                "grid params do not match sigma {s}, linear {l}, input {in_dim}, {c} copies"
            )));
        }
        Ok(())
    }
}

impl Parameterized for GridDirParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (c, ((w, v), b)) in self.w_f.iter().zip(&self.v_f).zip(&self.b_f).enumerate() {
            push(out, prefix, &format!("w_f.{c}"), ParamKind::Weight, w);
            push(out, prefix, &format!("v_f.{c}"), ParamKind::Weight, v);
            push(out, prefix, &format!("b_f.{c}"), ParamKind::Bias, b);
        }
        push(out, prefix, "v_if", ParamKind::Weight, &self.v_if);
        push(out, prefix, "v_ii", ParamKind::Weight, &self.v_ii);
        push(out, prefix, "b_i", ParamKind::Bias, &self.b_i);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (c, ((w, v), b)) in self
            .w_f
            .iter_mut()
            .zip(self.v_f.iter_mut())
            .zip(self.b_f.iter_mut())
            .enumerate()
        {
            push_mut(out, prefix, &format!("w_f.{c}"), ParamKind::Weight, w);
            push_mut(out, prefix, &format!("v_f.{c}"), ParamKind::Weight, v);
            push_mut(out, prefix, &format!("b_f.{c}"), ParamKind::Bias, b);
        }
        push_mut(out, prefix, "v_if", ParamKind::Weight, &mut self.v_if);
        push_mut(out, prefix, "v_ii", ParamKind::Weight, &mut self.v_ii);
        push_mut(out, prefix, "b_i", ParamKind::Bias, &mut self.b_i);
    }
}

#[derive(Debug, Clone)]
pub struct GridCache {
    input: Grid,
    hf: Vec<Tensor>,
    hi: Vec<Tensor>,
}

impl GridCache {
    pub fn sigma_state(&self, t: usize, k: usize) -> &Tensor {
        &self.hf[t * self.input.n_freq + k]
    }

    pub fn linear_state(&self, t: usize, k: usize) -> &Tensor {
        &self.hi[t * self.input.n_freq + k]
    }
}

/// One linear-RNN update: `V_IF · hf_prev_freq + V_II · hi_prev_time + b_I`.
pub fn linear_update(p: &GridDirParams, hf_prev_freq: Option<&Tensor>, hi_prev_time: Option<&Tensor>, batch: usize) -> Tensor {
    let mut hi = Tensor::zeros(&[batch, p.b_i.len()]);
    add_bias(&mut hi, &p.b_i);
    if let Some(h) = hf_prev_freq {
        lin_acc(h, &p.v_if, &mut hi);
    }
    if let Some(h) = hi_prev_time {
        lin_acc(h, &p.v_ii, &mut hi);
    }
    hi
}

pub(crate) fn forward_cached(grid: &Grid, cfg: &GridRnnConfig, p: &GridDirParams) -> Result<(Vec<Tensor>, GridCache)> {
    p.check(cfg, grid.cell_dim())?;
    if grid.n_freq() != cfg.n_freq_bins() {
        return Err(Error::Input(format!(
            "grid has {} frequency bins, config expects {}",
            grid.n_freq(),
            cfg.n_freq_bins()
        )));
    }
    let (tn, kn, b) = (grid.n_time(), grid.n_freq(), grid.batch());
    let mut hf: Vec<Tensor> = Vec::with_capacity(tn * kn);
    let mut hi: Vec<Tensor> = Vec::with_capacity(tn * kn);
    for t in 0..tn {
        for k in 0..kn {
            let idx = t * kn + k;
            let c = p.copy_index(k);
            let mut f = Tensor::zeros(&[b, cfg.sigma_width]);
            add_bias(&mut f, &p.b_f[c]);
            lin_acc(grid.cell(t, k), &p.w_f[c], &mut f);
            if k > 0 {
                lin_acc(&hi[idx - 1], &p.v_f[c], &mut f);
            }
            sigmoid_in_place(&mut f);
            let i = linear_update(
                p,
                (k > 0).then(|| &hf[idx - 1]),
                (t > 0).then(|| &hi[idx - kn]),
                b,
            );
            hf.push(f);
            hi.push(i);
        }
    }
    let out = (0..tn)
        .map(|t| Tensor::concat_cols(&hf[t * kn..(t + 1) * kn].iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        out,
        GridCache {
            input: grid.clone(),
            hf,
            hi,
        },
    ))
}

/// Runs one grid direction; returns per-time-bin outputs `[B, K·σ]` and the
/// cache for [`grid_rnn_backward`].
pub fn grid_rnn_forward(grid: &Grid, cfg: &GridRnnConfig, p: &GridDirParams) -> Result<(Vec<Tensor>, GridCache)> {
    forward_cached(grid, cfg, p)
}

pub fn grid_rnn_backward(
    cfg: &GridRnnConfig,
    p: &GridDirParams,
    cache: &GridCache,
    grad_bins: &[Tensor],
) -> Result<GridDirParams> {
    let mut acc = GridDirParams::zeros(cfg, cache.input.cell_dim() / cfg.freq_bin_size);
    backward_acc(cfg, p, cache, grad_bins, &mut acc)?;
    Ok(acc)
}

pub(crate) fn backward_acc(
    cfg: &GridRnnConfig,
    p: &GridDirParams,
    cache: &GridCache,
    grad_bins: &[Tensor],
    acc: &mut GridDirParams,
) -> Result<()> {
    let grid = &cache.input;
    p.check(cfg, grid.cell_dim())?;
    acc.check(cfg, grid.cell_dim())?;
    let (tn, kn, b) = (grid.n_time(), grid.n_freq(), grid.batch());
    let s = cfg.sigma_width;
    if grad_bins.len() != tn || grad_bins.iter().any(|g| g.rows() != b || g.cols() != kn * s) {
        return Err(Error::usage("grid cache does not match the incoming gradients"));
    }
    let mut g_hf = Vec::with_capacity(tn * kn);
    for g in grad_bins {
        g_hf.extend(g.split_cols(&vec![s; kn])?);
    }
    let mut g_hi = vec![Tensor::zeros(&[b, cfg.linear_width]); tn * kn];

    for t in (0..tn).rev() {
        for k in (0..kn).rev() {
            let idx = t * kn + k;
            let gi = std::mem::replace(&mut g_hi[idx], Tensor::zeros(&[1, 1]));
            bias_back(&gi, &mut acc.b_i);
            if k > 0 {
                lin_back(&cache.hf[idx - 1], &p.v_if, &gi, &mut acc.v_if, Some(&mut g_hf[idx - 1]));
            }
            if t > 0 {
                lin_back(&cache.hi[idx - kn], &p.v_ii, &gi, &mut acc.v_ii, Some(&mut g_hi[idx - kn]));
            }

            let c = p.copy_index(k);
            let mut dz = std::mem::replace(&mut g_hf[idx], Tensor::zeros(&[1, 1]));
            sigmoid_grad_in_place(&mut dz, &cache.hf[idx]);
            lin_back(grid.cell(t, k), &p.w_f[c], &dz, &mut acc.w_f[c], None);
            bias_back(&dz, &mut acc.b_f[c]);
            if k > 0 {
                lin_back(&cache.hi[idx - 1], &p.v_f[c], &dz, &mut acc.v_f[c], Some(&mut g_hi[idx - 1]));
            }
        }
    }
    Ok(())
}

/// Output of the bidirectional grid at time bin `t` is
/// `forward[t] ‖ backward_pass[T-1-t]`, where the backward pass runs on the
/// doubly reversed grid.
pub fn bd_grid_rnn_forward(
    grid: &Grid,
    cfg: &GridRnnConfig,
    params_fwd: &GridDirParams,
    params_bwd: &GridDirParams,
) -> Result<Vec<Tensor>> {
    Ok(bd_forward_cached(grid, cfg, params_fwd, params_bwd)?.0)
}

pub(crate) fn bd_forward_cached(
    grid: &Grid,
    cfg: &GridRnnConfig,
    pf: &GridDirParams,
    pb: &GridDirParams,
) -> Result<(Vec<Tensor>, GridCache, GridCache)> {
    if !cfg.bidirectional {
        return Err(Error::usage("bidirectional forward on a unidirectional grid config"));
    }
    let (of, cf) = forward_cached(grid, cfg, pf)?;
    let (ob, cb) = forward_cached(&grid.reversed(), cfg, pb)?;
    let tn = grid.n_time();
    let out = (0..tn)
        .map(|t| Tensor::concat_cols(&[&of[t], &ob[tn - 1 - t]]))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, cf, cb))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bd_backward_acc(
    cfg: &GridRnnConfig,
    pf: &GridDirParams,
    pb: &GridDirParams,
    cf: &GridCache,
    cb: &GridCache,
    grad_bins: &[Tensor],
    af: &mut GridDirParams,
    ab: &mut GridDirParams,
) -> Result<()> {
    let half = cfg.n_freq_bins() * cfg.sigma_width;
    let mut gf = Vec::with_capacity(grad_bins.len());
    let mut gb = Vec::with_capacity(grad_bins.len());
    for g in grad_bins {
        let mut parts = g.split_cols(&[half, half])?;
        gb.push(parts.pop().expect("two halves"));
        gf.push(parts.pop().expect("two halves"));
    }
    gb.reverse();
    backward_acc(cfg, pf, cf, &gf, af)?;
    backward_acc(cfg, pb, cb, &gb, ab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_grad, relative_error, sigmoid_scalar};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(fd: bool, bd: bool) -> GridRnnConfig {
        GridRnnConfig {
            freq_bin_size: 2,
            freq_bin_starts: vec![0, 1, 2],
            sigma_width: 3,
            linear_width: 4,
            frequency_dependent: fd,
            bidirectional: bd,
        }
    }

    fn random_grid(tn: usize, kn: usize, b: usize, d: usize, rng: &mut ChaCha8Rng) -> Grid {
        Grid::new(tn, kn, (0..tn * kn).map(|_| Tensor::uniform(&[b, d], 1.0, rng)).collect()).unwrap()
    }

    fn randomize(p: &mut GridDirParams, rng: &mut ChaCha8Rng) {
        for r in p.param_muts() {
            for v in r.tensor.data_mut() {
                *v = rand::Rng::random_range(rng, -0.8..0.8);
            }
        }
    }

    #[test]
    fn missing_cell_is_input_error() {
        let cells = vec![Tensor::zeros(&[1, 2]); 3];
        assert!(matches!(Grid::new(2, 2, cells), Err(Error::Input(_))));
        let mut cells = vec![Tensor::zeros(&[1, 2]); 4];
        cells[3] = Tensor::zeros(&[1, 3]);
        assert!(matches!(Grid::new(2, 2, cells), Err(Error::Input(_))));
    }

    #[test]
    fn recurrence_ablation_is_per_cell_affine_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for fd in [false, true] {
            let cfg = tiny_cfg(fd, false);
            let mut p = GridDirParams::init(&cfg, 1, &mut rng);
            randomize(&mut p, &mut rng);
            for v in &mut p.v_f {
                v.fill(0.0);
            }
            p.v_if.fill(0.0);
            p.v_ii.fill(0.0);
            p.b_i.fill(0.0);
            let grid = random_grid(4, 3, 2, 2, &mut rng);
            let (out, _) = grid_rnn_forward(&grid, &cfg, &p).unwrap();
            for t in 0..4 {
                for k in 0..3 {
                    let c = if fd { k } else { 0 };
                    let mut expect = crate::numerics::affine_forward(
                        grid.cell(t, k),
                        &crate::numerics::AffineParams::new(p.w_f[c].clone(), p.b_f[c].clone()).unwrap(),
                    )
                    .unwrap();
                    sigmoid_in_place(&mut expect);
                    let got = out[t].split_cols(&[3, 3, 3]).unwrap().remove(k);
                    assert_eq!(got, expect);
                }
            }
        }
    }

    #[test]
    fn zero_input_zero_bias_first_bins_are_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_cfg(true, false);
        let p = GridDirParams::init(&cfg, 1, &mut rng);
        let grid = Grid::new(3, 3, vec![Tensor::zeros(&[1, 2]); 9]).unwrap();
        let (_, cache) = grid_rnn_forward(&grid, &cfg, &p).unwrap();
        for t in 0..3 {
            // hI[t,0] = V_II hI[t-1,0] stays zero, so the next σ-cell sees σ(0) too.
            assert_eq!(cache.linear_state(t, 0).max_abs(), 0.0);
            assert!(cache.sigma_state(t, 0).data().iter().all(|&v| v == 0.5));
            assert!(cache.sigma_state(t, 1).data().iter().all(|&v| v == 0.5));
            // hI[t,1] = V_IF·0.5 + V_II·hI[t-1,1]
            let mut expect = vec![0.0; 4];
            for (o, e) in expect.iter_mut().enumerate() {
                *e = 0.5 * p.v_if.row(o).iter().sum::<f64>();
                if t > 0 {
                    *e += dot(p.v_ii.row(o), cache.linear_state(t - 1, 1).data());
                }
            }
            for (a, b) in cache.linear_state(t, 1).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    fn mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
        (0..w.rows()).map(|o| (0..x.len()).map(|i| w.at(&[o, i]) * x[i]).sum()).collect()
    }

    fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    fn sig(a: &[f64]) -> Vec<f64> {
        a.iter().map(|&v| sigmoid_scalar(v)).collect()
    }

    #[test]
    fn hand_unrolled_two_by_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GridRnnConfig {
            freq_bin_size: 1,
            freq_bin_starts: vec![0, 1],
            sigma_width: 2,
            linear_width: 2,
            frequency_dependent: true,
            bidirectional: false,
        };
        let mut p = GridDirParams::init(&cfg, 2, &mut rng);
        randomize(&mut p, &mut rng);
        let grid = random_grid(2, 2, 1, 2, &mut rng);
        let x = |t, k| grid.cell(t, k).data().to_vec();
        let b = |v: &Tensor| v.data().to_vec();

        let hf00 = sig(&add(&mv(&p.w_f[0], &x(0, 0)), &b(&p.b_f[0])));
        let hi00 = b(&p.b_i);
        let hf01 = sig(&add(&add(&mv(&p.w_f[1], &x(0, 1)), &mv(&p.v_f[1], &hi00)), &b(&p.b_f[1])));
        let _hi01 = add(&mv(&p.v_if, &hf00), &b(&p.b_i));
        let hf10 = sig(&add(&mv(&p.w_f[0], &x(1, 0)), &b(&p.b_f[0])));
        let hi10 = add(&mv(&p.v_ii, &hi00), &b(&p.b_i));
        let hf11 = sig(&add(&add(&mv(&p.w_f[1], &x(1, 1)), &mv(&p.v_f[1], &hi10)), &b(&p.b_f[1])));

        let (out, _) = grid_rnn_forward(&grid, &cfg, &p).unwrap();
        let expect0: Vec<f64> = hf00.iter().chain(&hf01).copied().collect();
        let expect1: Vec<f64> = hf10.iter().chain(&hf11).copied().collect();
        for (a, e) in out[0].data().iter().zip(&expect0).chain(out[1].data().iter().zip(&expect1)) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    fn grad_check(cfg: &GridRnnConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pf = GridDirParams::init(cfg, 1, &mut rng);
        let pb = GridDirParams::init(cfg, 1, &mut rng);
        let grid = random_grid(3, 3, 2, 2, &mut rng);
        let width = 3 * cfg.sigma_width * if cfg.bidirectional { 2 } else { 1 };
        let probes: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[2, width], 1.0, &mut rng)).collect();
        let loss = |pf: &GridDirParams, pb: &GridDirParams| -> f64 {
            let out = if cfg.bidirectional {
                bd_grid_rnn_forward(&grid, cfg, pf, pb).unwrap()
            } else {
                grid_rnn_forward(&grid, cfg, pf).unwrap().0
            };
            out.iter().zip(&probes).map(|(o, p)| dot(o.data(), p.data())).sum()
        };
        let (mut af, mut ab) = (GridDirParams::zeros(cfg, 1), GridDirParams::zeros(cfg, 1));
        if cfg.bidirectional {
            let (_, cf, cb) = bd_forward_cached(&grid, cfg, &pf, &pb).unwrap();
            bd_backward_acc(cfg, &pf, &pb, &cf, &cb, &probes, &mut af, &mut ab).unwrap();
        } else {
            let (_, cf) = forward_cached(&grid, cfg, &pf).unwrap();
            backward_acc(cfg, &pf, &cf, &probes, &mut af).unwrap();
        }
        let dirs: Vec<(usize, &GridDirParams)> = if cfg.bidirectional { vec![(0, &af), (1, &ab)] } else { vec![(0, &af)] };
        for (dir, analytic) in dirs {
            let refs = analytic.param_refs();
            for (bi, r) in refs.iter().enumerate() {
                let base = if dir == 0 { pf.param_refs()[bi].tensor.clone() } else { pb.param_refs()[bi].tensor.clone() };
                let num = finite_diff_grad(
                    |t| {
                        let (mut qf, mut qb) = (pf.clone(), pb.clone());
                        let target = if dir == 0 { &mut qf } else { &mut qb };
                        *target.param_muts()[bi].tensor = t.clone();
                        loss(&qf, &qb)
                    },
                    &base,
                    1e-5,
                )
                .unwrap();
                let err = relative_error(r.tensor.data(), num.data());
                assert!(err < 1e-4, "dir {dir} {}: {err}", r.name);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3 {
            grad_check(&tiny_cfg(false, false), seed);
            grad_check(&tiny_cfg(true, false), seed);
            grad_check(&tiny_cfg(true, true), seed);
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_cfg(true, false);
        let p = GridDirParams::init(&cfg, 1, &mut rng);
        let grid = random_grid(2, 3, 2, 2, &mut rng);
        let (out, cache) = grid_rnn_forward(&grid, &cfg, &p).unwrap();
        let zeros: Vec<Tensor> = out.iter().map(|o| Tensor::zeros(o.shape())).collect();
        let g = grid_rnn_backward(&cfg, &p, &cache, &zeros).unwrap();
        assert!(g.param_refs().iter().all(|r| r.tensor.max_abs() == 0.0));
    }

    #[test]
    fn tied_fd_matches_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shared_cfg = tiny_cfg(false, false);
        let fd_cfg = tiny_cfg(true, false);
        let shared = GridDirParams::init(&shared_cfg, 1, &mut rng);
        let tied = shared.untied(3);
        let grid = random_grid(3, 3, 2, 2, &mut rng);
        let (a, ca) = grid_rnn_forward(&grid, &shared_cfg, &shared).unwrap();
        let (b, cb) = grid_rnn_forward(&grid, &fd_cfg, &tied).unwrap();
        assert_eq!(a, b);

        let probes: Vec<Tensor> = a.iter().map(|o| Tensor::uniform(o.shape(), 1.0, &mut rng)).collect();
        let gs = grid_rnn_backward(&shared_cfg, &shared, &ca, &probes).unwrap();
        let gf = grid_rnn_backward(&fd_cfg, &tied, &cb, &probes).unwrap();
        for (s, f) in [(&gs.w_f, &gf.w_f), (&gs.v_f, &gf.v_f), (&gs.b_f, &gf.b_f)] {
            let mut sum = f[0].clone();
            for t in &f[1..] {
                sum.add_assign(t).unwrap();
            }
            assert!(sum.max_abs_diff(&s[0]) < 1e-12);
        }
        assert!(gs.v_ii.max_abs_diff(&gf.v_ii) < 1e-12);
    }

    #[test]
    fn bidirectional_symmetric_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny_cfg(true, true);
        let p = GridDirParams::init(&cfg, 1, &mut rng);
        // Grid symmetric under reversal of both axes.
        let mut grid = random_grid(3, 3, 2, 2, &mut rng);
        for t in 0..3 {
            for k in 0..3 {
                let mirror = grid.cell(2 - t, 2 - k).clone();
                if t * 3 + k > (2 - t) * 3 + (2 - k) {
                    *grid.cell_mut(t, k) = mirror;
                }
            }
        }
        assert_eq!(grid.reversed(), grid);
        let out = bd_grid_rnn_forward(&grid, &cfg, &p, &p).unwrap();
        assert_eq!(out[0].cols(), 2 * 3 * 3);
        for t in 0..3 {
            let here = out[t].split_cols(&[9, 9]).unwrap();
            let there = out[2 - t].split_cols(&[9, 9]).unwrap();
            assert_eq!(here[1], there[0]);
        }
    }

    #[test]
    fn bidirectional_swap_under_reversal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = tiny_cfg(true, true);
        let pf = GridDirParams::init(&cfg, 1, &mut rng);
        let pb = GridDirParams::init(&cfg, 1, &mut rng);
        let grid = random_grid(4, 3, 2, 2, &mut rng);
        let a = bd_grid_rnn_forward(&grid, &cfg, &pf, &pb).unwrap();
        let b = bd_grid_rnn_forward(&grid.reversed(), &cfg, &pb, &pf).unwrap();
        for t in 0..4 {
            let ha = a[t].split_cols(&[9, 9]).unwrap();
            let hb = b[3 - t].split_cols(&[9, 9]).unwrap();
            assert_eq!(ha[0], hb[1]);
            assert_eq!(ha[1], hb[0]);
        }
    }

    #[test]
    fn linear_rnn_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny_cfg(false, false);
        let p = GridDirParams::init(&cfg, 1, &mut rng);
        let hf = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let a = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let (alpha, beta) = (0.3, -1.7);
        let mut comb = a.clone();
        comb.scale(alpha);
        comb.axpy(beta, &b).unwrap();
        // f(αa + βb) = α f(a) + β f(b) + (1 - α - β) f(0)
        let lhs = linear_update(&p, Some(&hf), Some(&comb), 2);
        let mut rhs = linear_update(&p, Some(&hf), Some(&a), 2);
        rhs.scale(alpha);
        rhs.axpy(beta, &linear_update(&p, Some(&hf), Some(&b), 2)).unwrap();
        rhs.axpy(1.0 - alpha - beta, &linear_update(&p, Some(&hf), None, 2)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn param_counts() {
        let geom = WindowGeometry::default();
        let base = GridRnnConfig::default();
        assert_eq!(grid_param_count(&base, geom.context), 137_750 + 375_500);
        let bdfd = GridRnnConfig { frequency_dependent: true, bidirectional: true, ..base.clone() };
        assert_eq!(grid_param_count(&bdfd, geom.context), 2 * (5 * 137_750 + 375_500));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for cfg in [tiny_cfg(false, false), tiny_cfg(true, false), tiny_cfg(true, true)] {
            let stored: usize = GridDirParams::init(&cfg, 5, &mut rng).scalar_count()
                * if cfg.bidirectional { 2 } else { 1 };
            assert_eq!(stored, grid_param_count(&cfg, 5));
            let wider = GridRnnConfig { sigma_width: cfg.sigma_width * 2, ..cfg.clone() };
            assert!(grid_param_count(&wider, 5) > grid_param_count(&cfg, 5));
        }
    }
}
