//! Sub-sampled TDNN.
//!
//! Kernel 1 is applied to `n_bins` shifted contexts of the input window, the
//! outputs are combined pairwise by kernels 2..=L following `tree_pairing`, and
//! an affine output layer turns the root into logits. Every kernel location
//! owns one parameter set shared by all of its instantiations; its gradient is
//! the mean over those instantiations.
//!
//! Front-end gradients are left as plain sums.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontends::{frontend_backward, frontend_forward, FrontendCache, FrontendParams, FrontendSpec};
use crate::kernels::{
    kernel_backward_acc, kernel_forward, kernel_param_count, KernelCache, KernelConfig, KernelKind, KernelParams,
};
use crate::numerics::{affine_backward_acc, affine_forward, AffineParams, Tensor};
use crate::params::{join, ParamKind, ParamMut, ParamRef, Parameterized};

/// Input window and first-layer sub-sampling, in frames relative to the
/// centre frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowGeometry {
    pub left: i32,
    pub right: i32,
    pub context: usize,
    pub shift: usize,
    pub feat_dim: usize,
}

impl Default for WindowGeometry {
    fn default() -> Self {
        Self { left: -13, right: 9, context: 5, shift: 3, feat_dim: 40 }
    }
}

impl WindowGeometry {
    /// Frames per window.
    pub fn span(&self) -> usize {
        (self.right - self.left + 1).max(0) as usize
    }

    /// Window positions where kernel 1 is instantiated.
    pub fn bin_starts(&self) -> Vec<usize> {
        if self.shift == 0 || self.context == 0 || self.context > self.span() {
            return Vec::new();
        }
        (0..=self.span() - self.context).step_by(self.shift).collect()
    }

    pub fn n_bins(&self) -> usize {
        self.bin_starts().len()
    }

    /// Frame offsets (relative to the centre) read by each instantiation.
    pub fn bin_offsets(&self) -> Vec<(i32, i32)> {
        self.bin_starts()
            .into_iter()
            .map(|s| {
                let a = self.left + s as i32;
                (a, a + self.context as i32 - 1)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.left > 0 || self.right < 0 {
            return Err(Error::spec(format!(
                "window [{}, {}] must contain the centre frame",
                self.left, self.right
            )));
        }
        if self.context == 0 || self.shift == 0 || self.feat_dim == 0 {
            return Err(Error::spec("context, shift and feat_dim must be positive"));
        }
        if self.context > self.span() {
            return Err(Error::spec(format!(
                "context {} exceeds window span {}",
                self.context,
                self.span()
            )));
        }
        if (self.span() - self.context) % self.shift != 0 {
            return Err(Error::spec(format!(
                "span {} minus context {} is not a multiple of shift {}",
                self.span(),
                self.context,
                self.shift
            )));
        }
        Ok(())
    }

    /// Edge-padded window around frame `t` of a `[T, feat_dim]` sequence,
    /// written to `out` (`span * feat_dim` values).
    pub fn fill_window(&self, frames: &[f64], n_frames: usize, t: usize, out: &mut [f64]) {
        let f = self.feat_dim;
        debug_assert_eq!(frames.len(), n_frames * f);
        debug_assert_eq!(out.len(), self.span() * f);
        let last = n_frames as i64 - 1;
        for (j, dst) in out.chunks_exact_mut(f).enumerate() {
            let src = (t as i64 + self.left as i64 + j as i64).clamp(0, last) as usize;
            dst.copy_from_slice(&frames[src * f..(src + 1) * f]);
        }
    }

    /// All windows of a sequence: `[T, span, feat_dim]`.
    pub fn windows(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.rank() != 2 || frames.cols() != self.feat_dim || frames.rows() == 0 {
            return Err(Error::dim(format!(
                "frames {:?} are not [T, {}] with T >= 1",
                frames.shape(),
                self.feat_dim
            )));
        }
        let (n, w) = (frames.rows(), self.span() * self.feat_dim);
        let mut data = vec![0.0; n * w];
        for (t, out) in data.chunks_exact_mut(w).enumerate() {
            self.fill_window(frames.data(), n, t, out);
        }
        Tensor::new(vec![n, self.span(), self.feat_dim], data)
    }
}

/// Default combination tree for 7 bins: (0,1),(2,3),(4,5),(5,6) → (0,1),(2,3) → (0,1).
pub fn default_tree_pairing() -> Vec<Vec<[usize; 2]>> {
    vec![vec![[0, 1], [2, 3], [4, 5], [5, 6]], vec![[0, 1], [2, 3]], vec![[0, 1]]]
}

/// Complete architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct TdnnSpec {
    pub window: WindowGeometry,
    /// One pairing list per combination layer.
    pub tree_pairing: Vec<Vec<[usize; 2]>>,
    /// Kernel kinds, kernel 1 first; one more than the number of combination layers.
    pub kernels: Vec<KernelKind>,
    pub width: usize,
    pub frontend: FrontendSpec,
    pub out_dim: usize,
}

impl TdnnSpec {
    /// Full-size geometry with a kernel kind per location.
    pub fn new(kernels: [KernelKind; 4], width: usize, frontend: FrontendSpec, out_dim: usize) -> Self {
        Self {
            window: WindowGeometry::default(),
            tree_pairing: default_tree_pairing(),
            kernels: kernels.to_vec(),
            width,
            frontend,
            out_dim,
        }
    }

    /// Reports the first violated constraint.
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.width == 0 || self.out_dim == 0 {
            return Err(Error::spec("width and out_dim must be positive"));
        }
        if self.kernels.len() != self.tree_pairing.len() + 1 {
            return Err(Error::spec(format!(
                "{} kernels given for {} combination layers (need {})",
                self.kernels.len(),
                self.tree_pairing.len(),
                self.tree_pairing.len() + 1
            )));
        }
        for k in &self.kernels {
            if let KernelKind::DeepStack(0) = k {
                return Err(Error::spec("deep_stack needs at least one layer"));
            }
        }
        let mut nodes = self.window.n_bins();
        for (l, level) in self.tree_pairing.iter().enumerate() {
            if level.is_empty() {
                return Err(Error::spec(format!("combination layer {} is empty", l + 2)));
            }
            let mut used = vec![false; nodes];
            for &[a, b] in level {
                if a >= nodes || b >= nodes {
                    return Err(Error::spec(format!(
                        "combination layer {} pairs ({a},{b}) but only {nodes} inputs exist",
                        l + 2
                    )));
                }
                used[a] = true;
                used[b] = true;
            }
            if let Some(i) = used.iter().position(|u| !u) {
                return Err(Error::spec(format!("combination layer {} never reads input {i}", l + 2)));
            }
            nodes = level.len();
        }
        if nodes != 1 {
            return Err(Error::spec(format!("tree ends with {nodes} nodes instead of 1")));
        }
        self.frontend.validate(&self.window)
    }

    /// Input dimension of kernel 1.
    pub fn kernel1_in_dim(&self) -> usize {
        self.frontend.output_dim(&self.window)
    }

    pub fn kernel_configs(&self) -> Vec<KernelConfig> {
        self.kernels
            .iter()
            .enumerate()
            .map(|(i, &kind)| KernelConfig {
                kind,
                in_dim: if i == 0 { self.kernel1_in_dim() } else { 2 * self.width },
                width: self.width,
            })
            .collect()
    }

    /// Instantiations per kernel location, kernel 1 first.
    pub fn instantiation_counts(&self) -> Vec<usize> {
        std::iter::once(self.window.n_bins())
            .chain(self.tree_pairing.iter().map(Vec::len))
            .collect()
    }

    pub fn frontend_param_count(&self) -> usize {
        self.frontend.param_count(&self.window)
    }

    pub fn kernel_param_counts(&self) -> Vec<usize> {
        self.kernel_configs().iter().map(kernel_param_count).collect()
    }

    pub fn output_param_count(&self) -> usize {
        self.width * self.out_dim + self.out_dim
    }

    /// Closed-form total scalar count.
    pub fn param_count(&self) -> usize {
        self.frontend_param_count() + self.kernel_param_counts().iter().sum::<usize>() + self.output_param_count()
    }

    /// FC layers on the longest path, output layer included.
    pub fn layer_depth(&self) -> usize {
        self.kernels.iter().map(|k| k.layer_count()).sum::<usize>() + 1
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// A spec bound to parameters.
///
/// Every mutable access bumps a version counter; caches remember the model
/// and version they came from, and backward refuses a cache that no longer
/// matches.
#[derive(Debug)]
pub struct TdnnModel {
    spec: TdnnSpec,
    configs: Vec<KernelConfig>,
    frontend: FrontendParams,
    kernels: Vec<KernelParams>,
    output: AffineParams,
    id: u64,
    version: u64,
}

impl Clone for TdnnModel {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            configs: self.configs.clone(),
            frontend: self.frontend.clone(),
            kernels: self.kernels.clone(),
            output: self.output.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for TdnnModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.frontend == other.frontend
            && self.kernels == other.kernels
            && self.output == other.output
    }
}

/// Deterministic initialization from `seed`.
pub fn build_tdnn(spec: &TdnnSpec, seed: u64) -> Result<TdnnModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs = spec.kernel_configs();
    let frontend = spec.frontend.init_params(&spec.window, &mut rng);
    let kernels = configs.iter().map(|c| KernelParams::init(c, &mut rng)).collect();
    let output = AffineParams::glorot(spec.width, spec.out_dim, &mut rng);
    Ok(TdnnModel {
        spec: spec.clone(),
        configs,
        frontend,
        kernels,
        output,
        id: fresh_id(),
        version: 0,
    })
}

impl TdnnModel {
    pub fn spec(&self) -> &TdnnSpec {
        &self.spec
    }

    pub fn kernel_configs(&self) -> &[KernelConfig] {
        &self.configs
    }

    pub fn frontend_params(&self) -> &FrontendParams {
        &self.frontend
    }

    pub fn kernel_params(&self) -> &[KernelParams] {
        &self.kernels
    }

    pub fn output_params(&self) -> &AffineParams {
        &self.output
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn frontend_params_mut(&mut self) -> &mut FrontendParams {
        self.version += 1;
        &mut self.frontend
    }

    pub fn kernel_params_mut(&mut self, i: usize) -> &mut KernelParams {
        self.version += 1;
        &mut self.kernels[i]
    }

    pub fn output_params_mut(&mut self) -> &mut AffineParams {
        self.version += 1;
        &mut self.output
    }

    /// Named mutable view of every tensor; counts as a mutation.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.version += 1;
        self.param_muts()
    }

    /// Stored scalar count.
    pub fn param_count(&self) -> usize {
        self.scalar_count()
    }

    pub fn layer_depth(&self) -> usize {
        self.spec.layer_depth()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            frontend: self.spec.frontend.zero_params(&self.spec.window),
            kernels: self.configs.iter().map(KernelParams::zeros).collect(),
            output: self.output.zeros_like(),
        }
    }

    /// `p ← p − lr·(g + λ·p)`, with the decay term on weights only.
    pub fn sgd_step(&mut self, grads: &ModelGrads, lr: f64, l2_lambda: f64) -> Result<()> {
        let gs = grads.param_refs();
        let mut ps = self.params_mut();
        if gs.len() != ps.len() {
            return Err(Error::dim("gradient blocks do not match model parameters"));
        }
        for (p, g) in ps.iter_mut().zip(&gs) {
            if p.tensor.shape() != g.tensor.shape() {
                return Err(Error::dim(format!("gradient block {} has the wrong shape", g.name)));
            }
            let decay = if p.kind == ParamKind::Weight { l2_lambda } else { 0.0 };
            for (w, d) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
                *w -= lr * (d + decay * *w);
            }
        }
        Ok(())
    }
}

fn visit_model<'a>(
    frontend: &'a FrontendParams,
    kernels: &'a [KernelParams],
    output: &'a AffineParams,
    prefix: &str,
    out: &mut Vec<ParamRef<'a>>,
) {
    frontend.visit(&join(prefix, "frontend"), out);
    for (i, k) in kernels.iter().enumerate() {
        k.visit(&join(prefix, &format!("kernel{}", i + 1)), out);
    }
    output.visit(&join(prefix, "output"), out);
}

fn visit_model_mut<'a>(
    frontend: &'a mut FrontendParams,
    kernels: &'a mut [KernelParams],
    output: &'a mut AffineParams,
    prefix: &str,
    out: &mut Vec<ParamMut<'a>>,
) {
    frontend.visit_mut(&join(prefix, "frontend"), out);
    for (i, k) in kernels.iter_mut().enumerate() {
        k.visit_mut(&join(prefix, &format!("kernel{}", i + 1)), out);
    }
    output.visit_mut(&join(prefix, "output"), out);
}

impl Parameterized for TdnnModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        visit_model(&self.frontend, &self.kernels, &self.output, prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.version += 1;
        visit_model_mut(&mut self.frontend, &mut self.kernels, &mut self.output, prefix, out);
    }
}

/// Gradients laid out like the model's parameters (same names, same order).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub frontend: FrontendParams,
    pub kernels: Vec<KernelParams>,
    pub output: AffineParams,
}

impl Parameterized for ModelGrads {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        visit_model(&self.frontend, &self.kernels, &self.output, prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        visit_model_mut(&mut self.frontend, &mut self.kernels, &mut self.output, prefix, out);
    }
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        let theirs = other.param_refs();
        let mut mine = self.param_muts();
        if theirs.len() != mine.len() {
            return Err(Error::dim("gradient layouts differ"));
        }
        for (a, b) in mine.iter_mut().zip(&theirs) {
            a.tensor.add_assign(b.tensor)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.param_muts() {
            p.tensor.scale(s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.param_refs().iter().map(|p| p.tensor.max_abs()).fold(0.0, f64::max)
    }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct TdnnCache {
    model_id: u64,
    version: u64,
    batch: usize,
    frontend: FrontendCache,
    /// `levels[l][i]`: cache of instantiation `i` of kernel `l + 1`.
    levels: Vec<Vec<KernelCache>>,
    root: Tensor,
}

impl TdnnCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Logits `[B, out_dim]` for windows `[B, span, feat_dim]`.
pub fn tdnn_forward(m: &TdnnModel, windows: &Tensor) -> Result<(Tensor, TdnnCache)> {
    let spec = &m.spec;
    let (bins, frontend_cache) = frontend_forward(&spec.frontend, &m.frontend, windows, &spec.window)?;
    let mut levels = Vec::with_capacity(m.kernels.len());
    let mut nodes = Vec::with_capacity(bins.len());
    let mut caches = Vec::with_capacity(bins.len());
    for x in &bins {
        let (y, c) = kernel_forward(&m.configs[0], &m.kernels[0], x)?;
        nodes.push(y);
        caches.push(c);
    }
    levels.push(caches);
    for (l, level) in spec.tree_pairing.iter().enumerate() {
        let mut next = Vec::with_capacity(level.len());
        let mut caches = Vec::with_capacity(level.len());
        for &[a, b] in level {
            let x = Tensor::concat_cols(&[&nodes[a], &nodes[b]])?;
            let (y, c) = kernel_forward(&m.configs[l + 1], &m.kernels[l + 1], &x)?;
            next.push(y);
            caches.push(c);
        }
        levels.push(caches);
        nodes = next;
    }
    let root = nodes.pop().expect("validated tree has a root");
    let logits = affine_forward(&root, &m.output)?;
    Ok((
        logits,
        TdnnCache {
            model_id: m.id,
            version: m.version,
            batch: windows.rows(),
            frontend: frontend_cache,
            levels,
            root,
        },
    ))
}

/// Normalized model gradients for `grad_logits`.
pub fn tdnn_backward(m: &TdnnModel, cache: &TdnnCache, grad_logits: &Tensor) -> Result<ModelGrads> {
    backward_impl(m, cache, grad_logits, None)
}

/// Per-instantiation kernel gradients (`[location][instantiation]`, before
/// normalization) alongside the normal result.
pub fn tdnn_backward_instrumented(
    m: &TdnnModel,
    cache: &TdnnCache,
    grad_logits: &Tensor,
) -> Result<(ModelGrads, Vec<Vec<KernelParams>>)> {
    let mut per = Vec::new();
    let g = backward_impl(m, cache, grad_logits, Some(&mut per))?;
    Ok((g, per))
}

fn backward_impl(
    m: &TdnnModel,
    cache: &TdnnCache,
    grad_logits: &Tensor,
    mut record: Option<&mut Vec<Vec<KernelParams>>>,
) -> Result<ModelGrads> {
    if cache.model_id != m.id || cache.version != m.version {
        return Err(Error::usage(
            "forward cache is stale: the model was modified or replaced after the forward pass",
        ));
    }
    if grad_logits.rank() != 2 || grad_logits.rows() != cache.batch || grad_logits.cols() != m.spec.out_dim {
        return Err(Error::usage(format!(
            "grad_logits {:?} does not match cached batch [{}, {}]",
            grad_logits.shape(),
            cache.batch,
            m.spec.out_dim
        )));
    }
    let spec = &m.spec;
    let mut grads = m.zero_grads();
    let g_root = affine_backward_acc(&cache.root, &m.output, grad_logits, &mut grads.output, true)?
        .expect("requested");
    let n_loc = m.kernels.len();
    if let Some(r) = record.as_deref_mut() {
        *r = vec![Vec::new(); n_loc];
    }
    let need_input_grad = !matches!(spec.frontend, FrontendSpec::None);
    let mut g_nodes = vec![g_root];
    for l in (0..n_loc).rev() {
        let cfg = &m.configs[l];
        let insts = &cache.levels[l];
        let n_in = if l == 0 { 0 } else { cache.levels[l - 1].len() };
        let mut g_prev: Vec<Option<Tensor>> = vec![None; n_in];
        let mut g_bins = Vec::new();
        for (i, kc) in insts.iter().enumerate() {
            let want_x = l > 0 || need_input_grad;
            let gx = match record.as_deref_mut() {
                Some(r) => {
                    let mut one = KernelParams::zeros(cfg);
                    let gx = kernel_backward_acc(cfg, &m.kernels[l], kc, &g_nodes[i], &mut one, want_x)?;
                    grads.kernels[l].add_assign(&one)?;
                    r[l].push(one);
                    gx
                }
                None => kernel_backward_acc(cfg, &m.kernels[l], kc, &g_nodes[i], &mut grads.kernels[l], want_x)?,
            };
            if l == 0 {
                if let Some(gx) = gx {
                    g_bins.push(gx);
                }
                continue;
            }
            let gx = gx.expect("requested");
            let [a, b] = spec.tree_pairing[l - 1][i];
            let mut halves = gx.split_cols(&[spec.width, spec.width])?.into_iter();
            for (dst, part) in [a, b].into_iter().zip(halves.by_ref()) {
                match &mut g_prev[dst] {
                    Some(t) => t.add_assign(&part)?,
                    slot => *slot = Some(part),
                }
            }
        }
        grads.kernels[l].scale(1.0 / insts.len() as f64);
        if l == 0 {
            if need_input_grad {
                frontend_backward(&spec.frontend, &m.frontend, &cache.frontend, &g_bins, &mut grads.frontend)?;
            }
        } else {
            g_nodes = g_prev
                .into_iter()
                .map(|g| g.ok_or_else(|| Error::usage("tree node without a consumer")))
                .collect::<Result<_>>()?;
        }
    }
    Ok(grads)
}
