//! Whole-model finite-difference gradient check.
//!
//! The analytic kernel gradients are instantiation means, so they are scaled
//! back up by the instantiation count before being compared with the
//! numerical derivative of the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{finite_diff_grad, relative_error, Tensor};
use crate::params::Parameterized;
use crate::tdnn::{tdnn_backward, tdnn_forward, ModelGrads, TdnnModel};
use crate::training::cross_entropy_loss;

pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub scalars: usize,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| b.rel_err < tol)
    }

    pub fn failures(&self, tol: f64) -> Vec<&BlockReport> {
        self.blocks.iter().filter(|b| !(b.rel_err < tol)).collect()
    }
}

/// Random windows and labels for a check.
pub fn probe_batch(model: &TdnnModel, batch: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let g = &model.spec().window;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = Tensor::uniform(&[batch, g.span(), g.feat_dim], 1.5, &mut rng);
    let labels = (0..batch).map(|_| rng.random_range(0..model.spec().out_dim)).collect();
    (windows, labels)
}

/// Sum-over-instantiations gradients of the mean cross-entropy.
pub fn raw_gradients(model: &TdnnModel, windows: &Tensor, labels: &[usize]) -> Result<ModelGrads> {
    let (logits, cache) = tdnn_forward(model, windows)?;
    let (_, g) = cross_entropy_loss(&logits, labels)?;
    let mut grads = tdnn_backward(model, &cache, &g)?;
    for (k, n) in grads.kernels.iter_mut().zip(model.spec().instantiation_counts()) {
        k.scale(n as f64);
    }
    Ok(grads)
}

/// Compares every parameter block against central differences. `tamper`
/// lets tests corrupt the analytic gradients.
pub fn grad_check_model(
    model: &TdnnModel,
    windows: &Tensor,
    labels: &[usize],
    eps: f64,
    tamper: Option<&dyn Fn(&mut ModelGrads)>,
) -> Result<GradCheckReport> {
    let mut analytic = raw_gradients(model, windows, labels)?;
    if let Some(f) = tamper {
        f(&mut analytic);
    }
    let mut probe = model.clone();
    let n_blocks = model.param_refs().len();
    let mut blocks = Vec::with_capacity(n_blocks);
    for bi in 0..n_blocks {
        let original = model.param_refs()[bi].tensor.clone();
        let numeric = finite_diff_grad(
            |t| {
                *probe.params_mut()[bi].tensor = t.clone();
                match tdnn_forward(&probe, windows).and_then(|(l, _)| cross_entropy_loss(&l, labels)) {
                    Ok((loss, _)) => loss,
                    Err(_) => f64::NAN,
                }
            },
            &original,
            eps,
        )?;
        *probe.params_mut()[bi].tensor = original;
        let a = &analytic.param_refs()[bi];
        blocks.push(BlockReport {
            name: a.name.clone(),
            scalars: a.tensor.len(),
            rel_err: relative_error(a.tensor.data(), numeric.data()),
        });
    }
    Ok(GradCheckReport { blocks })
}
