//! Cross-entropy frame classification with L2 decay, shuffled minibatches,
//! plain SGD and a NewBob learning-rate schedule.
//!
//! Minibatches are evaluated in fixed chunks of [`CHUNK_FRAMES`] frames whose
//! gradients are reduced in chunk order, so results do not depend on the
//! number of worker threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{ParamKind, Parameterized};
use crate::tdnn::{tdnn_backward, tdnn_forward, ModelGrads, TdnnModel};

pub const CHUNK_FRAMES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub ramp_threshold: f64,
    pub stop_threshold: f64,
    pub halving_factor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { ramp_threshold: 0.005, stop_threshold: 0.001, halving_factor: 0.5 }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stop_threshold >= 0.0 && self.stop_threshold <= self.ramp_threshold) {
            return Err(Error::Config(format!(
                "need 0 <= stop_threshold <= ramp_threshold, got {} and {}",
                self.stop_threshold, self.ramp_threshold
            )));
        }
        if !(self.halving_factor > 0.0 && self.halving_factor < 1.0) {
            return Err(Error::Config(format!("halving_factor must be in (0, 1), got {}", self.halving_factor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub minibatch_frames: usize,
    pub l2_lambda: f64,
    pub scheduler: SchedulerConfig,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 2e-3,
            minibatch_frames: 800,
            l2_lambda: 1e-5,
            scheduler: SchedulerConfig::default(),
            max_epochs: 20,
            seed: 0,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.minibatch_frames == 0 {
            return Err(Error::Config("minibatch_frames must be at least 1".into()));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::Config("l2_lambda must be non-negative".into()));
        }
        self.scheduler.validate()
    }
}

/// Mean cross-entropy of `logits` and its gradient `(softmax − onehot) / B`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (sum, grad) = cross_entropy_sum(logits, labels, labels.len().max(1) as f64)?;
    Ok((sum / labels.len().max(1) as f64, grad))
}

/// Summed cross-entropy, gradient divided by `denom`.
fn cross_entropy_sum(logits: &Tensor, labels: &[usize], denom: f64) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::dim(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let c = logits.cols();
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Input(format!("label {y} outside [0, {c})")));
        }
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(r);
        let mut z = 0.0;
        for (gv, v) in g.iter_mut().zip(row) {
            *gv = (v - m).exp();
            z += *gv;
        }
        loss += z.ln() - (row[y] - m);
        for gv in g.iter_mut() {
            *gv /= z * denom;
        }
        g[y] -= 1.0 / denom;
    }
    Ok((loss, grad))
}

/// `λ·½·Σw²` over weights (biases excluded) and its gradient `λ·w`.
pub fn l2_penalty(model: &TdnnModel, lambda: f64) -> (f64, ModelGrads) {
    let mut grads = model.zero_grads();
    let mut sq = 0.0;
    for (p, g) in model.param_refs().iter().zip(grads.param_muts()) {
        if p.kind == ParamKind::Weight {
            sq += p.tensor.sum_squares();
            for (gv, w) in g.tensor.data_mut().iter_mut().zip(p.tensor.data()) {
                *gv = lambda * w;
            }
        }
    }
    (0.5 * lambda * sq, grads)
}

/// Frame indices of one epoch, shuffled by `(seed, epoch)` and cut into batches.
pub fn shuffle_and_batch(n_frames: usize, minibatch_frames: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_frames).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx.chunks(minibatch_frames.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Halve,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub lr: f64,
    pub ramping: bool,
    pub previous: Option<f64>,
    pub best: Option<f64>,
}

impl SchedulerState {
    pub fn new(initial_lr: f64) -> Self {
        Self { lr: initial_lr, ramping: false, previous: None, best: None }
    }
}

/// One scheduler decision from this epoch's validation loss (lower is better).
///
/// Before ramping, a relative improvement below `ramp_threshold` halves the
/// rate and starts ramping. While ramping the rate halves every epoch until
/// the improvement falls below `stop_threshold`. Comparisons are strict.
pub fn newbob_step(cfg: &SchedulerConfig, state: &mut SchedulerState, val: f64) -> Decision {
    let prev = state.previous.replace(val);
    state.best = Some(state.best.map_or(val, |b| b.min(val)));
    let Some(prev) = prev else {
        return Decision::Keep;
    };
    let improvement = (prev - val) / prev.abs().max(f64::MIN_POSITIVE);
    if state.ramping {
        if improvement < cfg.stop_threshold {
            return Decision::Stop;
        }
        state.lr *= cfg.halving_factor;
        Decision::Halve
    } else if improvement < cfg.ramp_threshold {
        state.ramping = true;
        state.lr *= cfg.halving_factor;
        Decision::Halve
    } else {
        Decision::Keep
    }
}

/// Frame-level evaluation result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

struct ChunkResult {
    loss: f64,
    correct: usize,
    grads: Option<ModelGrads>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn run_chunk(model: &TdnnModel, ds: &Dataset, idx: &[usize], denom: f64, want_grads: bool) -> Result<ChunkResult> {
    let (windows, labels) = ds.window_batch(idx, &model.spec().window)?;
    let (logits, cache) = tdnn_forward(model, &windows)?;
    let (loss, g) = cross_entropy_sum(&logits, &labels, denom)?;
    let correct = labels.iter().enumerate().filter(|&(r, &y)| argmax(logits.row(r)) == y).count();
    let grads = if want_grads { Some(tdnn_backward(model, &cache, &g)?) } else { None };
    Ok(ChunkResult { loss, correct, grads })
}

/// Runs `idx` in chunks, in parallel when `pool` is given, and reduces in order.
fn run_batch(
    model: &TdnnModel,
    ds: &Dataset,
    idx: &[usize],
    want_grads: bool,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, usize, Option<ModelGrads>)> {
    let denom = idx.len() as f64;
    let chunks: Vec<&[usize]> = idx.chunks(CHUNK_FRAMES).collect();
    let results: Vec<Result<ChunkResult>> = match pool {
        Some(p) => p.install(|| {
            chunks
                .par_iter()
                .map(|c| run_chunk(model, ds, c, denom, want_grads))
                .collect()
        }),
        None => chunks.iter().map(|c| run_chunk(model, ds, c, denom, want_grads)).collect(),
    };
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grads: Option<ModelGrads> = None;
    for r in results {
        let r = r?;
        loss += r.loss;
        correct += r.correct;
        if let Some(g) = r.grads {
            match &mut grads {
                Some(acc) => acc.add_assign(&g)?,
                None => grads = Some(g),
            }
        }
    }
    Ok((loss, correct, grads))
}

fn make_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Usage(format!("cannot start {threads} worker threads: {e}")))
}

/// Mean cross-entropy and frame accuracy over a dataset.
pub fn evaluate(model: &TdnnModel, ds: &Dataset, threads: usize) -> Result<EvalReport> {
    let pool = make_pool(threads)?;
    let n = ds.n_frames();
    if n == 0 {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    if ds.n_labels() > model.spec().out_dim {
        return Err(Error::dim(format!(
            "data has labels up to {} but the model has {} outputs",
            ds.n_labels() - 1,
            model.spec().out_dim
        )));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let all: Vec<usize> = (0..n).collect();
    for batch in all.chunks(8 * CHUNK_FRAMES) {
        let (l, c, _) = run_batch(model, ds, batch, false, pool.as_ref())?;
        loss += l;
        correct += c;
    }
    Ok(EvalReport { frames: n, mean_loss: loss / n as f64, accuracy: correct as f64 / n as f64 })
}

/// One line of training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Resumable progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub scheduler: SchedulerState,
    pub finished: bool,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { epoch: 0, scheduler: SchedulerState::new(cfg.initial_lr), finished: false }
    }
}

/// Trains from `state` until the scheduler stops, the target accuracy is met,
/// or `max_epochs` is reached. `on_epoch` sees the model after each epoch.
pub fn train_with<F>(
    model: &mut TdnnModel,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    threads: usize,
    state: &mut TrainState,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&TdnnModel, &EpochRecord, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    if train_ds.n_frames() == 0 || val_ds.n_frames() == 0 {
        return Err(Error::Input("training and validation data must be non-empty".into()));
    }
    let out_dim = model.spec().out_dim;
    for (name, ds) in [("training", train_ds), ("validation", val_ds)] {
        if ds.n_labels() > out_dim {
            return Err(Error::dim(format!(
                "{name} data has labels up to {} but the model has {out_dim} outputs",
                ds.n_labels() - 1
            )));
        }
    }
    let pool = make_pool(threads)?;
    let mut history = Vec::new();
    while !state.finished && state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let lr = state.scheduler.lr;
        let mut loss_sum = 0.0;
        for (b, idx) in shuffle_and_batch(train_ds.n_frames(), cfg.minibatch_frames, cfg.seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let (loss, _, grads) = run_batch(model, train_ds, idx, true, pool.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {}, lr {lr:e}",
                    b + 1
                )));
            }
            loss_sum += loss;
            model.sgd_step(&grads.expect("gradients requested"), lr, cfg.l2_lambda)?;
        }
        let val = evaluate(model, val_ds, threads)?;
        if !val.mean_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss after epoch {epoch}, lr {lr:e}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_ds.n_frames() as f64,
            val_loss: val.mean_loss,
            val_acc: val.accuracy,
            lr,
        };
        let decision = newbob_step(&cfg.scheduler, &mut state.scheduler, val.mean_loss);
        state.epoch = epoch;
        let reached = cfg.target_accuracy.is_some_and(|t| val.accuracy >= t);
        if decision == Decision::Stop || reached {
            state.finished = true;
        }
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loss {:.5} val_acc {:.4} lr {lr:e} ({decision:?})",
            record.train_loss,
            record.val_loss,
            record.val_acc
        );
        history.push(record);
        on_epoch(model, &record, state)?;
    }
    Ok(history)
}

/// Fresh single-threaded training run.
pub fn train(
    mut model: TdnnModel,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TdnnModel, Vec<EpochRecord>)> {
    let mut state = TrainState::new(cfg);
    let history = train_with(&mut model, train_ds, val_ds, cfg, 1, &mut state, |_, _, _| Ok(()))?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontends::FrontendSpec;
    use crate::kernels::KernelKind;
    use crate::numerics::{finite_diff_grad, relative_error};
    use crate::tdnn::{build_tdnn, TdnnSpec};

    #[test]
    fn uniform_logits() {
        let (l, _) = cross_entropy_loss(&Tensor::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits() {
        let logits = Tensor::from_rows(&[[1000.0, 0.0, -5.0]]).unwrap();
        let (l, g) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!(l.abs() < 1e-300 && g.all_finite());
        assert!(matches!(cross_entropy_loss(&logits, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::uniform(&[3, 5], 2.0, &mut rng);
        let labels = [4, 0, 2];
        let (_, g) = cross_entropy_loss(&logits, &labels).unwrap();
        let num = finite_diff_grad(|t| cross_entropy_loss(t, &labels).unwrap().0, &logits, 1e-5).unwrap();
        assert!(relative_error(g.data(), num.data()) < 1e-6);
    }

    fn tiny_model() -> TdnnModel {
        build_tdnn(&TdnnSpec::new([KernelKind::Standard; 4], 2, FrontendSpec::None, 3), 1).unwrap()
    }

    #[test]
    fn l2_cases() {
        let m = tiny_model();
        let (p, g) = l2_penalty(&m, 0.0);
        assert_eq!((p, g.max_abs()), (0.0, 0.0));
        let lambda = 0.1;
        let (p, g) = l2_penalty(&m, lambda);
        let mut sq = 0.0;
        for k in m.kernel_params() {
            for l in &k.layers {
                sq += l.weight.data().iter().map(|w| w * w).sum::<f64>();
            }
        }
        sq += m.output_params().weight.data().iter().map(|w| w * w).sum::<f64>();
        assert!((p - 0.5 * lambda * sq).abs() < 1e-12);
        assert_eq!(g.output.bias.max_abs(), 0.0);
        assert_eq!(g.output.weight.data()[0], lambda * m.output_params().weight.data()[0]);
    }

    #[test]
    fn scalar_l2() {
        let mut m = build_tdnn(&TdnnSpec::new([KernelKind::Standard; 4], 1, FrontendSpec::None, 1), 0).unwrap();
        for p in m.params_mut() {
            p.tensor.fill(0.0);
        }
        m.output_params_mut().weight.data_mut()[0] = 2.0;
        let (p, g) = l2_penalty(&m, 0.1);
        assert!((p - 0.2).abs() < 1e-15);
        assert!((g.output.weight.data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn batching() {
        let b = shuffle_and_batch(2000, 800, 7, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![800, 800, 400]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        assert_eq!(b, shuffle_and_batch(2000, 800, 7, 1));
        assert_ne!(b, shuffle_and_batch(2000, 800, 7, 2));
    }

    fn trace(vals: &[f64]) -> Vec<Decision> {
        let cfg = SchedulerConfig::default();
        let mut s = SchedulerState::new(1.0);
        vals.iter().map(|&v| newbob_step(&cfg, &mut s, v)).collect()
    }

    #[test]
    fn newbob_traces() {
        use Decision::*;
        let v0 = 1.0;
        let v1 = v0 * 0.9;
        let v2 = v1 * 0.92;
        let v3 = v2 * 0.997;
        assert_eq!(trace(&[v0, v1, v2, v3]), vec![Keep, Keep, Keep, Halve]);
        assert_eq!(trace(&[1.0, 1.1, 1.2]), vec![Keep, Halve, Stop]);
        // improvement exactly at the ramp threshold keeps the rate
        assert_eq!(trace(&[1.0, 0.995]), vec![Keep, Keep]);
        let mut s = SchedulerState::new(1.0);
        let cfg = SchedulerConfig::default();
        for v in [1.0, 0.999, 0.9, 0.8] {
            newbob_step(&cfg, &mut s, v);
        }
        assert_eq!(s.lr, 0.125);
    }
}
