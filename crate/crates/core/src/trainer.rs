//! Minibatch SGD over shadow weights with straight-through gradients.
//!
//! Forward and backward passes use the effective (sign-binarized) weights of
//! binary-mode layers, while updates land on the real-valued shadow copy,
//! which is then clipped back into `[-1, +1]`. Binary activations pass the
//! gradient straight through, masked to zero where `|pre-activation| > k`.
//!
//! Minibatch gradients are summed over samples, not averaged, so the
//! learning rate is a per-sample step size.

use std::borrow::Cow;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binarize::{clip_scalar, grad_mask, identity_snap_probability, semi_stochastic_round_in_place};
use crate::data::{shuffle_batches, Dataset};
use crate::error::{BnnError, Result};
use crate::network::{ActivationKind, ForwardMode, Network, Trace, UpdatePolicy};
use crate::tensor::{cross_entropy, RealMatrix, RealVector};

/// Samples per parallel work unit. Partial sums are reduced in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub initial_lr: f32,
    /// Mask threshold for binary activations.
    pub k: f32,
    /// Per-step probability of a semi-stochastic rounding pass.
    pub p: f64,
    /// Per-layer gradient-norm threshold; 0 disables clipping.
    pub alpha: f64,
    pub batch_size: usize,
    pub lr_decay: f32,
    /// Relative holdout improvement below which the learning rate decays.
    pub decay_threshold: f64,
    /// Relative holdout improvement below which training stops.
    pub halt_improvement: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Clip gradient norms even when the network is not fully binary.
    pub force_grad_clip: bool,
    /// Also clip real-mode weights into `[-1, +1]` after updates.
    pub clip_real_weights: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions::baseline()
    }
}

impl TrainOptions {
    /// Settings for training the real-valued baseline.
    pub fn baseline() -> Self {
        TrainOptions {
            initial_lr: 0.008,
            k: 1.0,
            p: 0.0,
            alpha: 15.0,
            batch_size: 256,
            lr_decay: 0.5,
            decay_threshold: 1e-3,
            halt_improvement: 1e-4,
            max_epochs: 20,
            seed: 0,
            force_grad_clip: false,
            clip_real_weights: false,
        }
    }

    /// Settings for fine-tuning a binary network from a baseline.
    pub fn binary() -> Self {
        TrainOptions {
            initial_lr: 0.001,
            ..TrainOptions::baseline()
        }
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if !self.initial_lr.is_finite() || self.initial_lr < 0.0 {
            return Err(BnnError::Config(format!(
                "learning rate must be >= 0, got {}",
                self.initial_lr
            )));
        }
        if net.has_binary_activations() && (self.k.is_nan() || self.k <= 0.0) {
            return Err(BnnError::Config(format!(
                "mask threshold k must be > 0, got {}",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(BnnError::Config(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(BnnError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(BnnError::Config("batch size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(BnnError::Config(format!(
                "lr decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

/// Gradients for one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: RealMatrix,
    pub bias: RealVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    /// Gradient with respect to the network input.
    pub input: RealVector,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: zero_layer_grads(net),
            input: RealVector::zeros(net.input_dim()),
        }
    }
}

fn zero_layer_grads(net: &Network) -> Vec<LayerGrads> {
    net.layers()
        .iter()
        .map(|l| LayerGrads {
            weights: RealMatrix::zeros(l.spec().out_dim, l.spec().in_dim),
            bias: RealVector::zeros(l.spec().out_dim),
        })
        .collect()
}

/// Backpropagates `grad_out` through a train-mode trace of `net`.
///
/// For a softmax output layer `grad_out` is the gradient with respect to the
/// logits (the fused softmax/cross-entropy gradient from
/// [`cross_entropy`]); otherwise it is the gradient with respect to the
/// output activations.
pub fn backward(net: &Network, trace: &Trace, grad_out: &[f32], k: f32) -> Result<Gradients> {
    check_trace(net, trace)?;
    if grad_out.len() != net.output_dim() {
        return Err(BnnError::Internal(format!(
            "output gradient has {} entries, network has {} outputs",
            grad_out.len(),
            net.output_dim()
        )));
    }
    let eff = net.effective_weights();
    let mut grads = Gradients::zeros_like(net);
    let mut g_input = vec![0.0f64; net.input_dim()];
    backward_accumulate(net, &eff, trace, grad_out, k, &mut grads.layers, Some(&mut g_input))?;
    grads.input = RealVector::new(g_input.into_iter().map(|v| v as f32).collect());
    Ok(grads)
}

fn check_trace(net: &Network, trace: &Trace) -> Result<()> {
    let layers = net.layers();
    if trace.pre.len() != layers.len() || trace.post.len() != layers.len() {
        return Err(BnnError::Internal(format!(
            "trace has {} layers, network has {}; backward needs a train-mode trace",
            trace.pre.len(),
            layers.len()
        )));
    }
    if trace.input.len() != net.input_dim() {
        return Err(BnnError::Internal("trace input width does not match network".into()));
    }
    for (l, layer) in layers.iter().enumerate() {
        let d = layer.spec().out_dim;
        if trace.pre[l].len() != d || trace.post[l].len() != d {
            return Err(BnnError::Internal(format!(
                "trace layer {l} width does not match network"
            )));
        }
    }
    Ok(())
}

/// Adds one sample's parameter gradients into `acc`.
fn backward_accumulate(
    net: &Network,
    eff: &[Cow<'_, RealMatrix>],
    trace: &Trace,
    grad_out: &[f32],
    k: f32,
    acc: &mut [LayerGrads],
    input_grad: Option<&mut [f64]>,
) -> Result<()> {
    let layers = net.layers();
    let last = layers.len() - 1;
    let mut g: Vec<f64> = grad_out.iter().map(|&v| f64::from(v)).collect();
    let mut input_grad = input_grad;
    for l in (0..=last).rev() {
        let spec = layers[l].spec();
        let pre = &trace.pre[l];
        // gradient with respect to the pre-activation
        match spec.activation {
            ActivationKind::Softmax if l == last => {}
            ActivationKind::Softmax => {
                return Err(BnnError::Internal(format!("softmax on hidden layer {l}")));
            }
            ActivationKind::Sigmoid => {
                for (gi, &p) in g.iter_mut().zip(pre.iter()) {
                    let s = 1.0 / (1.0 + (-f64::from(p)).exp());
                    *gi *= s * (1.0 - s);
                }
            }
            ActivationKind::BinarySigned | ActivationKind::BinaryUnsigned => {
                let mask = grad_mask(pre, k)?;
                for (gi, m) in g.iter_mut().zip(mask) {
                    *gi *= f64::from(m);
                }
            }
            ActivationKind::Identity => {}
        }

        let input = trace.layer_input(l);
        let LayerGrads { weights, bias } = &mut acc[l];
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            bias[i] += gi as f32;
            for (w, &h) in weights.row_mut(i).iter_mut().zip(input.iter()) {
                *w += (gi * f64::from(h)) as f32;
            }
        }

        let need_upstream = l > 0 || input_grad.is_some();
        if !need_upstream {
            break;
        }
        let w = &eff[l];
        let mut up = vec![0.0f64; spec.in_dim];
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            for (u, &wij) in up.iter_mut().zip(w.row(i)) {
                *u += gi * f64::from(wij);
            }
        }
        if l == 0 {
            if let Some(dst) = input_grad.take() {
                dst.copy_from_slice(&up);
            }
        }
        g = up;
    }
    Ok(())
}

/// Rescales `g` to Frobenius norm `alpha` when its norm exceeds `alpha`.
/// A non-positive `alpha` disables clipping.
pub fn clip_grad_norm(g: &RealMatrix, alpha: f64) -> RealMatrix {
    let norm = g.frobenius_norm();
    if alpha <= 0.0 || norm <= alpha {
        return g.clone();
    }
    let scale = alpha / norm;
    g.map(|v| (f64::from(v) * scale) as f32)
}

/// What one [`sgd_step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Frobenius norm of each layer's weight gradient as applied; `None` for fixed layers.
    pub applied_grad_norms: Vec<Option<f64>>,
    /// Whether the semi-stochastic rounding pass ran.
    pub rounded: bool,
}

/// One SGD update of every trainable layer.
///
/// Binary-mode layers are clipped into `[-1, +1]` after the update. Weight
/// gradients are norm-clipped first when `alpha > 0` and the network is fully
/// binary (or `force_grad_clip` is set). Afterwards a single uniform draw
/// decides, with probability `p`, whether every trainable binary-mode layer
/// gets a semi-stochastic rounding pass.
pub fn sgd_step<R: Rng + ?Sized>(
    net: &mut Network,
    grads: &Gradients,
    lr: f32,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<StepReport> {
    if grads.layers.len() != net.layers().len() {
        return Err(BnnError::Internal("gradient/network layer count mismatch".into()));
    }
    let clip_grads = opts.alpha > 0.0 && (opts.force_grad_clip || net.is_full_binary());
    let mut norms = Vec::with_capacity(grads.layers.len());
    for (l, (layer, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
        let spec = *layer.spec();
        if spec.policy == UpdatePolicy::Fixed {
            norms.push(None);
            continue;
        }
        if g.weights.rows() != spec.out_dim || g.weights.cols() != spec.in_dim || g.bias.len() != spec.out_dim {
            return Err(BnnError::Internal(format!("gradient shape mismatch at layer {l}")));
        }
        let gw = if clip_grads {
            Cow::Owned(clip_grad_norm(&g.weights, opts.alpha))
        } else {
            Cow::Borrowed(&g.weights)
        };
        norms.push(Some(gw.frobenius_norm()));
        let clip = spec.weight_mode.is_binary() || opts.clip_real_weights;
        let (w, b) = layer.params_mut();
        for (wv, &gv) in w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *wv -= lr * gv;
            if clip {
                *wv = clip_scalar(*wv);
            }
        }
        for (bv, &gv) in b.iter_mut().zip(g.bias.iter()) {
            *bv -= lr * gv;
        }
        if !w.is_finite() || !b.is_finite() {
            return Err(BnnError::NonFinite {
                epoch: 0,
                batch: 0,
                layer: l,
                what: "parameters after update".into(),
            });
        }
    }
    let mut rounded = false;
    if opts.p > 0.0 {
        let u: f64 = rng.random();
        if u < opts.p {
            rounded = true;
            for layer in net.layers_mut() {
                let spec = *layer.spec();
                if spec.policy == UpdatePolicy::Trainable && spec.weight_mode.is_binary() {
                    let (w, _) = layer.params_mut();
                    semi_stochastic_round_in_place(w, rng, identity_snap_probability);
                }
            }
        }
    }
    Ok(StepReport {
        applied_grad_norms: norms,
        rounded,
    })
}

/// Newbob-style schedule: decay on small improvement, halt on negligible improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    lr: f32,
    epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrDecision {
    pub lr: f32,
    pub halt: bool,
}

impl LrSchedule {
    pub fn new(initial_lr: f32) -> Self {
        LrSchedule {
            lr: initial_lr,
            epoch: 0,
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    /// Records one finished epoch's holdout loss against the previous one.
    pub fn step(&mut self, prev_loss: f64, new_loss: f64, opts: &TrainOptions) -> LrDecision {
        self.epoch += 1;
        let improvement = if prev_loss != 0.0 {
            (prev_loss - new_loss) / prev_loss.abs()
        } else {
            0.0
        };
        if improvement < opts.decay_threshold {
            self.lr *= opts.lr_decay;
        }
        let halt = improvement < opts.halt_improvement || self.epoch >= opts.max_epochs;
        LrDecision { lr: self.lr, halt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub holdout_acc: f64,
    pub lr: f32,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,holdout_loss,holdout_acc,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{}",
            self.epoch, self.train_loss, self.holdout_loss, self.holdout_acc, self.lr
        )
    }
}

pub fn write_csv_log<W: Write>(reports: &[EpochReport], mut out: W) -> Result<()> {
    writeln!(out, "{}", EpochReport::CSV_HEADER)?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

fn check_dataset(net: &Network, data: &Dataset, what: &str) -> Result<()> {
    if data.dim() != net.input_dim() {
        return Err(BnnError::Config(format!(
            "{what} features have dim {}, network expects {}",
            data.dim(),
            net.input_dim()
        )));
    }
    if data.num_classes() > net.output_dim() {
        return Err(BnnError::Config(format!(
            "{what} has {} classes, network has {} outputs",
            data.num_classes(),
            net.output_dim()
        )));
    }
    Ok(())
}

/// Frame accuracy and mean cross-entropy of `net` on `data`.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<Evaluation> {
    check_dataset(net, data, "dataset")?;
    if data.is_empty() {
        return Err(BnnError::Data("cannot evaluate on an empty dataset".into()));
    }
    let eff = net.effective_weights();
    let starts: Vec<usize> = (0..data.len()).step_by(256).collect();
    let parts: Vec<(usize, f64)> = starts
        .par_iter()
        .map(|&start| {
            let mut correct = 0;
            let mut loss = 0.0;
            for i in start..(start + 256).min(data.len()) {
                let trace = net.forward_with(&eff, data.row(i));
                let out = trace.output();
                if out.argmax() == data.label(i) {
                    correct += 1;
                }
                loss += cross_entropy(out, data.label(i))?.0;
            }
            Ok((correct, loss))
        })
        .collect::<Result<_>>()?;
    let (correct, loss) = parts
        .into_iter()
        .fold((0usize, 0.0f64), |(c, l), (pc, pl)| (c + pc, l + pl));
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}

fn first_non_finite_layer(trace: &Trace) -> usize {
    trace
        .pre
        .iter()
        .zip(&trace.post)
        .position(|(p, h)| !p.is_finite() || !h.is_finite())
        .unwrap_or(trace.pre.len().saturating_sub(1))
}

/// Summed gradient and summed loss over the samples `rows` of `data`.
fn batch_gradient(
    net: &Network,
    data: &Dataset,
    rows: &[usize],
    k: f32,
) -> std::result::Result<(Vec<LayerGrads>, f64), (usize, String)> {
    let eff = net.effective_weights();
    let parts: Vec<_> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = zero_layer_grads(net);
            let mut loss = 0.0f64;
            for &i in chunk {
                let trace = net.forward_with(&eff, data.row(i));
                let (l, grad) = cross_entropy(trace.output(), data.label(i))
                    .map_err(|e| (net.layers().len() - 1, e.to_string()))?;
                if !l.is_finite() || !grad.is_finite() {
                    return Err((first_non_finite_layer(&trace), format!("loss {l} on sample {i}")));
                }
                loss += l;
                backward_accumulate(net, &eff, &trace, &grad, k, &mut acc, None).map_err(|e| (0, e.to_string()))?;
            }
            Ok((acc, loss))
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut parts = parts.into_iter();
    let (mut total, mut loss) = parts.next().unwrap_or_else(|| (zero_layer_grads(net), 0.0));
    for (acc, l) in parts {
        loss += l;
        for (t, a) in total.iter_mut().zip(acc) {
            for (x, y) in t.weights.as_mut_slice().iter_mut().zip(a.weights.as_slice()) {
                *x += y;
            }
            for (x, y) in t.bias.iter_mut().zip(a.bias.iter()) {
                *x += y;
            }
        }
    }
    if let Some(l) = total.iter().position(|g| !g.weights.is_finite() || !g.bias.is_finite()) {
        return Err((l, "gradient".into()));
    }
    Ok((total, loss))
}

/// Trains `net` in place with shuffled minibatch SGD.
///
/// Emits an epoch-0 report for the starting point, then one report per
/// epoch; `on_epoch` sees each report as soon as it is available.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    holdout: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    opts.validate(net)?;
    check_dataset(net, train_set, "training set")?;
    check_dataset(net, holdout, "holdout set")?;
    if train_set.is_empty() || holdout.is_empty() {
        return Err(BnnError::Data("training and holdout sets must be non-empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(u64::MAX);
    let mut schedule = LrSchedule::new(opts.initial_lr);
    let mut reports = Vec::new();

    let start = evaluate(net, holdout)?;
    let report = EpochReport {
        epoch: 0,
        train_loss: evaluate(net, train_set)?.mean_loss,
        holdout_loss: start.mean_loss,
        holdout_acc: start.accuracy,
        lr: schedule.lr(),
    };
    on_epoch(&report);
    reports.push(report);
    let mut prev_loss = start.mean_loss;

    for epoch in 1..=opts.max_epochs {
        let lr = schedule.lr();
        let mut loss_sum = 0.0;
        for (batch_idx, batch) in shuffle_batches(train_set, opts.batch_size, opts.seed, epoch as u64)?.enumerate() {
            let (layers, loss) = batch_gradient(net, train_set, &batch.indices, opts.k).map_err(|(layer, what)| {
                BnnError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    layer,
                    what,
                }
            })?;
            loss_sum += loss;
            let grads = Gradients {
                layers,
                input: RealVector::default(),
            };
            sgd_step(net, &grads, lr, opts, &mut rng).map_err(|e| match e {
                BnnError::NonFinite { layer, what, .. } => BnnError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    layer,
                    what,
                },
                other => other,
            })?;
        }
        let eval = evaluate(net, holdout)?;
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            holdout_loss: eval.mean_loss,
            holdout_acc: eval.accuracy,
            lr,
        };
        if !report.holdout_loss.is_finite() {
            return Err(BnnError::NonFinite {
                epoch,
                batch: 0,
                layer: net.layers().len() - 1,
                what: "holdout loss".into(),
            });
        }
        on_epoch(&report);
        reports.push(report);
        let decision = schedule.step(prev_loss, eval.mean_loss, opts);
        prev_loss = eval.mean_loss;
        if decision.halt {
            break;
        }
    }
    Ok(reports)
}

/// Forward pass that keeps only the output probabilities, in train precision.
pub fn predict_probs(net: &Network, x: &[f32]) -> Result<RealVector> {
    Ok(net.forward(x, ForwardMode::Infer)?.post.pop().unwrap())
}
