//! Finite-difference checks of the analytic backward pass.
//!
//! The reference here is a separate `f64` forward pass over a flat parameter
//! vector, so it shares no arithmetic with [`crate::network`] or
//! [`crate::trainer`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BnnError, Result};
use crate::network::{ActivationKind, ForwardMode, LayerSpec, Network, NetworkConfig};
use crate::tensor::{cross_entropy, finite_diff_grad};
use crate::trainer::backward;

/// Central-difference step.
pub const FD_EPS: f64 = 1e-6;

/// Denominator floor for relative errors, so exactly-zero gradients compare
/// absolutely instead of dividing by zero.
pub const REL_FLOOR: f64 = 1e-8;

/// Cross-entropy of `x` under layers `specs` with flat parameters `params`
/// (per layer: weights row-major, then bias), evaluated in `f64`.
pub fn reference_loss(specs: &[LayerSpec], params: &[f64], x: &[f64], label: usize) -> f64 {
    let mut h = x.to_vec();
    let mut off = 0;
    for spec in specs {
        let (o, i) = (spec.out_dim, spec.in_dim);
        let w = &params[off..off + o * i];
        let b = &params[off + o * i..off + o * i + o];
        off += o * i + o;
        let z: Vec<f64> = (0..o)
            .map(|r| w[r * i..(r + 1) * i].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + b[r])
            .collect();
        h = match spec.activation {
            ActivationKind::Sigmoid => z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            ActivationKind::Identity => z,
            ActivationKind::Softmax => {
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
                return lse - z[label];
            }
            ActivationKind::BinarySigned | ActivationKind::BinaryUnsigned => {
                panic!("reference loss covers real activations only")
            }
        };
    }
    panic!("network has no softmax output")
}

pub fn flat_params(net: &Network) -> Vec<f64> {
    net.layers()
        .iter()
        .flat_map(|l| {
            l.weights()
                .as_slice()
                .iter()
                .chain(l.bias().iter())
                .map(|&v| f64::from(v))
        })
        .collect()
}

/// Worst relative error over one layer kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindError {
    pub kind: ActivationKind,
    pub max_rel_error: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub kinds: Vec<KindError>,
    pub cases: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.kinds.iter().map(|k| k.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }

    fn record(&mut self, kind: ActivationKind, err: f64, params: usize) {
        match self.kinds.iter_mut().find(|k| k.kind == kind) {
            Some(k) => {
                k.max_rel_error = k.max_rel_error.max(err);
                k.params += params;
            }
            None => self.kinds.push(KindError {
                kind,
                max_rel_error: err,
                params,
            }),
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backprop on one sample against finite differences, grouping
/// parameters by the activation of the layer that owns them.
pub fn check_sample(net: &Network, x: &[f32], label: usize, report: &mut GradCheckReport) -> Result<()> {
    if net.has_binary_activations() || net.has_binary_weights() {
        return Err(BnnError::Config("gradient check needs an all-real network".into()));
    }
    let trace = net.forward(x, ForwardMode::Train)?;
    let (_, g) = cross_entropy(trace.output(), label)?;
    let grads = backward(net, &trace, &g, 1.0)?;
    let specs = net.config().layers;
    let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let numeric = finite_diff_grad(|p| reference_loss(&specs, p, &x64, label), &flat_params(net), FD_EPS);
    let mut off = 0;
    for (spec, lg) in specs.iter().zip(&grads.layers) {
        let analytic = lg.weights.as_slice().iter().chain(lg.bias.iter());
        let n = spec.out_dim * spec.in_dim + spec.out_dim;
        let err = analytic
            .zip(&numeric[off..off + n])
            .map(|(&a, &b)| rel_error(f64::from(a), b))
            .fold(0.0, f64::max);
        report.record(spec.activation, err, n);
        off += n;
    }
    report.cases += 1;
    Ok(())
}

/// Layer shapes exercised by [`run_suite`].
fn suite_configs() -> Vec<(Vec<usize>, Vec<ActivationKind>)> {
    use ActivationKind::{Identity as I, Sigmoid as S, Softmax as D};
    vec![
        (vec![5, 3, 2], vec![S, D]),
        (vec![6, 5, 4, 3], vec![S, I, D]),
        (vec![4, 7, 6, 5, 4], vec![I, S, S, D]),
        (vec![8, 3], vec![D]),
    ]
}

/// Random all-real networks over sigmoid, identity and softmax layers,
/// several inputs per network, for each seed.
pub fn run_suite(seeds: &[u64]) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (dims, acts) in suite_configs() {
            let config = NetworkConfig::from_dims(&dims, &acts)?;
            let mut net = Network::init_random(&config, rng.random())?;
            // non-zero biases so every parameter kind is exercised away from init
            for l in 0..net.layers().len() {
                let w = net.layers()[l].weights().clone();
                let b = (0..dims[l + 1])
                    .map(|_| rng.random_range(-0.5..0.5))
                    .collect::<Vec<f32>>();
                net.set_layer_params(l, w, b.into())?;
            }
            for _ in 0..3 {
                let x: Vec<f32> = (0..dims[0]).map(|_| rng.random_range(-1.5..1.5)).collect();
                let label = rng.random_range(0..*dims.last().unwrap());
                check_sample(&net, &x, label, &mut report)?;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_over_five_seeds() {
        let report = run_suite(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(report.cases, 5 * 4 * 3);
        let kinds: Vec<_> = report.kinds.iter().map(|k| k.kind).collect();
        for k in [
            ActivationKind::Sigmoid,
            ActivationKind::Identity,
            ActivationKind::Softmax,
        ] {
            assert!(kinds.contains(&k));
        }
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn reference_loss_of_uniform_softmax_is_log_classes() {
        let spec = LayerSpec::real(2, 4, ActivationKind::Softmax);
        let loss = reference_loss(&[spec], &[0.0; 12], &[1.0, -2.0], 3);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // the numeric side of a deliberately shifted loss disagrees
        let spec = LayerSpec::real(1, 2, ActivationKind::Softmax);
        let p = [0.3, -0.2, 0.0, 0.0];
        let fd = finite_diff_grad(|q| reference_loss(&[spec], q, &[1.0], 0) + 0.1 * q[0], &p, FD_EPS);
        let exact = finite_diff_grad(|q| reference_loss(&[spec], q, &[1.0], 0), &p, FD_EPS);
        assert!(rel_error(exact[0], fd[0]) > 1e-3);
    }

    #[test]
    fn rejects_binary_networks() {
        let config =
            NetworkConfig::from_dims(&[3, 4, 2], &[ActivationKind::BinarySigned, ActivationKind::Softmax]).unwrap();
        let net = Network::init_random(&config, 0).unwrap();
        let mut r = GradCheckReport::default();
        assert!(matches!(
            check_sample(&net, &[0.0; 3], 0, &mut r),
            Err(BnnError::Config(_))
        ));
    }
}
