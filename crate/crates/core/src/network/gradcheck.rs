//! Central finite-difference verification of the backward pass.
//!
//! Each check builds a small `f64` network around one layer kind, draws
//! random parameters and inputs, and compares the analytic gradient of a
//! scalar objective with `(f(θ+h) − f(θ−h)) / 2h` for every input and
//! parameter element. Single-layer checks use `Σ r ⊙ layer(x)` with a random
//! upstream weight `r`; the loss checks use mean BCE plus the L2 penalty.
//!
//! The error of one element is `|a − n| / max(|a|, |n|)` (zero when both
//! are equal); a check reports the worst element.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, LayerSpec, Mode, Network};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
const L2_LAMBDA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Conv3x3,
    /// Same-padded variant used by the VGG-16-shaped builder.
    Conv3x3Same,
    MaxPool2x2,
    Dense,
    Relu,
    LeakyRelu,
    Sigmoid,
    Flatten,
    Dropout,
    /// Mean BCE plus L2 penalty through a dense-sigmoid head.
    BceL2,
    /// Small conv/pool/dense stack end to end under BCE plus L2.
    Network,
}

impl CheckKind {
    pub const ALL: [CheckKind; 11] = [
        CheckKind::Conv3x3,
        CheckKind::Conv3x3Same,
        CheckKind::MaxPool2x2,
        CheckKind::Dense,
        CheckKind::Relu,
        CheckKind::LeakyRelu,
        CheckKind::Sigmoid,
        CheckKind::Flatten,
        CheckKind::Dropout,
        CheckKind::BceL2,
        CheckKind::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Conv3x3 => "conv3x3",
            CheckKind::Conv3x3Same => "conv3x3_same",
            CheckKind::MaxPool2x2 => "maxpool2x2",
            CheckKind::Dense => "dense",
            CheckKind::Relu => "relu",
            CheckKind::LeakyRelu => "leaky_relu",
            CheckKind::Sigmoid => "sigmoid",
            CheckKind::Flatten => "flatten",
            CheckKind::Dropout => "dropout",
            CheckKind::BceL2 => "bce_l2",
            CheckKind::Network => "network",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub kind: CheckKind,
    pub seed: u64,
    /// Number of gradient elements compared.
    pub elements: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    /// Worst error and pass flag per kind, in suite order.
    pub fn by_kind(&self) -> Vec<(CheckKind, usize, f64, bool)> {
        CheckKind::ALL
            .iter()
            .filter_map(|&kind| {
                let rows: Vec<_> = self.results.iter().filter(|r| r.kind == kind).collect();
                (!rows.is_empty()).then(|| {
                    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
                    (kind, rows.len(), worst, rows.iter().all(|r| r.passed()))
                })
            })
            .collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (kind, seeds, worst, ok) in self.by_kind() {
            writeln!(
                f,
                "{:<13} seeds={seeds:<3} max_rel_error={worst:.3e} {}",
                kind.name(),
                if ok { "PASS" } else { "FAIL" }
            )?;
        }
        write!(f, "overall {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic == numeric {
        0.0
    } else {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Random values at least 0.05 away from zero, so no perturbation crosses a kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, rng).map(|v| v.signum() * (0.05 + v.abs()))
}

/// Distinct values on a 0.05 grid in shuffled order, so pooling windows never tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    values.shuffle(rng);
    Tensor::from_vec(shape, values).expect("valid shape")
}

enum Objective {
    /// `Σ r ⊙ output`
    Weighted(Tensor<f64>),
    /// BCE + L2 against labels.
    Loss(Tensor<f64>),
}

struct Setup {
    net: Network<f64>,
    input: Tensor<f64>,
    objective: Objective,
    /// Seed of the dropout stream; reused for every evaluation so masks match.
    dropout_seed: Option<u64>,
}

impl Setup {
    fn eval(&self, input: &Tensor<f64>) -> f64 {
        let pass = match self.dropout_seed {
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                self.net.forward(input, Mode::Train(&mut rng))
            }
            None => self.net.forward(input, Mode::Eval),
        }
        .expect("check shapes are consistent");
        match &self.objective {
            Objective::Weighted(r) => pass.output().data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
            Objective::Loss(labels) => self.net.loss(pass.output(), labels, L2_LAMBDA).expect("labels valid"),
        }
    }

    /// Analytic gradients: (input gradient if available, parameter gradients).
    fn analytic(&mut self) -> (Option<Tensor<f64>>, Vec<Tensor<f64>>) {
        let pass = match self.dropout_seed {
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                self.net.forward(&self.input, Mode::Train(&mut rng))
            }
            None => self.net.forward(&self.input, Mode::Eval),
        }
        .expect("check shapes are consistent");
        let dx = match &self.objective {
            Objective::Weighted(r) => {
                self.net.zero_grads();
                self.net.backprop(&pass, r.clone(), true).expect("backprop")
            }
            Objective::Loss(labels) => {
                self.net.backward(&pass, labels, L2_LAMBDA).expect("backward");
                None
            }
        };
        (dx, self.net.grads().to_vec())
    }
}

fn single_layer(input_shape: &[usize], layer: LayerSpec, input: Tensor<f64>, rng: &mut ChaCha8Rng) -> Setup {
    let mut net = Network::new(input_shape, vec![layer]).expect("check layer fits");
    for p in net.params_mut() {
        *p = uniform(p.shape(), rng);
    }
    let mut out_shape = vec![input.shape()[0]];
    out_shape.extend_from_slice(net.output_shape());
    let r = uniform(&out_shape, rng);
    Setup {
        net,
        input,
        objective: Objective::Weighted(r),
        dropout_seed: None,
    }
}

fn setup(kind: CheckKind, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164_6368_6b00);
    match kind {
        CheckKind::Conv3x3 | CheckKind::Conv3x3Same => {
            let pad = usize::from(kind == CheckKind::Conv3x3Same);
            let x = uniform(&[2, 2, 5, 5], &mut rng);
            single_layer(&[2, 5, 5], LayerSpec::Conv3x3 { out_channels: 3, pad }, x, &mut rng)
        }
        CheckKind::MaxPool2x2 => {
            let x = distinct(&[2, 2, 5, 6], &mut rng);
            single_layer(&[2, 5, 6], LayerSpec::MaxPool2x2, x, &mut rng)
        }
        CheckKind::Dense => {
            let x = uniform(&[3, 4], &mut rng);
            single_layer(&[4], LayerSpec::Dense { out_units: 3 }, x, &mut rng)
        }
        CheckKind::Relu => {
            let x = away_from_zero(&[2, 7], &mut rng);
            single_layer(&[7], LayerSpec::Activation(Activation::Relu), x, &mut rng)
        }
        CheckKind::LeakyRelu => {
            let x = away_from_zero(&[2, 7], &mut rng);
            single_layer(&[7], LayerSpec::Activation(Activation::LeakyRelu { alpha: 0.1 }), x, &mut rng)
        }
        CheckKind::Sigmoid => {
            let x = uniform(&[2, 7], &mut rng).map(|v| 3.0 * v);
            single_layer(&[7], LayerSpec::Activation(Activation::Sigmoid), x, &mut rng)
        }
        CheckKind::Flatten => {
            let x = uniform(&[2, 2, 3, 3], &mut rng);
            single_layer(&[2, 3, 3], LayerSpec::Flatten, x, &mut rng)
        }
        CheckKind::Dropout => {
            let x = uniform(&[2, 9], &mut rng);
            let mut s = single_layer(&[9], LayerSpec::Dropout { rate: 0.5 }, x, &mut rng);
            s.dropout_seed = Some(rng.random());
            s
        }
        CheckKind::BceL2 => {
            let mut net = super::build_logistic_head::<f64>(5);
            for p in net.params_mut() {
                *p = uniform(p.shape(), &mut rng);
            }
            let input = uniform(&[4, 5], &mut rng);
            let labels = Tensor::from_vec(&[4, 1], vec![0.0, 1.0, 1.0, 0.0]).expect("labels");
            Setup {
                net,
                input,
                objective: Objective::Loss(labels),
                dropout_seed: None,
            }
        }
        CheckKind::Network => {
            let mut net = Network::new(
                &[2, 8, 8],
                vec![
                    LayerSpec::Conv3x3 { out_channels: 3, pad: 0 },
                    LayerSpec::Activation(Activation::LeakyRelu { alpha: 0.1 }),
                    LayerSpec::MaxPool2x2,
                    LayerSpec::Conv3x3 { out_channels: 2, pad: 1 },
                    LayerSpec::Activation(Activation::Relu),
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out_units: 4 },
                    LayerSpec::Activation(Activation::Relu),
                    LayerSpec::Dense { out_units: 1 },
                    LayerSpec::Activation(Activation::Sigmoid),
                ],
            )
            .expect("check network fits");
            for p in net.params_mut() {
                *p = uniform(p.shape(), &mut rng).map(|v| 0.5 * v);
            }
            let input = uniform(&[3, 2, 8, 8], &mut rng);
            let labels = Tensor::from_vec(&[3, 1], vec![1.0, 0.0, 1.0]).expect("labels");
            Setup {
                net,
                input,
                objective: Objective::Loss(labels),
                dropout_seed: None,
            }
        }
    }
}

/// Runs one finite-difference check.
pub fn check(kind: CheckKind, seed: u64) -> CheckResult {
    let mut s = setup(kind, seed);
    let (dx, dparams) = s.analytic();
    let mut worst: f64 = 0.0;
    let mut elements = 0;

    if let Some(dx) = dx {
        let mut probe = s.input.clone();
        for i in 0..probe.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let plus = s.eval(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let minus = s.eval(&probe);
            probe.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(dx.data()[i], numeric));
            elements += 1;
        }
    }

    let input = s.input.clone();
    for (p, grad) in dparams.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = s.net.params()[p].data()[j];
            s.net.params_mut()[p].data_mut()[j] = orig + FD_STEP;
            let plus = s.eval(&input);
            s.net.params_mut()[p].data_mut()[j] = orig - FD_STEP;
            let minus = s.eval(&input);
            s.net.params_mut()[p].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            elements += 1;
        }
    }

    CheckResult {
        kind,
        seed,
        elements,
        max_rel_error: worst,
    }
}

/// Every kind at seeds `base_seed .. base_seed + seeds_per_kind`.
pub fn run_suite(base_seed: u64, seeds_per_kind: usize) -> GradcheckReport {
    let mut results = Vec::with_capacity(CheckKind::ALL.len() * seeds_per_kind);
    for kind in CheckKind::ALL {
        for k in 0..seeds_per_kind as u64 {
            results.push(check(kind, base_seed.wrapping_add(k)));
        }
    }
    GradcheckReport { results }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_kind_passes_on_one_seed() {
        for kind in CheckKind::ALL {
            let r = check(kind, 1);
            assert!(r.elements > 0, "{kind:?} compared nothing");
            assert!(r.passed(), "{kind:?}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Feeding the wrong upstream gradient must show up as a large error.
        let mut s = setup(CheckKind::Dense, 3);
        let (_, grads) = s.analytic();
        let input = s.input.clone();
        let orig = s.net.params()[0].data()[0];
        s.net.params_mut()[0].data_mut()[0] = orig + FD_STEP;
        let plus = s.eval(&input);
        s.net.params_mut()[0].data_mut()[0] = orig - FD_STEP;
        let minus = s.eval(&input);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        assert!(relative_error(grads[0].data()[0] * 1.01, numeric) > TOLERANCE);
    }

    #[test]
    fn suite_is_deterministic() {
        assert_eq!(run_suite(7, 2), run_suite(7, 2));
    }
}
