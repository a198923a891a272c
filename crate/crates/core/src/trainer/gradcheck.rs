//! Central finite-difference check of the analytic gradients, run in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::backprop::backward;
use super::loss::mean_cross_entropy;
use crate::dataset::ClassVectorSet;
use crate::error::Result;
use crate::network::{
    Activation, ArchConfig, ForwardMode, ForwardTrace, Model, ParamId, ParamKind,
};

/// Pre-activations closer than this multiple of `eps` to the ReLU kink
/// exclude the perturbed parameter from the comparison.
pub const KINK_MARGIN: f64 = 10.0;
const REL_FLOOR: f64 = 1e-8;
const BATCH: usize = 4;
const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub checked: usize,
    pub excluded: usize,
    /// Tensor name and flat index of the worst parameter.
    pub worst: Option<(String, usize)>,
}

/// The smallest model the default layer structure allows: a 6 → 4 reducer
/// and an 8 → 5 → 3 trunk over 3 classes.
pub fn tiny_arch(seed: u64) -> ArchConfig {
    ArchConfig {
        image_dim: 6,
        text_dim: 4,
        reducer_widths: vec![4],
        trunk_hidden: vec![5],
        semantic_dim: 3,
        semantic_activation: Activation::Relu,
        reducer_dropout: 0.3,
        trunk_dropout: 0.2,
        reducer_batchnorm: true,
        trainable_output: false,
        seed,
    }
}

/// Everything random about one check: class vectors, inputs, targets, and
/// non-trivial biases and batchnorm parameters.
pub struct GradCheckProblem {
    pub model: Model<f64>,
    pub images: Vec<f64>,
    pub texts: Vec<f64>,
    pub targets: Vec<usize>,
}

impl GradCheckProblem {
    pub fn random(config: &ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let cv = ClassVectorSet::from_records(
            config.semantic_dim,
            (0..CLASSES).map(|c| {
                let v: Vec<f32> = (0..config.semantic_dim).map(|_| normal() as f32).collect();
                (format!("c{c}"), v)
            }),
        )?;
        let arch = ArchConfig {
            seed,
            ..config.clone()
        };
        let mut model: Model<f64> = Model::<f32>::init(&cv, cv.labels(), &arch)?.cast();
        for id in model.all_params() {
            let ParamId::Layer { kind, .. } = id else {
                continue;
            };
            if kind == ParamKind::Weight {
                continue;
            }
            for v in model.param_mut(id) {
                let z = normal();
                *v = match kind {
                    ParamKind::Gamma => 1.0 + 0.3 * z,
                    ParamKind::RunningVar => 0.5 + z.abs(),
                    _ => 0.3 * z,
                };
            }
        }
        let images = (0..BATCH * arch.image_dim).map(|_| normal()).collect();
        let texts = (0..BATCH * arch.text_dim).map(|_| normal()).collect();
        let targets = (0..BATCH).map(|i| i % CLASSES).collect();
        Ok(Self {
            model,
            images,
            texts,
            targets,
        })
    }
}

fn relu_pre_activations<'a>(
    model: &'a Model<f64>,
    trace: &'a ForwardTrace<f64>,
) -> impl Iterator<Item = f64> + 'a {
    let layers = model.reducer.iter().chain(&model.trunk);
    let traces = trace.reducer.iter().chain(&trace.trunk);
    layers
        .zip(traces)
        .filter(|(l, _)| l.spec.activation == Activation::Relu)
        .flat_map(|(_, t)| t.pre_activation.iter().copied())
}

/// Compares analytic and central-difference gradients of the batch-mean loss
/// for every trainable parameter. Dropout is off; batchnorm uses running
/// statistics unless `batch_stats` is set.
pub fn check_problem(
    problem: &GradCheckProblem,
    eps: f64,
    batch_stats: bool,
) -> Result<GradCheckReport> {
    let GradCheckProblem {
        model,
        images,
        texts,
        targets,
    } = problem;
    let batch = targets.len();
    let c = model.num_classes();
    let run = |m: &Model<f64>| -> Result<ForwardTrace<f64>> {
        let mut mode = ForwardMode {
            batch_stats,
            dropout: None,
        };
        m.forward_batch(images, texts, batch, &mut mode)
    };

    let base = run(model)?;
    let analytic = backward(model, &base, targets)?;
    let base_signs: Vec<bool> = relu_pre_activations(model, &base)
        .map(|u| u > 0.0)
        .collect();
    let near_kink = |m: &Model<f64>, t: &ForwardTrace<f64>| {
        relu_pre_activations(m, t)
            .zip(&base_signs)
            .any(|(u, &s)| u.abs() < KINK_MARGIN * eps || (u > 0.0) != s)
    };

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        checked: 0,
        excluded: 0,
        worst: None,
    };
    for (id, grad) in &analytic.entries {
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe.param(*id)[j];
            probe.param_mut(*id)[j] = orig + eps;
            let plus = run(&probe)?;
            probe.param_mut(*id)[j] = orig - eps;
            let minus = run(&probe)?;
            probe.param_mut(*id)[j] = orig;

            if near_kink(&probe, &plus) || near_kink(&probe, &minus) {
                report.excluded += 1;
                continue;
            }
            let lp = mean_cross_entropy(&plus.probs, targets, c)?;
            let lm = mean_cross_entropy(&minus.probs, targets, c)?;
            let numeric = (lp - lm) / (2.0 * eps);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((id.name(), j));
            }
        }
    }
    Ok(report)
}

/// Builds a random problem for `model_config` and checks it; returns the
/// worst relative error `|a−n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(model_config: &ArchConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let problem = GradCheckProblem::random(model_config, seed)?;
    check_problem(&problem, eps, false)
}
