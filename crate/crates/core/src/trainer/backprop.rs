use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{self, Real};
use crate::network::{
    Activation, Dense, ForwardTrace, LayerTrace, Model, ParamId, ParamKind, Section,
};

/// Gradients for every trainable tensor, in [`Model::trainable_params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub entries: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.entries
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            entries: model
                .trainable_params()
                .into_iter()
                .map(|id| (id, vec![T::zero(); model.param(id).len()]))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .fold(0.0, |m, v| m.max(v.f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

/// `∂L/∂logits` for the batch-mean cross-entropy: `(probs − onehot) / batch`.
pub fn logit_gradient<T: Real>(probs: &[T], targets: &[usize], classes: usize) -> Vec<T> {
    let scale = T::of(1.0 / targets.len() as f64);
    let mut d = probs.to_vec();
    for (row, &t) in d.chunks_exact_mut(classes).zip(targets) {
        row[t] = row[t] - T::one();
        row.iter_mut().for_each(|v| *v = *v * scale);
    }
    d
}

struct LayerGrads<T> {
    weight: Vec<T>,
    bias: Vec<T>,
    bn: Option<(Vec<T>, Vec<T>)>,
    input: Option<Vec<T>>,
}

fn dense_backward<T: Real>(
    layer: &Dense<T>,
    trace: &LayerTrace<T>,
    mut d: Vec<T>,
    batch: usize,
    need_input: bool,
) -> LayerGrads<T> {
    let (in_dim, out) = (layer.spec.in_dim, layer.spec.out_dim);
    if let Some(mask) = &trace.mask {
        for (v, &m) in d.iter_mut().zip(mask) {
            *v = *v * m;
        }
    }
    match layer.spec.activation {
        Activation::Relu => {
            for (v, &u) in d.iter_mut().zip(&trace.pre_activation) {
                if u <= T::zero() {
                    *v = T::zero();
                }
            }
        }
        Activation::Linear => {}
        Activation::Softmax => unreachable!("softmax is only used at the output"),
    }

    let mut bn_grads = None;
    if let (Some(bn), Some(bt)) = (&layer.batchnorm, &trace.bn) {
        let mut dgamma = vec![0f64; out];
        let mut dbeta = vec![0f64; out];
        for (drow, xrow) in d.chunks_exact(out).zip(bt.normalized.chunks_exact(out)) {
            for j in 0..out {
                dgamma[j] += drow[j].f64() * xrow[j].f64();
                dbeta[j] += drow[j].f64();
            }
        }
        // dx̂ = dU·γ
        for row in d.chunks_exact_mut(out) {
            for (v, &g) in row.iter_mut().zip(&bn.gamma) {
                *v = *v * g;
            }
        }
        if bt.batch_stats {
            let mut sum = vec![0f64; out];
            let mut sum_x = vec![0f64; out];
            for (drow, xrow) in d.chunks_exact(out).zip(bt.normalized.chunks_exact(out)) {
                for j in 0..out {
                    sum[j] += drow[j].f64();
                    sum_x[j] += drow[j].f64() * xrow[j].f64();
                }
            }
            let b = batch as f64;
            for (drow, xrow) in d.chunks_exact_mut(out).zip(bt.normalized.chunks_exact(out)) {
                for j in 0..out {
                    let v = (b * drow[j].f64() - sum[j] - xrow[j].f64() * sum_x[j])
                        * bt.inv_std[j].f64()
                        / b;
                    drow[j] = T::of(v);
                }
            }
        } else {
            for row in d.chunks_exact_mut(out) {
                for (v, &s) in row.iter_mut().zip(&bt.inv_std) {
                    *v = *v * s;
                }
            }
        }
        let conv = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
        bn_grads = Some((conv(dgamma), conv(dbeta)));
    }

    let weight = linalg::matmul_at(&trace.input, &d, batch, in_dim, out);
    let bias = linalg::column_sums(&d, batch, out);
    let input = need_input.then(|| linalg::matmul_bt(&d, &layer.weight, batch, out, in_dim));
    LayerGrads {
        weight,
        bias,
        bn: bn_grads,
        input,
    }
}

/// Backpropagates the batch-mean cross-entropy through a training trace.
pub fn backward<T: Real>(
    model: &Model<T>,
    trace: &ForwardTrace<T>,
    targets: &[usize],
) -> Result<Gradients<T>> {
    let batch = trace.batch;
    let c = model.num_classes();
    if trace.reducer.len() != model.reducer.len()
        || trace.trunk.len() != model.trunk.len()
        || trace.probs.len() != batch * c
    {
        return Err(Error::Internal("trace does not match model".into()));
    }
    if targets.len() != batch || targets.iter().any(|&t| t >= c) {
        return Err(Error::arg("targets do not match the traced batch"));
    }

    let mut grads: HashMap<ParamId, Vec<T>> = HashMap::new();
    let d_logits = logit_gradient(&trace.probs, targets, c);
    let sem = model.semantic_dim();
    if model.config.trainable_output {
        grads.insert(
            ParamId::Output,
            linalg::matmul_at(trace.semantic(), &d_logits, batch, sem, c),
        );
    }
    let mut d = linalg::matmul_bt(&d_logits, &model.output_weights, batch, c, sem);

    let mut store = |section: Section, index: usize, g: LayerGrads<T>| -> Option<Vec<T>> {
        let id = |kind| ParamId::Layer {
            section,
            index,
            kind,
        };
        grads.insert(id(ParamKind::Weight), g.weight);
        grads.insert(id(ParamKind::Bias), g.bias);
        if let Some((gamma, beta)) = g.bn {
            grads.insert(id(ParamKind::Gamma), gamma);
            grads.insert(id(ParamKind::Beta), beta);
        }
        g.input
    };

    let has_reducer = !model.reducer.is_empty();
    for i in (0..model.trunk.len()).rev() {
        let need_input = i > 0 || has_reducer;
        let g = dense_backward(&model.trunk[i], &trace.trunk[i], d, batch, need_input);
        d = store(Section::Trunk, i, g).unwrap_or_default();
    }
    if has_reducer {
        // Keep only the reduced-visual part of the fused input gradient.
        let r = model.config.reduced_dim();
        let fused = model.config.trunk_input_dim();
        d = d
            .chunks_exact(fused)
            .flat_map(|row| row[..r].iter().copied())
            .collect();
        for i in (0..model.reducer.len()).rev() {
            let g = dense_backward(&model.reducer[i], &trace.reducer[i], d, batch, i > 0);
            d = store(Section::Reducer, i, g).unwrap_or_default();
        }
    }

    let entries = model
        .trainable_params()
        .into_iter()
        .map(|id| {
            let g = grads
                .remove(&id)
                .ok_or_else(|| Error::Internal(format!("no gradient for {}", id.name())))?;
            Ok((id, g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradients { entries })
}

/// `w ← w − lr·g` for every trainable tensor. Nothing is modified if any
/// gradient component is non-finite.
pub fn sgd_step<T: Real>(model: &mut Model<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    let ids = model.trainable_params();
    if ids.len() != grads.entries.len()
        || ids
            .iter()
            .zip(&grads.entries)
            .any(|(id, (gid, g))| id != gid || g.len() != model.param(*id).len())
    {
        return Err(Error::Internal("gradient shapes do not match model".into()));
    }
    if let Some((id, _)) = grads
        .entries
        .iter()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric(format!(
            "non-finite gradient in {}; step aborted",
            id.name()
        )));
    }
    let lr = T::of(lr);
    for (id, g) in &grads.entries {
        for (w, &gv) in model.param_mut(*id).iter_mut().zip(g) {
            *w = *w - lr * gv;
        }
    }
    Ok(())
}
