use std::collections::HashSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Activation, ArchConfig, LayerSpec};
use crate::dataset::ClassVectorSet;
use crate::error::{Error, Result};
use crate::linalg::{self, Real};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub spec: LayerSpec,
    /// `[in_dim × out_dim]`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub batchnorm: Option<BatchNorm<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Section {
    Reducer,
    Trunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

/// Addresses one tensor of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    Layer {
        section: Section,
        index: usize,
        kind: ParamKind,
    },
    Output,
}

impl ParamId {
    pub fn name(&self) -> String {
        match *self {
            ParamId::Output => "output.weight".into(),
            ParamId::Layer {
                section,
                index,
                kind,
            } => {
                let s = match section {
                    Section::Reducer => "reducer",
                    Section::Trunk => "trunk",
                };
                let k = match kind {
                    ParamKind::Weight => "weight",
                    ParamKind::Bias => "bias",
                    ParamKind::Gamma => "bn.gamma",
                    ParamKind::Beta => "bn.beta",
                    ParamKind::RunningMean => "bn.running_mean",
                    ParamKind::RunningVar => "bn.running_var",
                };
                format!("{s}.{index}.{k}")
            }
        }
    }
}

/// The zero-shot network: reducer, trunk ending in the semantic layer, and
/// a class-vector output matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ArchConfig,
    pub reducer: Vec<Dense<T>>,
    pub trunk: Vec<Dense<T>>,
    /// `[semantic_dim × C]`; column `c` is the class vector of `label_order[c]`.
    pub output_weights: Vec<T>,
    pub label_order: Vec<String>,
}

fn he_uniform<T: Real>(rng: &mut ChaCha8Rng, spec: &LayerSpec) -> Dense<T> {
    let limit = (6.0 / spec.in_dim as f64).sqrt();
    let weight = (0..spec.in_dim * spec.out_dim)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect();
    let n = spec.out_dim;
    Dense {
        spec: spec.clone(),
        weight,
        bias: vec![T::zero(); n],
        batchnorm: spec.has_batchnorm.then(|| BatchNorm {
            gamma: vec![T::one(); n],
            beta: vec![T::zero(); n],
            running_mean: vec![T::zero(); n],
            running_var: vec![T::one(); n],
        }),
    }
}

/// Builds a model whose output matrix holds the class vectors of
/// `label_order` and whose trainable weights are seeded from `config.seed`.
pub fn init_model(
    cv_seen: &ClassVectorSet,
    label_order: &[String],
    config: &ArchConfig,
) -> Result<Model<f32>> {
    Model::init(cv_seen, label_order, config)
}

impl<T: Real> Model<T> {
    pub fn init(cv: &ClassVectorSet, label_order: &[String], config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        if cv.dim() != config.semantic_dim {
            return Err(Error::Config(format!(
                "class vectors have dim {}, semantic layer has {}",
                cv.dim(),
                config.semantic_dim
            )));
        }
        if label_order.is_empty() {
            return Err(Error::arg("label order is empty"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = label_order.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::arg(format!(
                "duplicate label '{dup}' in label order"
            )));
        }
        let c = label_order.len();
        let sem = config.semantic_dim;
        let mut output_weights = vec![T::zero(); sem * c];
        for (j, label) in label_order.iter().enumerate() {
            let v = cv
                .get(label)
                .ok_or_else(|| Error::arg(format!("no class vector for '{label}'")))?;
            for (i, &x) in v.iter().enumerate() {
                output_weights[i * c + j] = T::of(x as f64);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let reducer = config
            .reducer_specs()
            .iter()
            .map(|s| he_uniform(&mut rng, s))
            .collect();
        let trunk = config
            .trunk_specs()
            .iter()
            .map(|s| he_uniform(&mut rng, s))
            .collect();
        Ok(Self {
            config: config.clone(),
            reducer,
            trunk,
            output_weights,
            label_order: label_order.to_vec(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_order.len()
    }

    pub fn semantic_dim(&self) -> usize {
        self.config.semantic_dim
    }

    /// Column `c` of the output matrix.
    pub fn output_column(&self, c: usize) -> Vec<T> {
        let n = self.num_classes();
        (0..self.semantic_dim())
            .map(|i| self.output_weights[i * n + c])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        let layer = |d: &Dense<T>| Dense {
            spec: d.spec.clone(),
            weight: conv(&d.weight),
            bias: conv(&d.bias),
            batchnorm: d.batchnorm.as_ref().map(|bn| BatchNorm {
                gamma: conv(&bn.gamma),
                beta: conv(&bn.beta),
                running_mean: conv(&bn.running_mean),
                running_var: conv(&bn.running_var),
            }),
        };
        Model {
            config: self.config.clone(),
            reducer: self.reducer.iter().map(layer).collect(),
            trunk: self.trunk.iter().map(layer).collect(),
            output_weights: conv(&self.output_weights),
            label_order: self.label_order.clone(),
        }
    }

    fn layers(&self, section: Section) -> &[Dense<T>] {
        match section {
            Section::Reducer => &self.reducer,
            Section::Trunk => &self.trunk,
        }
    }

    fn collect_params(&self, trainable_only: bool) -> Vec<ParamId> {
        let mut out = Vec::new();
        for section in [Section::Reducer, Section::Trunk] {
            for (index, layer) in self.layers(section).iter().enumerate() {
                let mut kinds = vec![ParamKind::Weight, ParamKind::Bias];
                if layer.batchnorm.is_some() {
                    kinds.extend([ParamKind::Gamma, ParamKind::Beta]);
                    if !trainable_only {
                        kinds.extend([ParamKind::RunningMean, ParamKind::RunningVar]);
                    }
                }
                out.extend(kinds.into_iter().map(|kind| ParamId::Layer {
                    section,
                    index,
                    kind,
                }));
            }
        }
        if !trainable_only || self.config.trainable_output {
            out.push(ParamId::Output);
        }
        out
    }

    /// Tensors updated by SGD, in canonical order.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        self.collect_params(true)
    }

    /// Every stored tensor, in canonical order.
    pub fn all_params(&self) -> Vec<ParamId> {
        self.collect_params(false)
    }

    pub fn param_shape(&self, id: ParamId) -> Vec<usize> {
        match id {
            ParamId::Output => vec![self.semantic_dim(), self.num_classes()],
            ParamId::Layer {
                section,
                index,
                kind,
            } => {
                let spec = &self.layers(section)[index].spec;
                match kind {
                    ParamKind::Weight => vec![spec.in_dim, spec.out_dim],
                    _ => vec![spec.out_dim],
                }
            }
        }
    }

    pub fn param(&self, id: ParamId) -> &[T] {
        match id {
            ParamId::Output => &self.output_weights,
            ParamId::Layer {
                section,
                index,
                kind,
            } => {
                let layer = &self.layers(section)[index];
                let bn = || layer.batchnorm.as_ref().expect("layer has batchnorm");
                match kind {
                    ParamKind::Weight => &layer.weight,
                    ParamKind::Bias => &layer.bias,
                    ParamKind::Gamma => &bn().gamma,
                    ParamKind::Beta => &bn().beta,
                    ParamKind::RunningMean => &bn().running_mean,
                    ParamKind::RunningVar => &bn().running_var,
                }
            }
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [T] {
        match id {
            ParamId::Output => &mut self.output_weights,
            ParamId::Layer {
                section,
                index,
                kind,
            } => {
                let layer = match section {
                    Section::Reducer => &mut self.reducer[index],
                    Section::Trunk => &mut self.trunk[index],
                };
                if kind == ParamKind::Weight {
                    return &mut layer.weight;
                }
                if kind == ParamKind::Bias {
                    return &mut layer.bias;
                }
                let bn = layer.batchnorm.as_mut().expect("layer has batchnorm");
                match kind {
                    ParamKind::Gamma => &mut bn.gamma,
                    ParamKind::Beta => &mut bn.beta,
                    ParamKind::RunningMean => &mut bn.running_mean,
                    ParamKind::RunningVar => &mut bn.running_var,
                    ParamKind::Weight | ParamKind::Bias => unreachable!(),
                }
            }
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_params()
            .into_iter()
            .map(|id| self.param(id).len())
            .sum()
    }

    /// Moves batchnorm running statistics toward the batch statistics
    /// recorded in a training-mode trace.
    pub fn update_batchnorm_stats(&mut self, trace: &ForwardTrace<T>) {
        let m = BN_MOMENTUM;
        let layers = self.reducer.iter_mut().chain(self.trunk.iter_mut());
        let traces = trace.reducer.iter().chain(&trace.trunk);
        for (layer, lt) in layers.zip(traces) {
            let (Some(bn), Some(bt)) = (layer.batchnorm.as_mut(), lt.bn.as_ref()) else {
                continue;
            };
            if !bt.batch_stats {
                continue;
            }
            for (r, &b) in bn.running_mean.iter_mut().zip(&bt.mean) {
                *r = T::of((1.0 - m) * r.f64() + m * b);
            }
            for (r, &b) in bn.running_var.iter_mut().zip(&bt.var) {
                *r = T::of((1.0 - m) * r.f64() + m * b);
            }
        }
    }
}

/// How a forward pass treats batchnorm and dropout.
pub struct ForwardMode<'a> {
    /// Normalize with the batch's own statistics instead of running ones.
    pub batch_stats: bool,
    /// Source of dropout masks; `None` disables dropout.
    pub dropout: Option<&'a mut dyn RngCore>,
}

impl<'a> ForwardMode<'a> {
    pub fn inference() -> Self {
        Self {
            batch_stats: false,
            dropout: None,
        }
    }

    pub fn training(rng: &'a mut dyn RngCore) -> Self {
        Self {
            batch_stats: true,
            dropout: Some(rng),
        }
    }

    pub fn is_inference(&self) -> bool {
        !self.batch_stats && self.dropout.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormTrace<T> {
    /// `x̂`, `[batch × out]`.
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batch_stats: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T> {
    pub input: Vec<T>,
    /// Input to the activation function (after batchnorm when present).
    pub pre_activation: Vec<T>,
    pub bn: Option<BatchNormTrace<T>>,
    /// Inverted-dropout multipliers (0 or `1/(1-p)`).
    pub mask: Option<Vec<T>>,
    pub output: Vec<T>,
}

/// Everything backprop needs from one batched forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub batch: usize,
    pub reducer: Vec<LayerTrace<T>>,
    pub trunk: Vec<LayerTrace<T>>,
    /// `[batch × C]`
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> ForwardTrace<T> {
    /// Semantic-layer activations, `[batch × semantic_dim]`.
    pub fn semantic(&self) -> &[T] {
        &self.trunk.last().expect("trunk is never empty").output
    }

    pub fn probs_row(&self, i: usize) -> &[T] {
        let c = self.probs.len() / self.batch;
        &self.probs[i * c..(i + 1) * c]
    }
}

impl<T: Real> Dense<T> {
    fn forward(&self, input: Vec<T>, batch: usize, mode: &mut ForwardMode<'_>) -> LayerTrace<T> {
        let LayerSpec {
            in_dim, out_dim, ..
        } = self.spec;
        let mut z = linalg::matmul(&input, &self.weight, batch, in_dim, out_dim);
        for row in z.chunks_exact_mut(out_dim) {
            for (v, &b) in row.iter_mut().zip(&self.bias) {
                *v = *v + b;
            }
        }

        let bn = self.batchnorm.as_ref().map(|bn| {
            let (mean, var) = if mode.batch_stats {
                let mut mean = vec![0f64; out_dim];
                for row in z.chunks_exact(out_dim) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v.f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= batch as f64);
                let mut var = vec![0f64; out_dim];
                for row in z.chunks_exact(out_dim) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v.f64() - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= batch as f64);
                (mean, var)
            } else {
                (
                    bn.running_mean.iter().map(|x| x.f64()).collect(),
                    bn.running_var.iter().map(|x| x.f64()).collect(),
                )
            };
            let inv_std: Vec<T> = var
                .iter()
                .map(|&v| T::of(1.0 / (v + BN_EPS).sqrt()))
                .collect();
            let mut normalized = z.clone();
            for row in normalized.chunks_exact_mut(out_dim) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - T::of(mean[j])) * inv_std[j];
                }
            }
            for (row, xhat) in z
                .chunks_exact_mut(out_dim)
                .zip(normalized.chunks_exact(out_dim))
            {
                for j in 0..out_dim {
                    row[j] = bn.gamma[j] * xhat[j] + bn.beta[j];
                }
            }
            BatchNormTrace {
                normalized,
                inv_std,
                mean,
                var,
                batch_stats: mode.batch_stats,
            }
        });

        let mut output = match self.spec.activation {
            Activation::Relu => z.iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Linear => z.clone(),
            Activation::Softmax => unreachable!("validated"),
        };

        let rate = self.spec.dropout_rate;
        let mask = match mode.dropout.as_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = T::of(1.0 / (1.0 - rate as f64));
                let mask: Vec<T> = (0..output.len())
                    .map(|_| {
                        if rng.random::<f32>() < rate {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                for (o, &m) in output.iter_mut().zip(&mask) {
                    *o = *o * m;
                }
                Some(mask)
            }
            _ => None,
        };

        LayerTrace {
            input,
            pre_activation: z,
            bn,
            mask,
            output,
        }
    }
}

/// Numerically stable row-wise softmax; sums run in f64.
pub fn softmax_rows<T: Real>(logits: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).f64().exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| T::of(e / sum)));
    }
    out
}

impl<T: Real> Model<T> {
    fn check_inputs(&self, images: &[T], texts: &[T], batch: usize) -> Result<()> {
        let (n1, n2) = (self.config.image_dim, self.config.text_dim);
        if images.len() != batch * n1 || texts.len() != batch * n2 {
            return Err(Error::arg(format!(
                "expected {batch} rows of image dim {n1} and text dim {n2}, got {} and {} values",
                images.len(),
                texts.len()
            )));
        }
        if images.iter().chain(texts).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input feature".into()));
        }
        Ok(())
    }

    fn run_reducer(
        &self,
        images: &[T],
        batch: usize,
        mode: &mut ForwardMode<'_>,
    ) -> Vec<LayerTrace<T>> {
        let mut traces: Vec<LayerTrace<T>> = Vec::with_capacity(self.reducer.len());
        for layer in &self.reducer {
            let input = traces
                .last()
                .map_or_else(|| images.to_vec(), |t| t.output.clone());
            traces.push(layer.forward(input, batch, mode));
        }
        traces
    }

    /// Batched forward pass through reducer, trunk and the softmax output.
    pub fn forward_batch(
        &self,
        images: &[T],
        texts: &[T],
        batch: usize,
        mode: &mut ForwardMode<'_>,
    ) -> Result<ForwardTrace<T>> {
        self.check_inputs(images, texts, batch)?;
        let reducer = self.run_reducer(images, batch, mode);
        let reduced = reducer.last().map_or(images, |t| &t.output);

        let (r, n2) = (self.config.reduced_dim(), self.config.text_dim);
        let mut fused = Vec::with_capacity(batch * (r + n2));
        for i in 0..batch {
            fused.extend_from_slice(&reduced[i * r..(i + 1) * r]);
            fused.extend_from_slice(&texts[i * n2..(i + 1) * n2]);
        }

        let mut trunk: Vec<LayerTrace<T>> = Vec::with_capacity(self.trunk.len());
        let mut input = fused;
        for layer in &self.trunk {
            let t = layer.forward(input, batch, mode);
            input = t.output.clone();
            trunk.push(t);
        }

        let c = self.num_classes();
        let logits = linalg::matmul(&input, &self.output_weights, batch, self.semantic_dim(), c);
        let probs = softmax_rows(&logits, c);
        Ok(ForwardTrace {
            batch,
            reducer,
            trunk,
            logits,
            probs,
        })
    }

    /// Single-sample forward pass returning class probabilities and the trace.
    pub fn forward(
        &self,
        image: &[T],
        text: &[T],
        mode: &mut ForwardMode<'_>,
    ) -> Result<(Vec<T>, ForwardTrace<T>)> {
        let trace = self.forward_batch(image, text, 1, mode)?;
        Ok((trace.probs.clone(), trace))
    }

    /// Semantic-layer activations in inference mode, `[batch × semantic_dim]`.
    /// This is the network with its softmax output popped off.
    pub fn predict_semantic_batch(
        &self,
        images: &[T],
        texts: &[T],
        batch: usize,
    ) -> Result<Vec<T>> {
        let trace = self.forward_batch(images, texts, batch, &mut ForwardMode::inference())?;
        Ok(trace
            .trunk
            .into_iter()
            .last()
            .expect("trunk is never empty")
            .output)
    }

    pub fn predict_semantic(&self, image: &[T], text: &[T]) -> Result<Vec<T>> {
        self.predict_semantic_batch(image, text, 1)
    }

    /// Output of the visual reducer for one image vector.
    pub fn reduce_visual(&self, image: &[T], mode: &mut ForwardMode<'_>) -> Result<Vec<T>> {
        if image.len() != self.config.image_dim {
            return Err(Error::arg(format!(
                "image vector has dim {}, model expects {}",
                image.len(),
                self.config.image_dim
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input feature".into()));
        }
        let traces = self.run_reducer(image, 1, mode);
        Ok(traces
            .into_iter()
            .last()
            .map_or_else(|| image.to_vec(), |t| t.output))
    }

    /// Class scores for semantic vectors: `softmax(Wᵀ·s)` per row.
    pub fn classify_semantic(&self, semantic: &[T], batch: usize) -> Vec<T> {
        let c = self.num_classes();
        let logits = linalg::matmul(
            semantic,
            &self.output_weights,
            batch,
            self.semantic_dim(),
            c,
        );
        softmax_rows(&logits, c)
    }
}

impl<T: Real> Model<T> {
    /// A model with the given architecture and all tensors zeroed; used when
    /// restoring checkpoints.
    pub(crate) fn zeroed(config: &ArchConfig, label_order: Vec<String>) -> Result<Self> {
        config.validate()?;
        let layer = |spec: &LayerSpec| Dense {
            spec: spec.clone(),
            weight: vec![T::zero(); spec.in_dim * spec.out_dim],
            bias: vec![T::zero(); spec.out_dim],
            batchnorm: spec.has_batchnorm.then(|| BatchNorm {
                gamma: vec![T::zero(); spec.out_dim],
                beta: vec![T::zero(); spec.out_dim],
                running_mean: vec![T::zero(); spec.out_dim],
                running_var: vec![T::zero(); spec.out_dim],
            }),
        };
        Ok(Self {
            config: config.clone(),
            reducer: config.reducer_specs().iter().map(layer).collect(),
            trunk: config.trunk_specs().iter().map(layer).collect(),
            output_weights: vec![T::zero(); config.semantic_dim * label_order.len()],
            label_order,
        })
    }
}
