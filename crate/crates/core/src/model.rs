//! Multinomial logistic regression and a one-hidden-layer ReLU network with
//! exact gradients, plus the local SGD loop run by clients.
//!
//! Parameter layout (row-major, concatenated in this order):
//!
//! * `logreg`: `W[classes x input]`, `b[classes]`
//! * `mlp`: `W1[hidden x input]`, `b1[hidden]`, `W2[classes x hidden]`, `b2[classes]`
//!
//! The layout id is `"{kind}:{input}:{hidden}:{classes}"`, with hidden = 0
//! for `logreg`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Select};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::params::Params;
use crate::scalar::Scalar;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logreg,
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Logreg => "logreg",
            Self::Mlp => "mlp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logreg" => Ok(Self::Logreg),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::InvalidModelSpec(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// 0 means "take it from the dataset".
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize, init_seed: u64) -> Self {
        Self {
            kind: ModelKind::Logreg,
            input_dim,
            num_classes,
            hidden_dim: 0,
            init_seed,
        }
    }

    pub fn mlp(input_dim: usize, num_classes: usize, hidden_dim: usize, init_seed: u64) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_dim,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidModelSpec("input_dim and num_classes must be positive".into()));
        }
        match self.kind {
            ModelKind::Mlp if self.hidden_dim == 0 => {
                Err(Error::InvalidModelSpec("mlp requires hidden_dim > 0".into()))
            }
            _ => Ok(()),
        }
    }

    fn hidden(&self) -> usize {
        match self.kind {
            ModelKind::Logreg => 0,
            ModelKind::Mlp => self.hidden_dim,
        }
    }

    pub fn layout_id(&self) -> String {
        format!("{}:{}:{}:{}", self.kind, self.input_dim, self.hidden(), self.num_classes)
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden(), self.num_classes);
        match self.kind {
            ModelKind::Logreg => d * c + c,
            ModelKind::Mlp => d * h + h + h * c + c,
        }
    }

    fn check<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        self.validate()?;
        if params.len() != self.param_count() || params.layout_id() != self.layout_id() {
            return Err(Error::LayoutMismatch {
                expected: self.layout_id(),
                expected_len: self.param_count(),
                found: params.layout_id().to_string(),
                found_len: params.len(),
            });
        }
        Ok(())
    }

    /// `(fan_in, fan_out, weight_offset)` per dense layer.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let (d, h, c) = (self.input_dim, self.hidden(), self.num_classes);
        match self.kind {
            ModelKind::Logreg => vec![(d, c, 0)],
            ModelKind::Mlp => vec![(d, h, 0), (h, c, d * h + h)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidModelSpec("local_epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidModelSpec(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<T: Scalar>(spec: &ModelSpec) -> Result<Params<T>> {
    spec.validate()?;
    let mut rng = Pcg64::seed_from_u64(spec.init_seed);
    let mut values = vec![T::zero(); spec.param_count()];
    for (fan_in, fan_out, offset) in spec.layers() {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut values[offset..offset + fan_in * fan_out] {
            *w = T::from_f64_lossy(rng.random_range(-s..=s));
        }
    }
    Params::new(values, spec.layout_id())
}

/// Forward pass scratch space for one sample.
struct Workspace<T> {
    hidden: Vec<T>,
    logits: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            hidden: vec![T::zero(); spec.hidden()],
            logits: vec![T::zero(); spec.num_classes],
        }
    }
}

fn dense<T: Scalar>(weights: &[T], bias: &[T], x: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (o, (row, b)) in out.iter_mut().zip(weights.chunks_exact(n_in).zip(bias)) {
        *o = row.iter().zip(x).fold(*b, |acc, (w, v)| acc + *w * *v);
    }
}

/// Computes logits into `ws.logits` (and hidden activations for the MLP).
fn forward<T: Scalar>(spec: &ModelSpec, p: &[T], x: &[T], ws: &mut Workspace<T>) {
    let (d, h, c) = (spec.input_dim, spec.hidden(), spec.num_classes);
    match spec.kind {
        ModelKind::Logreg => dense(&p[..d * c], &p[d * c..], x, &mut ws.logits),
        ModelKind::Mlp => {
            let (w1, rest) = p.split_at(d * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h * c);
            dense(w1, b1, x, &mut ws.hidden);
            for a in &mut ws.hidden {
                *a = a.max(T::zero());
            }
            dense(w2, b2, &ws.hidden, &mut ws.logits);
        }
    }
}

/// Turns `logits` into softmax probabilities in place and returns the
/// cross-entropy against `label`.
fn softmax_xent<T: Scalar>(logits: &mut [T], label: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    let loss = sum.ln() - (logits[label].ln());
    for z in logits.iter_mut() {
        *z /= sum;
    }
    loss
}

fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_batch<T: Scalar, B: Batch<T>>(spec: &ModelSpec, batch: &B) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.feature_dim() != spec.input_dim {
        return Err(Error::InvalidModelSpec(format!(
            "batch feature dimension {} differs from model input {}",
            batch.feature_dim(),
            spec.input_dim
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy over `batch` and its gradient.
pub fn forward_loss_grad<T: Scalar, B: Batch<T>>(
    spec: &ModelSpec,
    params: &Params<T>,
    batch: &B,
) -> Result<(T, Params<T>)> {
    spec.check(params)?;
    check_batch(spec, batch)?;
    let (d, h, c) = (spec.input_dim, spec.hidden(), spec.num_classes);
    let p = params.values();
    let mut grad = vec![T::zero(); p.len()];
    let mut ws = Workspace::new(spec);
    let mut scratch = Vec::new();
    let mut delta_hidden = vec![T::zero(); h];
    // Running mean: identical per-sample losses give exactly that loss.
    let mut loss = T::zero();

    for i in 0..batch.len() {
        let label = batch.label(i);
        let x = batch.features(i, &mut scratch);
        forward(spec, p, x, &mut ws);
        let sample_loss = softmax_xent(&mut ws.logits, label);
        loss += (sample_loss - loss) / T::from_count(i + 1);
        ws.logits[label] -= T::one();
        let dz = &ws.logits;

        match spec.kind {
            ModelKind::Logreg => {
                let (gw, gb) = grad.split_at_mut(d * c);
                for (k, dzk) in dz.iter().enumerate() {
                    gb[k] += *dzk;
                    for (g, v) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += *dzk * *v;
                    }
                }
            }
            ModelKind::Mlp => {
                let w2 = &p[d * h + h..d * h + h + h * c];
                let (gw1, rest) = grad.split_at_mut(d * h);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(h * c);
                delta_hidden.iter_mut().for_each(|v| *v = T::zero());
                for (k, dzk) in dz.iter().enumerate() {
                    gb2[k] += *dzk;
                    let row = k * h..(k + 1) * h;
                    for ((g, a), (w, dh)) in gw2[row.clone()]
                        .iter_mut()
                        .zip(&ws.hidden)
                        .zip(w2[row].iter().zip(delta_hidden.iter_mut()))
                    {
                        *g += *dzk * *a;
                        *dh += *w * *dzk;
                    }
                }
                for (j, (dh, a)) in delta_hidden.iter().zip(&ws.hidden).enumerate() {
                    if *a <= T::zero() {
                        continue;
                    }
                    gb1[j] += *dh;
                    for (g, v) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += *dh * *v;
                    }
                }
            }
        }
    }

    let n = T::from_count(batch.len());
    for g in &mut grad {
        *g /= n;
    }
    if !loss.is_finite() {
        return Err(Error::InvalidParams("loss is not finite".into()));
    }
    Ok((loss, params.with_values(grad)?))
}

/// Mini-batch SGD for `cfg.local_epochs` epochs, reshuffling each epoch.
/// `per_epoch_hook(epoch, params)` runs after every epoch (epochs count
/// from 1).
pub fn train_local<T, B, F>(
    spec: &ModelSpec,
    params: &Params<T>,
    train: &B,
    cfg: &TrainConfig,
    mut per_epoch_hook: F,
) -> Result<Params<T>>
where
    T: Scalar,
    B: Batch<T>,
    F: FnMut(usize, &Params<T>) -> Result<()>,
{
    cfg.validate()?;
    spec.check(params)?;
    check_batch(spec, train)?;
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let mut rng = Pcg64::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut current = params.clone();
    for epoch in 1..=cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (_, grad) = forward_loss_grad(spec, &current, &Select::new(train, chunk))?;
            let next = current
                .values()
                .iter()
                .zip(grad.values())
                .map(|(w, g)| *w - lr * *g)
                .collect();
            current = current.with_values(next)?;
        }
        per_epoch_hook(epoch, &current)?;
    }
    Ok(current)
}

pub fn predict<T: Scalar>(spec: &ModelSpec, params: &Params<T>, features: &[T]) -> Result<usize> {
    spec.check(params)?;
    let mut ws = Workspace::new(spec);
    forward(spec, params.values(), features, &mut ws);
    Ok(argmax(&ws.logits))
}

/// Mean cross-entropy and confusion counts. Ties in the argmax go to the
/// lowest class index.
pub fn evaluate<T: Scalar, B: Batch<T>>(
    spec: &ModelSpec,
    params: &Params<T>,
    test: &B,
) -> Result<(T, ConfusionMatrix)> {
    spec.check(params)?;
    check_batch(spec, test)?;
    let mut ws = Workspace::new(spec);
    let mut scratch = Vec::new();
    let mut confusion = ConfusionMatrix::zeros(spec.num_classes);
    let mut loss = T::zero();
    for i in 0..test.len() {
        let label = test.label(i);
        let x = test.features(i, &mut scratch);
        forward(spec, params.values(), x, &mut ws);
        let pred = argmax(&ws.logits);
        confusion.record(label, pred);
        let l = softmax_xent(&mut ws.logits, label);
        loss += (l - loss) / T::from_count(i + 1);
    }
    Ok((loss, confusion))
}
