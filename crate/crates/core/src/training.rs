//! Deterministic mini-batch training of a small embedding model.
//!
//! The model is an affine embedding map (optionally preceded by one `tanh`
//! hidden layer) followed by an affine classifier head. Each iteration draws
//! a PK batch, evaluates the configured objective, backpropagates by hand and
//! applies SGD with momentum, coupled weight decay and a cosine learning-rate
//! schedule.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batching::{sample_pk, BatchSpec};
use crate::embedding::{similarity_matrix, EmbeddingBatch, SimKind, SimMatrix};
use crate::error::{Error, Result};
use crate::evaluation::{geometry_report, rank1, GalleryProbeSplit, Metric};
use crate::losses::{combined_loss, triplet_loss, ClassifierHead, Combined, HeadGrad, LossConfig};
use crate::rng::{self, Rng};
use crate::synth::{gen_dataset, DatasetSpec, SynthDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossVariant {
    #[default]
    #[serde(rename = "triplet_only")]
    TripletOnly,
    #[serde(rename = "L_s")]
    Ls,
    #[serde(rename = "L_m")]
    Lm,
}

impl LossVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::TripletOnly => "triplet_only",
            LossVariant::Ls => "L_s",
            LossVariant::Lm => "L_m",
        }
    }
}

/// `lr_min + (lr0 − lr_min)·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidArgument(format!(
            "step {step} exceeds schedule length {total}"
        )));
    }
    if total == 0 {
        return Ok(lr0);
    }
    let progress = step as f64 / total as f64;
    Ok(lr_min + (lr0 - lr_min) * (1.0 + (PI * progress).cos()) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            lr_min: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&'static str, bool); 4] = [
            ("optimizer.lr0", self.lr0 > 0.0),
            ("optimizer.lr_min", self.lr_min >= 0.0 && self.lr_min <= self.lr0),
            ("optimizer.momentum", (0.0..1.0).contains(&self.momentum)),
            ("optimizer.weight_decay", self.weight_decay >= 0.0),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(Error::InvalidConfig {
                    field,
                    reason: format!("out of range in {self:?}"),
                });
            }
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    pub buffers: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: SgdConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            buffers: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One SGD step on every tensor:
/// `g = grad + wd·param; buf = momentum·buf + g; param -= lr·buf`.
pub fn sgd_update(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(Error::DimensionMismatch {
            expected: state.buffers.len(),
            actual: params.len().min(grads.len()),
        });
    }
    for ((p, g), b) in params.iter().zip(grads).zip(&state.buffers) {
        if p.len() != g.len() || p.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: b.len(),
                actual: if p.len() != b.len() { p.len() } else { g.len() },
            });
        }
    }
    let SgdConfig {
        momentum,
        weight_decay,
        ..
    } = state.config;
    for ((p, g), b) in params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        for ((pi, gi), bi) in p.iter_mut().zip(g.iter()).zip(b.iter_mut()) {
            let step = gi + weight_decay * *pi;
            *bi = momentum * *bi + step;
            *pi -= lr * *bi;
        }
    }
    Ok(())
}

/// `y = W·x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn random(out: usize, input: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((out, input), |_| scale * rng.sample::<f64, _>(StandardNormal)),
            bias: Array1::zeros(out),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hidden: Option<Affine>,
    pub embed: Affine,
    pub head: ClassifierHead,
}

/// Gradients laid out like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub hidden: Option<(Array2<f64>, Array1<f64>)>,
    pub embed: (Array2<f64>, Array1<f64>),
    pub head: HeadGrad,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
    hidden: Option<Array2<f64>>,
}

impl ModelParams {
    pub fn init(input_dim: usize, embed_dim: usize, classes: usize, hidden_dim: Option<usize>, rng: &mut Rng) -> Self {
        let hidden = hidden_dim.map(|h| Affine::random(h, input_dim, rng));
        let embed = Affine::random(embed_dim, hidden_dim.unwrap_or(input_dim), rng);
        let head = Affine::random(classes, embed_dim, rng);
        Self {
            hidden,
            embed,
            head: ClassifierHead {
                weight: head.weight,
                bias: head.bias,
            },
        }
    }

    /// Identity embedding map (input and embedding dimension equal) with a
    /// zero head.
    pub fn identity(dim: usize, classes: usize) -> Self {
        Self {
            hidden: None,
            embed: Affine {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            },
            head: ClassifierHead::zeros(classes, dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.embed).weight.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.weight.nrows()
    }

    pub fn forward(&self, features: &Array2<f64>) -> Result<ForwardCache> {
        if features.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: features.ncols(),
            });
        }
        let hidden = self.hidden.as_ref().map(|h| h.apply(features).mapv(f64::tanh));
        let embeddings = self.embed.apply(hidden.as_ref().unwrap_or(features));
        let logits = self.head.logits(&embeddings);
        Ok(ForwardCache {
            embeddings,
            logits,
            hidden,
        })
    }

    /// Chains the embedding gradient back through the model.
    pub fn backward(&self, features: &Array2<f64>, cache: &ForwardCache, d_embed: &Array2<f64>, head: HeadGrad) -> ModelGrads {
        let input = cache.hidden.as_ref().unwrap_or(features);
        let embed = (d_embed.t().dot(input), d_embed.sum_axis(Axis(0)));
        let hidden = match (&self.hidden, &cache.hidden) {
            (Some(_), Some(h)) => {
                let d_hidden = d_embed.dot(&self.embed.weight) * h.mapv(|v| 1.0 - v * v);
                Some((d_hidden.t().dot(features), d_hidden.sum_axis(Axis(0))))
            }
            _ => None,
        };
        ModelGrads { hidden, embed, head }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if let Some(h) = &self.hidden {
            out.push(h.weight.as_slice().expect("standard layout"));
            out.push(h.bias.as_slice().expect("standard layout"));
        }
        out.push(self.embed.weight.as_slice().expect("standard layout"));
        out.push(self.embed.bias.as_slice().expect("standard layout"));
        out.push(self.head.weight.as_slice().expect("standard layout"));
        out.push(self.head.bias.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if let Some(h) = &mut self.hidden {
            out.push(h.weight.as_slice_mut().expect("standard layout"));
            out.push(h.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.embed.weight.as_slice_mut().expect("standard layout"));
        out.push(self.embed.bias.as_slice_mut().expect("standard layout"));
        out.push(self.head.weight.as_slice_mut().expect("standard layout"));
        out.push(self.head.bias.as_slice_mut().expect("standard layout"));
        out
    }

    /// Hex SHA-256 over the little-endian bytes of every parameter.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if let Some((w, b)) = &self.hidden {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.embed.0.as_slice().expect("standard layout"));
        out.push(self.embed.1.as_slice().expect("standard layout"));
        out.push(self.head.weight.as_slice().expect("standard layout"));
        out.push(self.head.bias.as_slice().expect("standard layout"));
        out
    }
}

/// Embeddings (as a labeled batch) and class logits for a feature matrix.
pub fn model_forward(model: &ModelParams, features: &Array2<f64>, labels: &[usize]) -> Result<(EmbeddingBatch, Array2<f64>)> {
    let cache = model.forward(features)?;
    let batch = EmbeddingBatch::labeled(cache.embeddings, labels.to_vec())?;
    Ok((batch, cache.logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub value: f64,
    pub n_non: usize,
    pub grads: ModelGrads,
}

/// Objective value and parameter gradients on one batch.
pub fn loss_and_grads(
    model: &ModelParams,
    features: &Array2<f64>,
    labels: &[usize],
    variant: LossVariant,
    cfg: &LossConfig,
) -> Result<StepOutcome> {
    let cache = model.forward(features)?;
    let batch = EmbeddingBatch::labeled(cache.embeddings.clone(), labels.to_vec())?;
    let (result, head_grad) = match variant {
        LossVariant::TripletOnly => (triplet_loss(&batch, cfg)?, HeadGrad::zeros_like(&model.head)),
        LossVariant::Ls | LossVariant::Lm => {
            let which = if variant == LossVariant::Ls { Combined::Ls } else { Combined::Lm };
            let c = combined_loss(&batch, &model.head, cfg, which)?;
            (c.result, c.head_grad)
        }
    };
    let grads = model.backward(features, &cache, &result.grad, head_grad);
    Ok(StepOutcome {
        value: result.value,
        n_non: result.n_non,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Classes at the end of the class range that never reach training.
    pub held_out_classes: usize,
    /// Trailing rows of every subcluster of a training class kept out of
    /// training.
    pub held_out_per_subcluster: usize,
    pub metric: Metric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            held_out_classes: 0,
            held_out_per_subcluster: 10,
            metric: Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub batch: BatchSpec,
    pub loss: LossConfig,
    pub variant: LossVariant,
    pub optimizer: SgdConfig,
    pub embed_dim: usize,
    /// Width of the optional `tanh` hidden layer.
    pub hidden_dim: Option<usize>,
    pub total_iters: usize,
    pub eval_interval: usize,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            batch: BatchSpec::default(),
            loss: LossConfig::default(),
            variant: LossVariant::TripletOnly,
            optimizer: SgdConfig::default(),
            embed_dim: 16,
            hidden_dim: None,
            total_iters: 5000,
            eval_interval: 500,
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale reference experiment: the reduced per-class sample count
    /// and the hidden layer give the model enough capacity to fit label
    /// noise, and the temperature is sized for raw dot products of that
    /// model's embeddings.
    pub fn reference() -> Self {
        Self {
            dataset: DatasetSpec {
                samples_per_subcluster: 20,
                ..DatasetSpec::default()
            },
            loss: LossConfig {
                temperature: 20.0,
                ..LossConfig::default()
            },
            hidden_dim: Some(64),
            eval: EvalConfig {
                held_out_per_subcluster: 5,
                ..EvalConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.batch.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig {
                field: "train.embed_dim",
                reason: "must be >= 1".into(),
            });
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::InvalidConfig {
                field: "train.hidden_dim",
                reason: "must be >= 1 when set".into(),
            });
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig {
                field: "train.eval_interval",
                reason: "must be >= 1".into(),
            });
        }
        let ev = &self.eval;
        let train_classes = self.dataset.n_classes.saturating_sub(ev.held_out_classes);
        if train_classes < self.batch.classes {
            return Err(Error::InvalidConfig {
                field: "eval.held_out_classes",
                reason: format!(
                    "{} of {} classes held out leaves fewer than the {} a batch needs",
                    ev.held_out_classes, self.dataset.n_classes, self.batch.classes
                ),
            });
        }
        let per_sub = self.dataset.samples_per_subcluster;
        if ev.held_out_per_subcluster >= per_sub {
            return Err(Error::InvalidConfig {
                field: "eval.held_out_per_subcluster",
                reason: format!("must be below samples_per_subcluster ({per_sub})"),
            });
        }
        let eval_rows = ev.held_out_per_subcluster * self.dataset.subclusters_per_class;
        if ev.held_out_classes == 0 && eval_rows < 2 {
            return Err(Error::InvalidConfig {
                field: "eval.held_out_per_subcluster",
                reason: "nothing left to evaluate on; hold out classes or at least 2 rows per class".into(),
            });
        }
        Ok(())
    }

    pub fn train_classes(&self) -> usize {
        self.dataset.n_classes - self.eval.held_out_classes
    }

    pub fn split(&self, data: &SynthDataset) -> DataSplit {
        split_dataset(data, self.train_classes(), self.eval.held_out_per_subcluster)
    }
}

/// Rows of held-out classes and the last `held_out_per_subcluster` rows of
/// every training subcluster are evaluation rows; the rest train. Evaluation
/// rows alternate between gallery and probe within each class. Noisy rows
/// only ever appear in training, so retrieval is scored against true labels.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: SynthDataset,
    pub gallery: SynthDataset,
    pub probe: SynthDataset,
}

pub fn split_dataset(data: &SynthDataset, train_classes: usize, held_out_per_subcluster: usize) -> DataSplit {
    let mut group_sizes = std::collections::BTreeMap::<(usize, usize), usize>::new();
    for (&label, &sub) in data.labels.iter().zip(&data.subclusters) {
        *group_sizes.entry((label, sub)).or_insert(0) += 1;
    }
    let mut train = Vec::new();
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    let mut seen = std::collections::BTreeMap::<usize, usize>::new();
    let mut position = std::collections::BTreeMap::<(usize, usize), usize>::new();
    for (i, (&label, &sub)) in data.labels.iter().zip(&data.subclusters).enumerate() {
        let pos = position.entry((label, sub)).or_insert(0);
        let keep_for_training = label < train_classes && *pos + held_out_per_subcluster < group_sizes[&(label, sub)];
        *pos += 1;
        if keep_for_training {
            train.push(i);
        } else if !data.noise[i] {
            let k = seen.entry(label).or_insert(0);
            if k.is_multiple_of(2) {
                gallery.push(i);
            } else {
                probe.push(i);
            }
            *k += 1;
        }
    }
    DataSplit {
        train: data.select(&train),
        gallery: data.select(&gallery),
        probe: data.select(&probe),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub n_non: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub rank1: f64,
    pub uniformity: f64,
    pub kappa_hat: f64,
    pub inter_intra: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iter: usize,
    pub sim: SimMatrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub iterations: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
    /// Similarity matrices of one fixed training batch at the start, middle
    /// and end of training.
    pub snapshots: Vec<Snapshot>,
    pub model: ModelParams,
    pub digest: String,
}

impl TrainReport {
    /// `iter,loss,lr,n_non`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("iter,loss,lr,n_non\n");
        for r in &self.iterations {
            let _ = writeln!(out, "{},{:?},{:?},{}", r.iter, r.loss, r.lr, r.n_non);
        }
        out
    }

    /// `iter,rank1,uniformity,kappa_hat,inter_intra`.
    pub fn eval_csv(&self) -> String {
        let mut out = String::from("iter,rank1,uniformity,kappa_hat,inter_intra\n");
        for r in &self.evals {
            let ratio = r.inter_intra.map_or_else(|| "inf".to_string(), |v| format!("{v:?}"));
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{}",
                r.iter, r.rank1, r.uniformity, r.kappa_hat, ratio
            );
        }
        out
    }

    /// Mean `n_non` over iterations in `[start, end)`.
    pub fn mean_n_non(&self, start: usize, end: usize) -> f64 {
        let window: Vec<usize> = self
            .iterations
            .iter()
            .filter(|r| r.iter >= start && r.iter < end)
            .map(|r| r.n_non)
            .collect();
        window.iter().sum::<usize>() as f64 / window.len().max(1) as f64
    }
}

/// Evaluates a model on the held-out gallery/probe split.
pub fn evaluate(model: &ModelParams, split: &DataSplit, metric: Metric, iter: usize) -> Result<EvalRecord> {
    let gallery = model.forward(&split.gallery.features)?.embeddings;
    let probe = model.forward(&split.probe.features)?.embeddings;
    let r1 = rank1(&GalleryProbeSplit {
        gallery: gallery.clone(),
        gallery_labels: split.gallery.labels.clone(),
        probe: probe.clone(),
        probe_labels: split.probe.labels.clone(),
        metric,
    })?;
    let all = ndarray::concatenate(Axis(0), &[gallery.view(), probe.view()])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let labels: Vec<usize> = split.gallery.labels.iter().chain(&split.probe.labels).copied().collect();
    let geo = geometry_report(&all, &labels)?;
    Ok(EvalRecord {
        iter,
        rank1: r1,
        uniformity: geo.uniformity,
        kappa_hat: geo.kappa_hat,
        inter_intra: geo.inter_intra_ratio,
    })
}

/// Runs the full training schedule.
pub fn train(config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let data = gen_dataset(&config.dataset)?;
    let split = config.split(&data);
    let mut init_rng = rng::derive(config.seed, 0);
    let mut batch_rng = rng::derive(config.seed, 1);
    let mut snapshot_rng = rng::derive(config.seed, 2);

    let mut model = ModelParams::init(
        config.dataset.input_dim,
        config.embed_dim,
        config.train_classes(),
        config.hidden_dim,
        &mut init_rng,
    );
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut optim = OptimState::new(config.optimizer, &shapes);

    let snapshot_idx = sample_pk(&split.train.labels, config.batch, &mut snapshot_rng)?;
    let snapshot_data = split.train.select(&snapshot_idx);
    let take_snapshot = |model: &ModelParams, iter: usize| -> Result<Snapshot> {
        let (batch, _) = model_forward(model, &snapshot_data.features, &snapshot_data.labels)?;
        let ordered = batch.class_block_order();
        Ok(Snapshot {
            iter,
            sim: similarity_matrix(&ordered, SimKind::Cosine)?,
            labels: ordered.labels().to_vec(),
        })
    };

    let total = config.total_iters;
    let mid = total / 2;
    let mut iterations = Vec::with_capacity(total);
    let mut evals = vec![evaluate(&model, &split, config.eval.metric, 0)?];
    let mut snapshots = vec![take_snapshot(&model, 0)?];

    for it in 0..total {
        let lr = cosine_lr(it, total, config.optimizer.lr0, config.optimizer.lr_min)?;
        let idx = sample_pk(&split.train.labels, config.batch, &mut batch_rng)?;
        let features = split.train.features.select(Axis(0), &idx);
        let labels: Vec<usize> = idx.iter().map(|&i| split.train.labels[i]).collect();
        let step = loss_and_grads(&model, &features, &labels, config.variant, &config.loss)?;
        if !step.value.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                value: step.value,
            });
        }
        iterations.push(IterRecord {
            iter: it,
            loss: step.value,
            lr,
            n_non: step.n_non,
        });
        sgd_update(&mut model.tensors_mut(), &step.grads.tensors(), &mut optim, lr)?;

        let done = it + 1;
        if done % config.eval_interval == 0 || done == total {
            evals.push(evaluate(&model, &split, config.eval.metric, done)?);
        }
        if (done == mid && mid > 0) || done == total {
            snapshots.push(take_snapshot(&model, done)?);
        }
    }

    let digest = model.digest();
    Ok(TrainReport {
        iterations,
        evals,
        snapshots,
        model,
        digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_lr_examples() {
        assert_eq!(cosine_lr(0, 1000, 0.1, 1e-4).unwrap(), 0.1);
        assert!((cosine_lr(1000, 1000, 0.1, 1e-4).unwrap() - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(500, 1000, 0.1, 1e-4).unwrap() - 0.05005).abs() < 1e-15);
        assert!(cosine_lr(1001, 1000, 0.1, 1e-4).is_err());
    }

    fn scalar_state(momentum: f64, wd: f64) -> OptimState {
        OptimState::new(
            SgdConfig {
                momentum,
                weight_decay: wd,
                ..SgdConfig::default()
            },
            &[1],
        )
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        let mut state = scalar_state(0.9, 0.0);
        sgd_update(&mut [&mut p[..]], &[&[1.0][..]], &mut state, 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut p = [1.0];
        let mut state = scalar_state(0.9, 0.0);
        state.buffers[0][0] = 2.0;
        sgd_update(&mut [&mut p[..]], &[&[0.0][..]], &mut state, 0.1).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 0.9 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_step_trace() {
        // Hand trace with momentum 0.9, wd 0.01, lr 0.5, grads 0.3 then -0.2.
        //   step 1: g = 0.3 + 0.01·2 = 0.32; buf = 0.32; p = 2 − 0.16 = 1.84
        //   step 2: g = −0.2 + 0.0184 = −0.1816; buf = 0.288 − 0.1816 = 0.1064;
        //           p = 1.84 − 0.0532 = 1.7868
        let mut p = [2.0];
        let mut state = scalar_state(0.9, 0.01);
        sgd_update(&mut [&mut p[..]], &[&[0.3][..]], &mut state, 0.5).unwrap();
        assert!((p[0] - 1.84).abs() < 1e-14);
        sgd_update(&mut [&mut p[..]], &[&[-0.2][..]], &mut state, 0.5).unwrap();
        assert!((state.buffers[0][0] - 0.1064).abs() < 1e-14);
        assert!((p[0] - 1.7868).abs() < 1e-14);
    }

    #[test]
    fn sgd_without_momentum_or_decay_is_plain_descent() {
        let mut p = vec![0.5, -1.5, 3.0];
        let g = [0.25, -0.75, 1e-3];
        let before = p.clone();
        let mut state = OptimState::new(
            SgdConfig {
                momentum: 0.0,
                weight_decay: 0.0,
                ..SgdConfig::default()
            },
            &[3],
        );
        sgd_update(&mut [&mut p[..]], &[&g[..]], &mut state, 0.07).unwrap();
        for i in 0..3 {
            assert_eq!(p[i], before[i] - 0.07 * g[i]);
        }
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = [1.0, 2.0];
        let mut state = scalar_state(0.9, 0.0);
        assert!(sgd_update(&mut [&mut p[..]], &[&[1.0, 1.0][..]], &mut state, 0.1).is_err());
    }

    #[test]
    fn forward_examples() {
        let model = ModelParams::identity(3, 4);
        let x = ndarray::array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
        let (batch, logits) = model_forward(&model, &x, &[0, 1]).unwrap();
        assert_eq!(batch.data(), &x);
        assert!(logits.iter().all(|&v| v == 0.0));

        let mut zero = ModelParams::identity(3, 4);
        zero.embed.weight.fill(0.0);
        let (batch, _) = model_forward(&zero, &x, &[0, 1]).unwrap();
        assert!(batch.data().iter().all(|&v| v == 0.0));
        let (ce, _) = crate::losses::ce_loss(&batch, &zero.head).unwrap();
        assert!((ce.value - 4f64.ln()).abs() < 1e-15);

        assert!(model.forward(&ndarray::Array2::zeros((1, 4))).is_err());
    }

    fn flat(model: &ModelParams) -> Vec<f64> {
        model.tensors().concat()
    }

    fn unflatten(model: &mut ModelParams, values: &[f64]) {
        let mut offset = 0;
        for t in model.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let spec = BatchSpec::new(3, 2).unwrap();
        for (hidden, variant) in [
            (None, LossVariant::Ls),
            (Some(5), LossVariant::Lm),
            (Some(4), LossVariant::TripletOnly),
        ] {
            let mut rng = rng::seeded(17);
            let model = ModelParams::init(4, 3, 3, hidden, &mut rng);
            let features = Array2::from_shape_fn((6, 4), |_| rng.sample::<f64, _>(StandardNormal));
            let labels = spec.block_labels();
            let cfg = LossConfig {
                margin: 0.5,
                ..LossConfig::default()
            };
            let analytic = loss_and_grads(&model, &features, &labels, variant, &cfg).unwrap();
            let analytic: Vec<f64> = analytic.grads.tensors().concat();
            let point = flat(&model);
            let numeric = crate::analysis::finite_diff_grad(
                |p| {
                    let mut m = model.clone();
                    unflatten(&mut m, p);
                    loss_and_grads(&m, &features, &labels, variant, &cfg).unwrap().value
                },
                &point,
                1e-5,
            )
            .unwrap();
            let scale = analytic.iter().chain(&numeric).fold(1e-12f64, |m, v| m.max(v.abs()));
            let err = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
                / scale;
            assert!(err < 1e-5, "{variant:?} hidden={hidden:?}: {err}");
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dataset: DatasetSpec {
                n_classes: 8,
                samples_per_subcluster: 10,
                input_dim: 8,
                ..DatasetSpec::default()
            },
            batch: BatchSpec::new(4, 4).unwrap(),
            embed_dim: 4,
            total_iters: 40,
            eval_interval: 10,
            eval: EvalConfig {
                held_out_classes: 3,
                held_out_per_subcluster: 2,
                metric: Metric::Euclidean,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn eval_only_run() {
        let cfg = TrainConfig {
            total_iters: 0,
            ..small_config()
        };
        let report = train(&cfg).unwrap();
        assert!(report.iterations.is_empty());
        assert_eq!(report.evals.len(), 1);
        assert_eq!(report.evals[0].iter, 0);
        assert_eq!(report.snapshots.len(), 1);
    }

    #[test]
    fn training_is_reproducible_and_follows_schedule() {
        for variant in [LossVariant::TripletOnly, LossVariant::Ls, LossVariant::Lm] {
            let cfg = TrainConfig {
                variant,
                ..small_config()
            };
            let a = train(&cfg).unwrap();
            let b = train(&cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.curves_csv(), b.curves_csv());
            assert_eq!(a.iterations.len(), 40);
            assert_eq!(a.evals.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![0, 10, 20, 30, 40]);
            assert_eq!(a.snapshots.iter().map(|s| s.iter).collect::<Vec<_>>(), vec![0, 20, 40]);
            for r in &a.iterations {
                assert_eq!(r.lr, cosine_lr(r.iter, 40, 0.1, 1e-4).unwrap());
                assert!(r.loss.is_finite());
            }
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = small_config();
        cfg.loss.temperature = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { field: "loss.temperature", .. })));
        let mut cfg = small_config();
        cfg.batch.per_class = 1;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { field: "batch.per_class", .. })));
        let mut cfg = small_config();
        cfg.eval.held_out_classes = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.eval.held_out_per_subcluster = 10;
        assert!(matches!(
            cfg.validate(),
            Err(Error::InvalidConfig { field: "eval.held_out_per_subcluster", .. })
        ));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"total_iters": 3, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"variant": "L_s", "loss": {"margin": 0.3}}"#).unwrap();
        assert_eq!(ok.variant, LossVariant::Ls);
        assert_eq!(ok.loss.margin, 0.3);
        assert_eq!(ok.loss.temperature, 1.0);
    }
}
