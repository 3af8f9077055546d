//! Patch classifier over embeddings, trained with focal loss.
//!
//! Training has two phases. The dynamic phase draws a fresh class-balanced
//! batch of `C` positives and `C` negatives every iteration. The re-finetuning
//! phase relabels the slide with the trained head and makes full passes over
//! every patch in a fixed order.

use std::borrow::Cow;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RefineConfig;
use crate::data::{LabelEntry, LabelTable, SlideDataset};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;
pub const MOMENTUM: f64 = 0.9;
pub const DECISION_THRESHOLD: f64 = 0.5;

// rng stream ids per stage
const STREAM_SAMPLING: u64 = 1;
const STREAM_INIT: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    /// `h` rows of length `d`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Logistic head `σ(w·z + b)`, or `σ(w·relu(Wz + b₁) + b)` with a hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub hidden: Option<HiddenLayer>,
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

impl ClassifierHead {
    /// All-zero logistic head.
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            weights: vec![0.0; dim],
            bias: 0.0,
            hidden: None,
        }
    }

    /// One-hidden-layer head with uniform `±1/√d` input weights and `±1/√h` output weights.
    pub fn with_hidden(dim: usize, hidden_units: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        let a = 1.0 / (dim as f64).sqrt();
        let b = 1.0 / (hidden_units as f64).sqrt();
        let weights = (0..hidden_units)
            .map(|_| (0..dim).map(|_| rng.gen_range(-a..a)).collect())
            .collect();
        Self {
            dim,
            weights: (0..hidden_units).map(|_| rng.gen_range(-b..b)).collect(),
            bias: 0.0,
            hidden: Some(HiddenLayer {
                weights,
                bias: vec![0.0; hidden_units],
            }),
        }
    }

    pub fn for_config(dim: usize, cfg: &RefineConfig) -> Self {
        match cfg.hidden_units {
            None => Self::zeros(dim),
            Some(h) => Self::with_hidden(dim, h, cfg.seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        let hidden = self
            .hidden
            .as_ref()
            .map_or(0, |h| h.bias.len() * (self.dim + 1));
        self.weights.len() + 1 + hidden
    }

    /// Flattened parameters: output weights, output bias, hidden weights (row-major), hidden bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.weights);
        p.push(self.bias);
        if let Some(h) = &self.hidden {
            for row in &h.weights {
                p.extend_from_slice(row);
            }
            p.extend_from_slice(&h.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let n_out = self.weights.len();
        self.weights.copy_from_slice(&p[..n_out]);
        self.bias = p[n_out];
        let mut at = n_out + 1;
        if let Some(h) = &mut self.hidden {
            for row in &mut h.weights {
                let n = row.len();
                row.copy_from_slice(&p[at..at + n]);
                at += n;
            }
            let nb = h.bias.len();
            h.bias.copy_from_slice(&p[at..at + nb]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    fn hidden_activations(&self, z: &[f64]) -> Option<Vec<f64>> {
        self.hidden.as_ref().map(|h| {
            h.weights
                .iter()
                .zip(&h.bias)
                .map(|(row, b)| row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + b)
                .collect()
        })
    }

    /// Pre-sigmoid score.
    pub fn logit(&self, z: &[f64]) -> f64 {
        match self.hidden_activations(z) {
            None => self.weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.bias,
            Some(a) => {
                self.weights
                    .iter()
                    .zip(&a)
                    .map(|(w, x)| w * x.max(0.0))
                    .sum::<f64>()
                    + self.bias
            }
        }
    }

    /// Gradient of the logit with respect to `params()`, scaled by `scale`, added into `out`.
    fn accumulate_logit_gradient(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        let n_out = self.weights.len();
        match self.hidden_activations(z) {
            None => {
                for (o, x) in out[..n_out].iter_mut().zip(z) {
                    *o += scale * x;
                }
                out[n_out] += scale;
            }
            Some(a) => {
                for (o, x) in out[..n_out].iter_mut().zip(&a) {
                    *o += scale * x.max(0.0);
                }
                out[n_out] += scale;
                let d = self.dim;
                let h = a.len();
                let w_start = n_out + 1;
                let b_start = w_start + h * d;
                for (i, &ai) in a.iter().enumerate() {
                    if ai <= 0.0 {
                        continue;
                    }
                    let g = scale * self.weights[i];
                    for (o, x) in out[w_start + i * d..w_start + (i + 1) * d]
                        .iter_mut()
                        .zip(z)
                    {
                        *o += g * x;
                    }
                    out[b_start + i] += g;
                }
            }
        }
    }
}

pub fn predict_proba(head: &ClassifierHead, z: &[f64]) -> Result<f64> {
    if z.len() != head.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            actual: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) || !head.is_finite() {
        return Err(Error::InvalidData("non-finite classifier input".into()));
    }
    Ok(sigmoid(head.logit(z)))
}

/// `−α_t (1−p_t)^γ ln p_t` with `p` clamped to `[ε, 1−ε]`.
pub fn focal_loss(p: f64, y: u8, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, at) = if y == 1 {
        (p, alpha)
    } else {
        (1.0 - p, 1.0 - alpha)
    };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Derivative of [`focal_loss`] with respect to the logit.
fn focal_loss_dlogit(p: f64, y: u8, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, at, sign) = if y == 1 {
        (p, alpha, 1.0)
    } else {
        (1.0 - p, 1.0 - alpha, -1.0)
    };
    sign * at * (1.0 - pt).powf(gamma) * (gamma * pt * pt.ln() - (1.0 - pt))
}

/// Analytic gradient of `focal_loss(predict_proba(head, z), y)` in `params()` layout.
pub fn focal_loss_gradient(
    head: &ClassifierHead,
    z: &[f64],
    y: u8,
    gamma: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    let p = predict_proba(head, z)?;
    let mut g = vec![0.0; head.n_params()];
    head.accumulate_logit_gradient(z, focal_loss_dlogit(p, y, gamma, alpha), &mut g);
    Ok(g)
}

/// Mean focal loss over a batch and its gradient.
fn batch_loss_and_gradient(
    head: &ClassifierHead,
    samples: &Samples<'_>,
    batch: &[usize],
    gamma: f64,
    alpha: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; head.n_params()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for &i in batch {
        let z = &samples.rows[i];
        let y = samples.labels[i];
        let p = sigmoid(head.logit(z));
        loss += focal_loss(p, y, gamma, alpha);
        head.accumulate_logit_gradient(z, scale * focal_loss_dlogit(p, y, gamma, alpha), &mut grad);
    }
    (loss * scale, grad)
}

/// Heavy-ball gradient descent: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone)]
struct Momentum {
    velocity: Vec<f64>,
    lr: f64,
}

impl Momentum {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            velocity: vec![0.0; n],
            lr,
        }
    }

    fn step(&mut self, head: &mut ClassifierHead, grad: &[f64]) {
        let mut p = head.params();
        for ((v, g), x) in self.velocity.iter_mut().zip(grad).zip(p.iter_mut()) {
            *v = MOMENTUM * *v + g;
            *x -= self.lr * *v;
        }
        head.set_params(&p);
    }
}

/// Training rows with their current labels.
#[derive(Debug, Clone)]
pub struct Samples<'a> {
    /// Patch ids; prefixed `slide_id/` in pooled samples.
    pub ids: Vec<Cow<'a, str>>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    dim: usize,
}

impl<'a> Samples<'a> {
    pub fn from_slide(slide: &'a SlideDataset, labels: &LabelTable) -> Result<Self> {
        Self::collect(&[(slide, labels)], false)
    }

    /// Concatenates several slides in the given order.
    pub fn pooled(parts: &[(&'a SlideDataset, &LabelTable)]) -> Result<Self> {
        Self::collect(parts, true)
    }

    fn collect(parts: &[(&'a SlideDataset, &LabelTable)], qualify: bool) -> Result<Self> {
        let dim = parts
            .first()
            .map(|(s, _)| s.dim())
            .ok_or_else(|| Error::InvalidData("no slides to train on".into()))?;
        let mut out = Samples {
            ids: Vec::new(),
            rows: Vec::new(),
            labels: Vec::new(),
            dim,
        };
        for (slide, labels) in parts {
            if slide.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: slide.dim(),
                });
            }
            labels.check_matches(slide)?;
            for (j, e) in labels.entries.iter().enumerate() {
                let id = slide.patches()[j].patch_id.as_str();
                out.ids.push(if qualify {
                    Cow::Owned(format!("{}/{id}", slide.slide_id()))
                } else {
                    Cow::Borrowed(id)
                });
                out.rows
                    .push(slide.embedding(j).iter().map(|&v| f64::from(v)).collect());
                out.labels.push(e.label);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn class_indices(&self, class: u8) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }
}

/// Indices into the label table of one balanced batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedBatch {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

fn draw(members: &[usize], c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if members.len() >= c {
        index::sample(rng, members.len(), c)
            .into_iter()
            .map(|i| members[i])
            .collect()
    } else {
        (0..c)
            .map(|_| members[rng.gen_range(0..members.len())])
            .collect()
    }
}

/// `C` positives and `C` negatives; without replacement when a class has at least `C` members.
pub fn sample_balanced_batch(
    labels: &[u8],
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BalancedBatch> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    sample_from_classes(&pos, &neg, c, rng)
}

fn sample_from_classes(
    pos: &[usize],
    neg: &[usize],
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BalancedBatch> {
    if pos.is_empty() {
        return Err(Error::EmptyClass(1));
    }
    if neg.is_empty() {
        return Err(Error::EmptyClass(0));
    }
    let pos = draw(pos, c, rng);
    let neg = draw(neg, c, rng);
    Ok(BalancedBatch { pos, neg })
}

pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SAMPLING);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Mean focal loss over the batch, evaluated before the update.
    pub loss: f64,
    pub batch_pos_ids: Vec<String>,
    pub batch_neg_ids: Vec<String>,
}

fn check_loss(loss: f64, iteration: usize) -> Result<()> {
    if !loss.is_finite() || loss < 0.0 {
        return Err(Error::Internal(format!(
            "loss became {loss} at iteration {iteration}"
        )));
    }
    Ok(())
}

pub fn train_dynamic(
    slide: &SlideDataset,
    labels: &LabelTable,
    cfg: &RefineConfig,
) -> Result<(ClassifierHead, Vec<TrainRecord>)> {
    let samples = Samples::from_slide(slide, labels)?;
    train_dynamic_samples(&samples, cfg)
}

pub fn train_dynamic_samples(
    samples: &Samples<'_>,
    cfg: &RefineConfig,
) -> Result<(ClassifierHead, Vec<TrainRecord>)> {
    let pos = samples.class_indices(1);
    let neg = samples.class_indices(0);
    if pos.is_empty() {
        return Err(Error::EmptyClass(1));
    }
    if neg.is_empty() {
        return Err(Error::EmptyClass(0));
    }
    let mut head = ClassifierHead::for_config(samples.dim, cfg);
    let mut opt = Momentum::new(head.n_params(), cfg.learning_rate);
    let mut rng = sampling_rng(cfg.seed);
    let mut records = Vec::with_capacity(cfg.dynamic_iters);
    let mut batch = Vec::with_capacity(2 * cfg.batch_half_size);
    for t in 0..cfg.dynamic_iters {
        let b = sample_from_classes(&pos, &neg, cfg.batch_half_size, &mut rng)?;
        batch.clear();
        batch.extend_from_slice(&b.pos);
        batch.extend_from_slice(&b.neg);
        let (loss, grad) =
            batch_loss_and_gradient(&head, samples, &batch, cfg.focal_gamma, cfg.focal_alpha);
        check_loss(loss, t)?;
        opt.step(&mut head, &grad);
        records.push(TrainRecord {
            iteration: t,
            loss,
            batch_pos_ids: b.pos.iter().map(|&i| samples.ids[i].to_string()).collect(),
            batch_neg_ids: b.neg.iter().map(|&i| samples.ids[i].to_string()).collect(),
        });
    }
    Ok((head, records))
}

/// Training without class balancing: each iteration draws `2C` patches uniformly
/// from the whole slide. Returns the per-iteration losses.
pub fn train_uniform_samples(
    samples: &Samples<'_>,
    cfg: &RefineConfig,
) -> Result<(ClassifierHead, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidData("no samples to train on".into()));
    }
    let mut head = ClassifierHead::for_config(samples.dim, cfg);
    let mut opt = Momentum::new(head.n_params(), cfg.learning_rate);
    let mut rng = sampling_rng(cfg.seed);
    let all: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.dynamic_iters);
    for t in 0..cfg.dynamic_iters {
        let batch = draw(&all, 2 * cfg.batch_half_size, &mut rng);
        let (loss, grad) =
            batch_loss_and_gradient(&head, samples, &batch, cfg.focal_gamma, cfg.focal_alpha);
        check_loss(loss, t)?;
        opt.step(&mut head, &grad);
        losses.push(loss);
    }
    Ok((head, losses))
}

pub fn predict_labels(
    head: &ClassifierHead,
    slide: &SlideDataset,
    threshold: f64,
) -> Result<LabelTable> {
    let entries = slide
        .patches()
        .iter()
        .zip(slide.embeddings().rows())
        .map(|(p, z)| {
            let z: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
            let prob = predict_proba(head, &z)?;
            Ok(LabelEntry {
                patch_id: p.patch_id.clone(),
                label: u8::from(prob >= threshold),
                score: prob as f32,
            })
        })
        .collect::<Result<_>>()?;
    LabelTable::new(slide.slide_id(), entries)
}

#[derive(Debug, Clone)]
pub struct RefinetuneOutcome {
    pub head: ClassifierHead,
    /// Predictions of the refined head.
    pub labels: LabelTable,
    /// Labels the head was re-finetuned on (predictions of the input head).
    pub relabeled: LabelTable,
    /// The relabelled slide had only one class.
    pub collapsed: bool,
    /// Mean loss over all patches before each epoch's step.
    pub losses: Vec<f64>,
}

/// Relabels the slide with `head`, then takes one full-batch step per epoch over
/// every patch, summed in slide order.
pub fn refinetune(
    slide: &SlideDataset,
    head: &ClassifierHead,
    cfg: &RefineConfig,
) -> Result<RefinetuneOutcome> {
    let relabeled = predict_labels(head, slide, DECISION_THRESHOLD)?;
    let positives = relabeled.positive_count();
    let collapsed = positives == 0 || positives == relabeled.len();
    let samples = Samples::from_slide(slide, &relabeled)?;
    let mut head = head.clone();
    let mut opt = Momentum::new(head.n_params(), cfg.learning_rate);
    let all: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.refinetune_epochs {
        let (loss, grad) =
            batch_loss_and_gradient(&head, &samples, &all, cfg.focal_gamma, cfg.focal_alpha);
        check_loss(loss, losses.len())?;
        opt.step(&mut head, &grad);
        losses.push(loss);
    }
    let labels = predict_labels(&head, slide, DECISION_THRESHOLD)?;
    Ok(RefinetuneOutcome {
        head,
        labels,
        relabeled,
        collapsed,
        losses,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadFile {
    d: usize,
    weights: Vec<f64>,
    bias: f64,
    hidden: Option<HiddenLayer>,
    config_hash: String,
}

impl ClassifierHead {
    pub fn to_json(&self, config_hash: &str) -> String {
        let file = HeadFile {
            d: self.dim,
            weights: self.weights.clone(),
            bias: self.bias,
            hidden: self.hidden.clone(),
            config_hash: config_hash.to_string(),
        };
        serde_json::to_string_pretty(&file).expect("head serializes") + "\n"
    }

    /// Parses a head file, returning the head and its config hash.
    pub fn from_json(text: &str) -> Result<(Self, String)> {
        let f: HeadFile =
            serde_json::from_str(text).map_err(|e| Error::format("head json", e.to_string()))?;
        let expected_out = match &f.hidden {
            None => f.d,
            Some(h) => {
                if h.weights.len() != h.bias.len() || h.weights.iter().any(|r| r.len() != f.d) {
                    return Err(Error::format("head json", "hidden layer shape mismatch"));
                }
                h.bias.len()
            }
        };
        if f.weights.len() != expected_out {
            return Err(Error::format(
                "head json",
                format!("expected {expected_out} weights, found {}", f.weights.len()),
            ));
        }
        let head = ClassifierHead {
            dim: f.d,
            weights: f.weights,
            bias: f.bias,
            hidden: f.hidden,
        };
        if !head.is_finite() {
            return Err(Error::format("head json", "non-finite parameter"));
        }
        Ok((head, f.config_hash))
    }
}
