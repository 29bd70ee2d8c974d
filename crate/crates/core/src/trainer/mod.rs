//! Supervised warm-up followed by the teacher/student loop: dual labeled
//! loss, confidence-gated teacher pseudo-labels, CutMix-masked dual unlabeled
//! loss, prototype EMA and teacher EMA.

mod state;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use state::{evaluate, pseudo_label_report, EvalReport, RunMeta, TrainState, STATE_VERSION};

use crate::data::{cutmix, mix_pixels, plan_batch, weak_augment, CutMixPlan, DatasetSpec, Image, Mixable, Rect, SegSample, Split};
use crate::error::{Error, Result};
use crate::metrics::PseudoLabelCounts;
use crate::model::{
    images_to_tensor, linear_posterior_var, prototype_posterior_with, BoundNetwork, Network, Teacher, CE_EPS,
    DEFAULT_FEATURE_DIM,
};
use crate::numerics::{Graph, Sgd, SgdConfig, Tensor, Var};
use crate::protobank::{init_bank, BankInit, PixelFeatureSample, PrototypeBank, UpdateRule, UpdateStats};
use crate::rng::{self, tag, Rng};
use crate::scalar::Scalar;

/// Which losses and updates run. The five rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Linear head on labeled data only.
    SupervisedOnly,
    /// Linear head, labeled and pseudo-labeled.
    LinearOnly,
    /// Prototype head only; the linear head is frozen after warm-up and
    /// serves only as the pseudo-label source.
    ProtoOnly,
    /// Both heads, prototypes frozen after initialization.
    NoProtoUpdate,
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    Prototype,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SupervisedOnly,
        Variant::LinearOnly,
        Variant::ProtoOnly,
        Variant::NoProtoUpdate,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SupervisedOnly => "supervised_only",
            Variant::LinearOnly => "linear_only",
            Variant::ProtoOnly => "proto_only",
            Variant::NoProtoUpdate => "no_proto_update",
            Variant::Full => "full",
        }
    }

    pub fn index(self) -> usize {
        Variant::ALL.iter().position(|&v| v == self).unwrap()
    }

    pub fn linear_loss(self) -> bool {
        self != Variant::ProtoOnly
    }

    pub fn proto_loss(self) -> bool {
        matches!(self, Variant::ProtoOnly | Variant::NoProtoUpdate | Variant::Full)
    }

    pub fn unlabeled(self) -> bool {
        self != Variant::SupervisedOnly
    }

    pub fn proto_update(self) -> bool {
        matches!(self, Variant::ProtoOnly | Variant::Full)
    }

    /// Head whose val mIoU is the variant's headline number.
    pub fn primary_head(self) -> Head {
        if self == Variant::ProtoOnly {
            Head::Prototype
        } else {
            Head::Linear
        }
    }
}

/// Where the unlabeled-loss indicator comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    /// Teacher confidence on the weak views, mixed with the same rectangle.
    #[default]
    Dataflow,
    /// An extra teacher pass on the mixed image.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub tau: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub k: usize,
    pub feature_dim: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lambda_u: f64,
    pub ema_momentum: f64,
    pub crop_height: usize,
    pub crop_width: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub pixels_per_class: usize,
    pub eval_pixels_per_class: usize,
    pub indicator: Indicator,
    pub proto_rule: UpdateRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Full,
            tau: 0.8,
            temperature: 0.1,
            alpha: 0.99,
            k: 4,
            feature_dim: DEFAULT_FEATURE_DIM,
            batch_labeled: 4,
            batch_unlabeled: 8,
            epochs: 8,
            warmup_epochs: 20,
            lambda_u: 1.0,
            ema_momentum: 0.99,
            crop_height: 56,
            crop_width: 56,
            lr: 0.05,
            warmup_lr: 0.05,
            weight_decay: 1e-4,
            momentum: 0.9,
            poly_power: 0.8,
            pixels_per_class: 1000,
            eval_pixels_per_class: 2000,
            indicator: Indicator::Dataflow,
            proto_rule: UpdateRule::BatchMean,
        }
    }
}

fn invalid<T>(field: &str, reason: &str) -> Result<T> {
    Err(Error::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    })
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return invalid("tau", "must lie in (0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid("temperature", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid("alpha", "must lie in [0, 1]");
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return invalid("ema_momentum", "must lie in (0, 1)");
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return invalid("lambda_u", "must be non-negative");
        }
        for (field, v) in [
            ("k", self.k),
            ("feature_dim", self.feature_dim),
            ("batch_labeled", self.batch_labeled),
            ("batch_unlabeled", self.batch_unlabeled),
            ("epochs", self.epochs),
            ("warmup_epochs", self.warmup_epochs),
            ("crop_height", self.crop_height),
            ("crop_width", self.crop_width),
            ("pixels_per_class", self.pixels_per_class),
            ("eval_pixels_per_class", self.eval_pixels_per_class),
        ] {
            if v == 0 {
                return invalid(field, "must be positive");
            }
        }
        self.sgd(self.lr, 1).validate()?;
        self.sgd(self.warmup_lr, 1).validate()
    }

    fn sgd(&self, base_lr: f64, total_iters: usize) -> SgdConfig {
        SgdConfig {
            base_lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            total_iters,
            poly_power: self.poly_power,
        }
    }

    pub fn crop(&self) -> (usize, usize) {
        (self.crop_height, self.crop_width)
    }

    /// Optimizer steps in one semi-supervised epoch: one pass over the
    /// unlabeled set (or the labeled set when there is none).
    pub fn steps_per_epoch(&self, n_labeled: usize, n_unlabeled: usize) -> usize {
        if n_unlabeled > 0 {
            n_unlabeled.div_ceil(self.batch_unlabeled)
        } else {
            n_labeled.div_ceil(self.batch_labeled)
        }
    }
}

/// Teacher pseudo-labels for one weak view.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap<S> {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub confidence: Vec<S>,
    pub valid: Vec<bool>,
}

impl<S: Scalar> PseudoLabelMap<S> {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Re-derives validity from a new confidence map.
    pub fn regate(&mut self, confidence: &[S], tau: f64) {
        self.valid = confidence.iter().map(|c| c.f64() >= tau).collect();
    }
}

impl<S: Scalar> Mixable for PseudoLabelMap<S> {
    fn frame(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn mix(&self, other: &Self, rect: &Rect) -> Self {
        let (h, w) = (self.height, self.width);
        PseudoLabelMap {
            height: h,
            width: w,
            labels: mix_pixels(&self.labels, &other.labels, h, w, 1, rect),
            confidence: mix_pixels(&self.confidence, &other.confidence, h, w, 1, rect),
            valid: mix_pixels(&self.valid, &other.valid, h, w, 1, rect),
        }
    }
}

/// Frozen forward pass: `[n*h*w, D]` features of a batch of equal-size images.
fn frozen_features<S: Scalar>(net: &Network<S>, images: &[&Image]) -> Result<(Graph<S>, BoundNetwork, Var)> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let x = g.constant(images_to_tensor(images)?);
    let f = net.features(&mut g, &bound, x)?;
    Ok((g, bound, f))
}

/// Per-pixel arg-max and max of the linear posterior.
fn linear_argmax<S: Scalar>(net: &Network<S>, images: &[&Image]) -> Result<(Vec<u8>, Vec<S>)> {
    let (mut g, bound, f) = frozen_features(net, images)?;
    let p = linear_posterior_var(&mut g, bound.head(), f)?;
    let c = net.classes();
    Ok(g.value(p)
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (best as u8, row[best])
        })
        .unzip())
}

/// Teacher pseudo-labels: arg-max of the teacher's LINEAR posterior, its
/// probability as confidence, valid where confidence >= `tau`.
pub fn pseudo_label<S: Scalar>(teacher: &Network<S>, images: &[&Image], tau: f64) -> Result<Vec<PseudoLabelMap<S>>> {
    let (labels, conf) = linear_argmax(teacher, images)?;
    let (h, w) = (images[0].height, images[0].width);
    Ok((0..images.len())
        .map(|n| {
            let r = n * h * w..(n + 1) * h * w;
            let confidence = conf[r.clone()].to_vec();
            PseudoLabelMap {
                height: h,
                width: w,
                labels: labels[r].to_vec(),
                valid: confidence.iter().map(|c| c.f64() >= tau).collect(),
                confidence,
            }
        })
        .collect())
}

/// Which heads a loss term covers.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub linear: bool,
    pub proto: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads {
        linear: true,
        proto: true,
    };

    pub fn of(variant: Variant) -> Self {
        Heads {
            linear: variant.linear_loss(),
            proto: variant.proto_loss(),
        }
    }
}

/// `sum_i w_i CE_i` for each enabled head, added together.
#[allow(clippy::too_many_arguments)]
fn dual_ce<S: Scalar>(
    g: &mut Graph<S>,
    bound: &BoundNetwork,
    protos: Var,
    bank: &PrototypeBank<S>,
    features: Var,
    targets: &[usize],
    weights: Vec<S>,
    heads: Heads,
    temperature: f64,
) -> Result<Var> {
    let mut terms = Vec::new();
    if heads.linear {
        let p = linear_posterior_var(g, bound.head(), features)?;
        let ce = g.cross_entropy(p, targets, CE_EPS)?;
        terms.push(g.weighted_sum(ce, weights.clone())?);
    }
    if heads.proto {
        let p = prototype_posterior_with(g, protos, bank, features, temperature)?;
        let ce = g.cross_entropy(p, targets, CE_EPS)?;
        terms.push(g.weighted_sum(ce, weights)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(S::zero())),
    };
    for &t in &terms[1.min(terms.len())..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

fn labeled_loss_var<S: Scalar>(
    g: &mut Graph<S>,
    bound: &BoundNetwork,
    protos: Var,
    bank: &PrototypeBank<S>,
    features: Var,
    batch: &[SegSample],
    heads: Heads,
    temperature: f64,
) -> Result<Var> {
    let targets: Vec<usize> = batch.iter().flat_map(|s| s.label.iter().map(|&l| l as usize)).collect();
    let w = S::of(1.0 / targets.len() as f64);
    dual_ce(g, bound, protos, bank, features, &targets, vec![w; targets.len()], heads, temperature)
}

fn unlabeled_loss_var<S: Scalar>(
    g: &mut Graph<S>,
    bound: &BoundNetwork,
    protos: Var,
    bank: &PrototypeBank<S>,
    features: Var,
    pseudo: &[PseudoLabelMap<S>],
    heads: Heads,
    temperature: f64,
) -> Result<Var> {
    let targets: Vec<usize> = pseudo.iter().flat_map(|m| m.labels.iter().map(|&l| l as usize)).collect();
    let n_valid: usize = pseudo.iter().map(|m| m.valid_count()).sum();
    let w = S::of(1.0 / n_valid.max(1) as f64);
    let weights = pseudo
        .iter()
        .flat_map(|m| m.valid.iter().map(|&v| if v { w } else { S::zero() }))
        .collect();
    dual_ce(g, bound, protos, bank, features, &targets, weights, heads, temperature)
}

/// Loss value and student gradients (in [`crate::model::PARAM_NAMES`] order).
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    pub loss: f64,
    pub grads: Vec<Tensor<S>>,
}

fn student_forward<S: Scalar>(
    g: &mut Graph<S>,
    student: &Network<S>,
    bound: &BoundNetwork,
    images: &[&Image],
) -> Result<Var> {
    let x = g.constant(images_to_tensor(images)?);
    student.features(g, bound, x)
}

/// `L_l`: per-image pixel-mean CE of each enabled head against ground truth,
/// averaged over the batch, summed over heads.
pub fn labeled_step<S: Scalar>(
    student: &Network<S>,
    bank: &PrototypeBank<S>,
    batch: &[SegSample],
    heads: Heads,
    temperature: f64,
) -> Result<StepOutput<S>> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let protos = g.constant(bank.prototypes().clone());
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let f = student_forward(&mut g, student, &bound, &images)?;
    let loss = labeled_loss_var(&mut g, &bound, protos, bank, f, batch, heads, temperature)?;
    g.backward(loss)?;
    Ok(StepOutput {
        loss: g.value(loss).item()?.f64(),
        grads: bound.params.iter().map(|&p| g.grad(p)).collect(),
    })
}

/// `L_u`: CE of each enabled head on the mixed images against the mixed
/// pseudo-labels, summed over valid pixels and divided by
/// `max(1, valid count)`.
pub fn unlabeled_step<S: Scalar>(
    student: &Network<S>,
    bank: &PrototypeBank<S>,
    mixed: &[Image],
    pseudo: &[PseudoLabelMap<S>],
    heads: Heads,
    temperature: f64,
) -> Result<StepOutput<S>> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let protos = g.constant(bank.prototypes().clone());
    let images: Vec<&Image> = mixed.iter().collect();
    let f = student_forward(&mut g, student, &bound, &images)?;
    let loss = unlabeled_loss_var(&mut g, &bound, protos, bank, f, pseudo, heads, temperature)?;
    g.backward(loss)?;
    Ok(StepOutput {
        loss: g.value(loss).item()?.f64(),
        grads: bound.params.iter().map(|&p| g.grad(p)).collect(),
    })
}

/// `L_u` evaluated on given per-pixel features (`[pixels, D]`, pixels of all
/// maps concatenated) instead of a forward pass.
pub fn unlabeled_loss_on_features<S: Scalar>(
    student: &Network<S>,
    bank: &PrototypeBank<S>,
    features: Tensor<S>,
    pseudo: &[PseudoLabelMap<S>],
    heads: Heads,
    temperature: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, false);
    let protos = g.constant(bank.prototypes().clone());
    let f = g.constant(features);
    let loss = unlabeled_loss_var(&mut g, &bound, protos, bank, f, pseudo, heads, temperature)?;
    Ok(g.value(loss).item()?.f64())
}

/// Strong view of an unlabeled batch: mixed images and mixed pseudo-labels.
#[derive(Debug, Clone)]
pub struct MixedBatch<S> {
    pub plans: Vec<CutMixPlan>,
    pub images: Vec<Image>,
    pub pseudo: Vec<PseudoLabelMap<S>>,
    /// Ground truth mixed alongside, for diagnostics only.
    pub truth: Vec<Vec<u8>>,
}

fn mix_truth(batch: &[SegSample], plans: &[CutMixPlan]) -> Vec<Vec<u8>> {
    plans
        .iter()
        .map(|p| {
            let (a, b) = (&batch[p.src_a], &batch[p.src_b]);
            mix_pixels(&a.label, &b.label, a.height(), a.width(), 1, &p.rect)
        })
        .collect()
}

/// Pseudo-labels the weak views with the teacher, then applies one CutMix
/// plan per item to images, labels, confidences and validity alike.
pub fn strong_view<S: Scalar>(
    teacher: &Network<S>,
    weak: &[SegSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Vec<PseudoLabelMap<S>>, MixedBatch<S>)> {
    let images: Vec<&Image> = weak.iter().map(|s| &s.image).collect();
    let pseudo = pseudo_label(teacher, &images, cfg.tau)?;
    let (h, w) = (weak[0].height(), weak[0].width());
    let plans = plan_batch(weak.len(), h, w, rng);
    let owned: Vec<Image> = weak.iter().map(|s| s.image.clone()).collect();
    let mixed_images = cutmix(&owned, &plans)?;
    let mut mixed_pseudo = cutmix(&pseudo, &plans)?;
    if cfg.indicator == Indicator::Literal {
        let refs: Vec<&Image> = mixed_images.iter().collect();
        let (_, conf) = linear_argmax(teacher, &refs)?;
        for (n, m) in mixed_pseudo.iter_mut().enumerate() {
            m.regate(&conf[n * h * w..(n + 1) * h * w], cfg.tau);
        }
    }
    let truth = mix_truth(weak, &plans);
    Ok((
        pseudo,
        MixedBatch {
            plans,
            images: mixed_images,
            pseudo: mixed_pseudo,
            truth,
        },
    ))
}

/// What one optimizer step did.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub l_l: f64,
    pub l_u: f64,
    pub lr: f64,
    /// Teacher pseudo-labels on the weak views vs. their ground truth.
    pub pseudo: PseudoLabelCounts,
    pub bank_update: UpdateStats,
    /// Sum of |grad| that reached the prototype matrix on the graph.
    pub proto_grad_abs_sum: f64,
    pub teacher_unchanged_by_optimizer: bool,
    pub bank_unchanged_by_optimizer: bool,
    pub zero_norm_features: u64,
    pub unlabeled_executed: bool,
}

fn zero_rows<S: Scalar>(data: &[S], dim: usize) -> u64 {
    data.chunks_exact(dim).filter(|r| r.iter().all(|v| v.is_zero())).count() as u64
}

/// One semi-supervised step on already weakly augmented batches:
/// `L = L_l + lambda_u * L_u`, SGD on the student, prototype EMA, teacher EMA.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    cfg: &TrainConfig,
    labeled: &[SegSample],
    unlabeled: Option<&[SegSample]>,
    cutmix_rng: &mut Rng,
) -> Result<StepReport> {
    let heads = Heads::of(cfg.variant);
    let mut report = StepReport::default();
    let unlabeled = unlabeled.filter(|u| cfg.variant.unlabeled() && !u.is_empty());

    let strong = match unlabeled {
        Some(weak) => {
            let (pseudo, mixed) = strong_view(&state.teacher.net, weak, cfg, cutmix_rng)?;
            for (m, s) in pseudo.iter().zip(weak) {
                report.pseudo.add(&m.labels, &m.valid, &s.label)?;
            }
            Some(mixed)
        }
        None => None,
    };

    let mut g = Graph::new();
    let bound = state.student.bind(&mut g, true);
    let protos = g.constant(state.bank.prototypes().clone());
    let l_images: Vec<&Image> = labeled.iter().map(|s| &s.image).collect();
    let f_l = student_forward(&mut g, &state.student, &bound, &l_images)?;
    let l_l = labeled_loss_var(&mut g, &bound, protos, &state.bank, f_l, labeled, heads, cfg.temperature)?;
    report.l_l = g.value(l_l).item()?.f64();
    let mut loss = l_l;
    let mut f_u = None;
    if let Some(mixed) = &strong {
        let u_images: Vec<&Image> = mixed.images.iter().collect();
        let f = student_forward(&mut g, &state.student, &bound, &u_images)?;
        let l_u = unlabeled_loss_var(&mut g, &bound, protos, &state.bank, f, &mixed.pseudo, heads, cfg.temperature)?;
        report.l_u = g.value(l_u).item()?.f64();
        report.unlabeled_executed = true;
        state.unlabeled_steps += 1;
        let weighted = g.scale(l_u, S::of(cfg.lambda_u));
        loss = g.add(loss, weighted)?;
        f_u = Some(f);
    }
    g.backward(loss)?;
    report.proto_grad_abs_sum = g.grad(protos).data().iter().map(|v| v.f64().abs()).sum();

    let teacher_before = state.teacher.net.fingerprint();
    let bank_before = state.bank.prototypes().clone();
    // a frozen linear head takes no optimizer step at all (no decay either)
    let n_params = if cfg.variant.linear_loss() { 9 } else { 8 };
    let grads: Vec<Tensor<S>> = bound.params[..n_params].iter().map(|&p| g.grad(p)).collect();
    {
        let mut params = state.student.params_mut();
        report.lr = state.optimizer.step(&mut params[..n_params], &grads, state.step)?;
    }
    report.teacher_unchanged_by_optimizer = state.teacher.net.fingerprint() == teacher_before;
    report.bank_unchanged_by_optimizer = *state.bank.prototypes() == bank_before;
    state.step += 1;

    let d = state.bank.dim();
    let fl = g.value(f_l).data();
    report.zero_norm_features = zero_rows(fl, d);
    if let Some(f) = f_u {
        report.zero_norm_features += zero_rows(g.value(f).data(), d);
    }
    state.zero_norm_features += report.zero_norm_features;

    if cfg.variant.proto_update() {
        let l_targets = labeled.iter().flat_map(|s| s.label.iter().copied());
        let mut samples: Vec<PixelFeatureSample<S>> = fl
            .chunks_exact(d)
            .zip(l_targets)
            .map(|(feature, c)| PixelFeatureSample {
                feature,
                class_id: c as usize,
                valid: true,
            })
            .collect();
        if let (Some(f), Some(mixed)) = (f_u, &strong) {
            let labels = mixed.pseudo.iter().flat_map(|m| m.labels.iter().copied().zip(m.valid.iter().copied()));
            samples.extend(g.value(f).data().chunks_exact(d).zip(labels).map(|(feature, (c, valid))| {
                PixelFeatureSample {
                    feature,
                    class_id: c as usize,
                    valid,
                }
            }));
        }
        report.bank_update = state.bank.update(samples);
    }
    state.teacher.update(&state.student)?;
    Ok(report)
}

/// Labeled, unlabeled and val samples of one dataset.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub spec: DatasetSpec,
    pub labeled: Vec<SegSample>,
    pub unlabeled: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

impl DataSplits {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        Ok(DataSplits {
            spec: spec.clone(),
            labeled: spec.generate_split(Split::Labeled)?,
            unlabeled: spec.generate_split(Split::Unlabeled)?,
            val: spec.generate_split(Split::Val)?,
        })
    }
}

fn augment_batch(samples: &[&SegSample], crop: (usize, usize), seed: u64) -> Result<Vec<SegSample>> {
    samples.iter().map(|s| weak_augment(s, crop, seed)).collect()
}

/// Endless stream of labeled batches, reshuffled after every pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
}

impl Cycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut c = Cycler {
            order: (0..n).collect(),
            pos: 0,
            pass: 0,
            seed,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut rng = rng::stream(self.seed, tag::SHUFFLE, (1 << 32) | self.pass);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
        self.pass += 1;
        self.pos = 0;
    }

    fn next_batch(&mut self, b: usize) -> Vec<usize> {
        (0..b)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Supervised warm-up: linear-head CE on weakly augmented labeled batches
/// from `net`, with its own SGD and schedule. An epoch is `steps_per_epoch`
/// batches drawn from a reshuffling pass over the labeled set, so warm-up
/// and semi-supervised epochs take the same number of steps. Returns the
/// per-epoch mean loss.
pub fn warmup<S: Scalar>(
    net: &mut Network<S>,
    labeled: &[SegSample],
    steps_per_epoch: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    if cfg.warmup_epochs == 0 {
        return invalid("warmup_epochs", "must be positive");
    }
    if steps_per_epoch == 0 {
        return invalid("steps_per_epoch", "must be positive");
    }
    let mut opt = Sgd::new(cfg.sgd(cfg.warmup_lr, cfg.warmup_epochs * steps_per_epoch))?;
    let bank = PrototypeBank::from_prototypes(
        Tensor::full(&[net.classes(), net.feature_dim()], S::one()),
        net.classes(),
        1,
        1.0,
    )?;
    let linear = Heads {
        linear: true,
        proto: false,
    };
    let mut cycler = Cycler::new(labeled.len(), rng::derive_seed(seed, tag::SHUFFLE, 1 << 36));
    let mut losses = Vec::with_capacity(cfg.warmup_epochs);
    let mut step = 0;
    for epoch in 0..cfg.warmup_epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let refs: Vec<&SegSample> = cycler.next_batch(cfg.batch_labeled).iter().map(|&i| &labeled[i]).collect();
            // warm-up augment seeds live above every semi-supervised step index
            let aug = rng::derive_seed(seed, tag::AUGMENT, (1 << 40) | step as u64);
            let batch = augment_batch(&refs, cfg.crop(), aug)?;
            let out = labeled_step(net, &bank, &batch, linear, cfg.temperature)?;
            opt.step(&mut net.params_mut(), &out.grads, step)?;
            total += out.loss;
            step += 1;
        }
        losses.push(total / steps_per_epoch as f64);
        debug!("warmup epoch {epoch}: loss {:.4}", losses[epoch]);
    }
    Ok(losses)
}

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_l: f64,
    pub l_u: f64,
    pub val_miou_linear: f64,
    pub val_miou_proto: f64,
    pub valid_pixel_fraction: f64,
    pub pseudo_label_accuracy: f64,
    pub intra_var: f64,
    pub inter_var: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,L_l,L_u,val_mIoU_linear,val_mIoU_proto,valid_pixel_fraction,pseudo_label_accuracy,intra_var,inter_var";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.l_l,
            self.l_u,
            self.val_miou_linear,
            self.val_miou_proto,
            self.valid_pixel_fraction,
            self.pseudo_label_accuracy,
            self.intra_var,
            self.inter_var
        )
    }

    pub fn primary_miou(&self, variant: Variant) -> f64 {
        match variant.primary_head() {
            Head::Linear => self.val_miou_linear,
            Head::Prototype => self.val_miou_proto,
        }
    }
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in log {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput<S> {
    pub state: TrainState<S>,
    pub warmup_losses: Vec<f64>,
    pub log: Vec<EpochMetrics>,
}

/// Fresh student trained by [`warmup`]; depends only on the warm-up fields of
/// `cfg` (batch, crop, feature width, warm-up schedule), not on the variant,
/// threshold or bank settings.
pub fn warm_start<S: Scalar>(cfg: &TrainConfig, data: &DataSplits, seed: u64) -> Result<(Network<S>, Vec<f64>)> {
    cfg.validate()?;
    let mut student = Network::init(data.spec.classes, cfg.feature_dim, seed);
    let steps = cfg.steps_per_epoch(data.labeled.len(), data.unlabeled.len());
    let losses = warmup(&mut student, &data.labeled, steps, cfg, seed)?;
    Ok((student, losses))
}

/// Bank initialization from a warmed-up student; teacher copied from it.
pub fn initialize_from<S: Scalar>(
    cfg: &TrainConfig,
    data: &DataSplits,
    seed: u64,
    student: Network<S>,
) -> Result<TrainState<S>> {
    cfg.validate()?;
    let mut bank = init_bank(
        &student,
        &data.labeled,
        &BankInit {
            k: cfg.k,
            pixels_per_class: cfg.pixels_per_class,
            alpha: cfg.alpha,
            seed,
            ..BankInit::default()
        },
    )?;
    bank.rule = cfg.proto_rule;
    let total = cfg.epochs * cfg.steps_per_epoch(data.labeled.len(), data.unlabeled.len());
    Ok(TrainState {
        teacher: Teacher::from_student(&student, cfg.ema_momentum),
        student,
        bank,
        optimizer: Sgd::new(cfg.sgd(cfg.lr, total))?,
        step: 0,
        epoch: 0,
        unlabeled_steps: 0,
        zero_norm_features: 0,
    })
}

/// Warm-up followed by [`initialize_from`].
pub fn initialize<S: Scalar>(cfg: &TrainConfig, data: &DataSplits, seed: u64) -> Result<(TrainState<S>, Vec<f64>)> {
    let (student, losses) = warm_start(cfg, data, seed)?;
    Ok((initialize_from(cfg, data, seed, student)?, losses))
}

/// Runs one semi-supervised epoch over `data`, returning its logged metrics.
pub fn run_epoch<S: Scalar>(
    state: &mut TrainState<S>,
    cfg: &TrainConfig,
    data: &DataSplits,
    seed: u64,
) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let steps = cfg.steps_per_epoch(data.labeled.len(), data.unlabeled.len());
    let mut cycler = Cycler::new(data.labeled.len(), rng::derive_seed(seed, tag::SHUFFLE, 1 << 40));
    // fast-forward the labeled stream to this epoch
    for _ in 0..epoch * steps {
        cycler.next_batch(cfg.batch_labeled);
    }
    let mut u_order: Vec<usize> = (0..data.unlabeled.len()).collect();
    u_order.shuffle(&mut rng::stream(seed, tag::SHUFFLE, (1 << 48) | epoch as u64));
    let mut pseudo = PseudoLabelCounts::default();
    let (mut sum_l, mut sum_u) = (0.0, 0.0);
    for s in 0..steps {
        let step = state.step as u64;
        let aug_seed = rng::derive_seed(seed, tag::AUGMENT, step);
        let l_refs: Vec<&SegSample> = cycler.next_batch(cfg.batch_labeled).iter().map(|&i| &data.labeled[i]).collect();
        let labeled = augment_batch(&l_refs, cfg.crop(), aug_seed)?;
        let unlabeled = if cfg.variant.unlabeled() && !data.unlabeled.is_empty() {
            let lo = (s * cfg.batch_unlabeled).min(u_order.len());
            let hi = (lo + cfg.batch_unlabeled).min(u_order.len());
            let refs: Vec<&SegSample> = u_order[lo..hi].iter().map(|&i| &data.unlabeled[i]).collect();
            Some(augment_batch(&refs, cfg.crop(), aug_seed)?)
        } else {
            None
        };
        let mut cut_rng = rng::stream(seed, tag::CUTMIX, step);
        let r = train_step(state, cfg, &labeled, unlabeled.as_deref(), &mut cut_rng)?;
        sum_l += r.l_l;
        sum_u += r.l_u;
        let p = r.pseudo;
        pseudo.total += p.total;
        pseudo.valid += p.valid;
        pseudo.correct_valid += p.correct_valid;
    }
    state.epoch += 1;
    let eval = state.evaluate(&data.val, cfg.temperature, cfg.eval_pixels_per_class, seed)?;
    let q = pseudo.quality();
    let m = EpochMetrics {
        epoch: state.epoch,
        l_l: sum_l / steps as f64,
        l_u: sum_u / steps as f64,
        val_miou_linear: eval.miou_linear,
        val_miou_proto: eval.miou_proto,
        valid_pixel_fraction: if pseudo.total == 0 { 0.0 } else { q.coverage },
        pseudo_label_accuracy: q.precision,
        intra_var: eval.discrimination.intra_trace,
        inter_var: eval.discrimination.inter_trace,
    };
    info!(
        "epoch {}: L_l {:.4} L_u {:.4} mIoU linear {:.4} proto {:.4} valid {:.3}",
        m.epoch, m.l_l, m.l_u, m.val_miou_linear, m.val_miou_proto, m.valid_pixel_fraction
    );
    Ok(m)
}

/// Full run: warm-up, bank initialization, then `cfg.epochs` semi-supervised
/// epochs. `on_epoch` sees the state after every epoch.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    data: &DataSplits,
    seed: u64,
    on_epoch: impl FnMut(&TrainState<S>, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutput<S>> {
    let (student, warmup_losses) = warm_start(cfg, data, seed)?;
    train_from(cfg, data, seed, student, warmup_losses, on_epoch)
}

/// [`train`] from an already warmed-up student.
pub fn train_from<S: Scalar>(
    cfg: &TrainConfig,
    data: &DataSplits,
    seed: u64,
    student: Network<S>,
    warmup_losses: Vec<f64>,
    mut on_epoch: impl FnMut(&TrainState<S>, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutput<S>> {
    let mut state = initialize_from(cfg, data, seed, student)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let m = run_epoch(&mut state, cfg, data, seed)?;
        on_epoch(&state, &m)?;
        log.push(m);
    }
    Ok(TrainOutput {
        state,
        warmup_losses,
        log,
    })
}

#[cfg(test)]
mod tests;
