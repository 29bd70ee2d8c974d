use rand::seq::index::sample as sample_indices;
use serde::Serialize;

use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::metrics::{discrimination, ConfusionMatrix, DiscriminationStats, PseudoLabelCounts, PseudoLabelQuality};
use crate::model::{extract_features, linear_posterior, prototype_posterior, Checkpoint, Network, Teacher};
use crate::numerics::{Sgd, SgdConfig};
use crate::protobank::PrototypeBank;
use crate::rng::{self, tag};
use crate::scalar::Scalar;

use super::{pseudo_label, TrainConfig, Variant};

/// Bumped whenever the checkpoint entry set changes.
pub const STATE_VERSION: f64 = 1.0;

/// Everything a checkpoint persists.
#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub student: Network<S>,
    pub teacher: Teacher<S>,
    pub bank: PrototypeBank<S>,
    pub optimizer: Sgd<S>,
    /// Optimizer steps taken in the semi-supervised phase.
    pub step: usize,
    pub epoch: usize,
    /// Steps on which the unlabeled loss was built.
    pub unlabeled_steps: u64,
    /// Pixel features with zero norm seen by the training step (their cosine
    /// similarity is defined as 0).
    pub zero_norm_features: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub miou_linear: f64,
    pub miou_proto: f64,
    pub discrimination: DiscriminationStats,
    pub pixels: u64,
}

/// Confusion matrices of both heads of `net` over `samples`, plus the
/// discrimination statistics of up to `per_class` seeded pixel features per class.
pub fn evaluate<S: Scalar>(
    net: &Network<S>,
    bank: &PrototypeBank<S>,
    samples: &[SegSample],
    temperature: f64,
    per_class: usize,
    seed: u64,
) -> Result<EvalReport> {
    let c = net.classes();
    let d = net.feature_dim();
    let mut cm_lin = ConfusionMatrix::new(c);
    let mut cm_proto = ConfusionMatrix::new(c);
    let mut by_class: Vec<Vec<S>> = vec![Vec::new(); c];
    for s in samples {
        let f = extract_features(net, &s.image)?;
        cm_lin.add(&s.label, &linear_posterior(&net.head, &f)?.labels())?;
        cm_proto.add(&s.label, &prototype_posterior(bank, &f, temperature)?.labels())?;
        for (row, &l) in f.rows().zip(&s.label) {
            by_class[l as usize].extend_from_slice(row);
        }
    }
    let mut feats = Vec::new();
    let mut classes = Vec::new();
    for (k, all) in by_class.iter().enumerate() {
        let n = all.len() / d;
        let mut picked: Vec<usize> = if n > per_class {
            sample_indices(&mut rng::stream(seed, tag::EVAL_SAMPLE, k as u64), n, per_class).into_vec()
        } else {
            (0..n).collect()
        };
        picked.sort_unstable();
        for i in picked {
            feats.extend_from_slice(&all[i * d..(i + 1) * d]);
            classes.push(k);
        }
    }
    Ok(EvalReport {
        miou_linear: cm_lin.miou()?,
        miou_proto: cm_proto.miou()?,
        discrimination: discrimination(&feats, d, &classes)?,
        pixels: cm_lin.total(),
    })
}

/// Pseudo-label quality of `teacher` on full, un-augmented frames.
pub fn pseudo_label_report<S: Scalar>(teacher: &Network<S>, samples: &[SegSample], tau: f64) -> Result<PseudoLabelQuality> {
    let mut counts = PseudoLabelCounts::default();
    for s in samples {
        let m = pseudo_label(teacher, &[&s.image], tau)?;
        counts.add(&m[0].labels, &m[0].valid, &s.label)?;
    }
    Ok(counts.quality())
}

impl<S: Scalar> TrainState<S> {
    /// Evaluates the teacher (the network training produces) with the bank.
    pub fn evaluate(&self, samples: &[SegSample], temperature: f64, per_class: usize, seed: u64) -> Result<EvalReport> {
        evaluate(&self.teacher.net, &self.bank, samples, temperature, per_class, seed)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_scalar("meta.version", STATE_VERSION);
        ck.push_scalar("meta.scalar_bits", S::BITS as f64);
        ck.push_scalar("meta.step", self.step as f64);
        ck.push_scalar("meta.epoch", self.epoch as f64);
        ck.push_scalar("meta.unlabeled_steps", self.unlabeled_steps as f64);
        ck.push_scalar("meta.zero_norm_features", self.zero_norm_features as f64);
        ck.push_scalar("teacher.momentum", self.teacher.momentum);
        self.student.write_checkpoint(&mut ck, "student");
        self.teacher.net.write_checkpoint(&mut ck, "teacher");
        self.bank.write_checkpoint(&mut ck, "bank");
        let o = self.optimizer.config();
        ck.push(
            "opt.config",
            &[5],
            vec![o.base_lr, o.weight_decay, o.momentum, o.total_iters as f64, o.poly_power],
        );
        ck.push_scalar("opt.slots", self.optimizer.velocity().len() as f64);
        for (i, v) in self.optimizer.velocity().iter().enumerate() {
            ck.push(format!("opt.velocity.{i}"), &[v.len()], v.iter().map(|x| x.f64()).collect());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.scalar("meta.version")? != STATE_VERSION {
            return Err(Error::Checkpoint("unsupported state version".into()));
        }
        let student = Network::read_checkpoint(ck, "student")?;
        let teacher = Teacher {
            net: Network::read_checkpoint(ck, "teacher")?,
            momentum: ck.scalar("teacher.momentum")?,
        };
        let bank = PrototypeBank::read_checkpoint(ck, "bank")?;
        let (_, o) = ck.get("opt.config")?;
        let [base_lr, weight_decay, momentum, total, poly_power] = o else {
            return Err(Error::Checkpoint("opt.config must hold 5 values".into()));
        };
        let mut optimizer = Sgd::new(SgdConfig {
            base_lr: *base_lr,
            weight_decay: *weight_decay,
            momentum: *momentum,
            total_iters: *total as usize,
            poly_power: *poly_power,
        })?;
        let slots = ck.scalar("opt.slots")? as usize;
        let velocity = (0..slots)
            .map(|i| Ok(ck.get(&format!("opt.velocity.{i}"))?.1.iter().map(|&v| S::of(v)).collect()))
            .collect::<Result<Vec<Vec<S>>>>()?;
        optimizer.set_velocity(velocity);
        Ok(TrainState {
            student,
            teacher,
            bank,
            optimizer,
            step: ck.scalar("meta.step")? as usize,
            epoch: ck.scalar("meta.epoch")? as usize,
            unlabeled_steps: ck.scalar("meta.unlabeled_steps")? as u64,
            zero_norm_features: ck.scalar("meta.zero_norm_features")? as u64,
        })
    }
}

/// Run settings stored next to the state so a checkpoint can be evaluated
/// exactly as the trainer evaluated it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMeta {
    pub seed: u64,
    pub variant: Variant,
    pub tau: f64,
    pub temperature: f64,
    pub eval_pixels_per_class: usize,
}

impl RunMeta {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Self {
        RunMeta {
            seed,
            variant: cfg.variant,
            tau: cfg.tau,
            temperature: cfg.temperature,
            eval_pixels_per_class: cfg.eval_pixels_per_class,
        }
    }

    pub fn write(&self, ck: &mut Checkpoint) {
        // u64 seeds above 2^53 would not survive the f64 round trip
        ck.push(
            "run.seed",
            &[2],
            vec![(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64],
        );
        ck.push_scalar("run.variant", self.variant.index() as f64);
        ck.push_scalar("run.tau", self.tau);
        ck.push_scalar("run.temperature", self.temperature);
        ck.push_scalar("run.eval_pixels_per_class", self.eval_pixels_per_class as f64);
    }

    pub fn read(ck: &Checkpoint) -> Result<Self> {
        let (_, seed) = ck.get("run.seed")?;
        let [hi, lo] = seed else {
            return Err(Error::Checkpoint("run.seed must hold 2 values".into()));
        };
        let variant = *Variant::ALL
            .get(ck.scalar("run.variant")? as usize)
            .ok_or_else(|| Error::Checkpoint("unknown variant".into()))?;
        Ok(RunMeta {
            seed: ((*hi as u64) << 32) | *lo as u64,
            variant,
            tau: ck.scalar("run.tau")?,
            temperature: ck.scalar("run.temperature")?,
            eval_pixels_per_class: ck.scalar("run.eval_pixels_per_class")? as usize,
        })
    }
}
