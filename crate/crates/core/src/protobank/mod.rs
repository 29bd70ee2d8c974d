//! Prototype bank: `K` prototypes per class, initialized by clustering
//! warm-up features and maintained by exponential moving average.

mod kmeans;

use std::fmt::Write as _;

use log::warn;
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeans, DEFAULT_MAX_ITERS};

use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::model::{extract_features, Checkpoint, Network};
use crate::numerics::{cosine, Tensor};
use crate::rng::{self, tag};
use crate::scalar::Scalar;

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_PIXELS_PER_CLASS: usize = 1000;

/// How a batch of assigned features moves a prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// One EMA step per prototype per batch, towards the mean of its features.
    #[default]
    BatchMean,
    /// One EMA step per pixel, in input order.
    PerPixel,
}

/// A pixel feature offered to [`PrototypeBank::update`].
#[derive(Debug, Clone, Copy)]
pub struct PixelFeatureSample<'a, S> {
    pub feature: &'a [S],
    pub class_id: usize,
    /// Gate: only valid samples reach a prototype.
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub gated_in: u64,
    pub gated_out: u64,
    pub prototypes_moved: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<S> {
    /// `[classes * k, dim]`, class-major: rows `c*k..(c+1)*k` belong to class `c`.
    prototypes: Tensor<S>,
    class_of: Vec<usize>,
    classes: usize,
    k: usize,
    pub alpha: f64,
    pub rule: UpdateRule,
    update_counts: Vec<u64>,
}

impl<S: Scalar> PrototypeBank<S> {
    /// Builds a bank from class-major prototype rows.
    pub fn from_prototypes(prototypes: Tensor<S>, classes: usize, k: usize, alpha: f64) -> Result<Self> {
        let s = prototypes.shape();
        if s.len() != 2 || s[0] != classes * k || k == 0 || classes == 0 {
            return Err(Error::ShapeMismatch {
                op: "prototype_bank",
                left: s.to_vec(),
                right: vec![classes * k, 0],
            });
        }
        if !prototypes.is_finite() {
            return Err(Error::InvalidConfig {
                field: "prototypes".into(),
                reason: "non-finite value".into(),
            });
        }
        Ok(PrototypeBank {
            class_of: (0..classes * k).map(|i| i / k).collect(),
            prototypes,
            classes,
            k,
            alpha,
            rule: UpdateRule::BatchMean,
            update_counts: vec![0; classes * k],
        })
    }

    pub fn prototypes(&self) -> &Tensor<S> {
        &self.prototypes
    }

    pub fn prototype(&self, i: usize) -> &[S] {
        let d = self.dim();
        &self.prototypes.data()[i * d..(i + 1) * d]
    }

    pub fn class_of(&self) -> &[usize] {
        &self.class_of
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn update_counts(&self) -> &[u64] {
        &self.update_counts
    }

    /// Most similar (cosine) prototype of `class_id`; ties go to the lowest
    /// index. Returns the global row index.
    pub fn assign(&self, feature: &[S], class_id: usize) -> usize {
        let start = class_id * self.k;
        let mut best = start;
        let mut best_sim = cosine(feature, self.prototype(start));
        for i in start + 1..start + self.k {
            let s = cosine(feature, self.prototype(i));
            if s > best_sim {
                best = i;
                best_sim = s;
            }
        }
        best
    }

    /// EMA maintenance: `p <- alpha * p + (1 - alpha) * f` for every valid
    /// sample `f` assigned to `p` (see [`UpdateRule`]).
    pub fn update<'a>(&mut self, samples: impl IntoIterator<Item = PixelFeatureSample<'a, S>>) -> UpdateStats
    where
        S: 'a,
    {
        let d = self.dim();
        let (alpha, one_m) = (self.alpha, 1.0 - self.alpha);
        let mut stats = UpdateStats::default();
        let mut touched = vec![false; self.len()];
        match self.rule {
            UpdateRule::BatchMean => {
                let mut sums = vec![0.0f64; self.len() * d];
                let mut counts = vec![0u64; self.len()];
                for s in samples {
                    if !s.valid || s.class_id >= self.classes {
                        stats.gated_out += 1;
                        continue;
                    }
                    stats.gated_in += 1;
                    let j = self.assign(s.feature, s.class_id);
                    counts[j] += 1;
                    sums[j * d..(j + 1) * d]
                        .iter_mut()
                        .zip(s.feature)
                        .for_each(|(a, v)| *a += v.f64());
                }
                let data = self.prototypes.data_mut();
                for j in 0..counts.len() {
                    if counts[j] == 0 {
                        continue;
                    }
                    let inv = 1.0 / counts[j] as f64;
                    for t in 0..d {
                        let mean = sums[j * d + t] * inv;
                        data[j * d + t] = S::of(alpha * data[j * d + t].f64() + one_m * mean);
                    }
                    touched[j] = true;
                }
            }
            UpdateRule::PerPixel => {
                for s in samples {
                    if !s.valid || s.class_id >= self.classes {
                        stats.gated_out += 1;
                        continue;
                    }
                    stats.gated_in += 1;
                    let j = self.assign(s.feature, s.class_id);
                    let row = &mut self.prototypes.data_mut()[j * d..(j + 1) * d];
                    for (p, v) in row.iter_mut().zip(s.feature) {
                        *p = S::of(alpha * p.f64() + one_m * v.f64());
                    }
                    touched[j] = true;
                }
            }
        }
        for (c, t) in self.update_counts.iter_mut().zip(&touched) {
            if *t {
                *c += 1;
                stats.prototypes_moved += 1;
            }
        }
        stats
    }

    /// `class_id,proto_index,v0,...` one row per prototype.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,proto_index");
        for t in 0..self.dim() {
            let _ = write!(out, ",v{t}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{}", self.class_of[i], i % self.k);
            for v in self.prototype(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_tensor(format!("{prefix}.prototypes"), &self.prototypes);
        ck.push(
            format!("{prefix}.class_of"),
            &[self.len()],
            self.class_of.iter().map(|&c| c as f64).collect(),
        );
        ck.push(
            format!("{prefix}.update_counts"),
            &[self.len()],
            self.update_counts.iter().map(|&c| c as f64).collect(),
        );
        ck.push(
            format!("{prefix}.meta"),
            &[4],
            vec![
                self.classes as f64,
                self.k as f64,
                self.alpha,
                match self.rule {
                    UpdateRule::BatchMean => 0.0,
                    UpdateRule::PerPixel => 1.0,
                },
            ],
        );
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let (_, meta) = ck.get(&format!("{prefix}.meta"))?;
        let [classes, k, alpha, rule] = meta else {
            return Err(Error::Checkpoint("bank meta must have 4 values".into()));
        };
        let mut bank = Self::from_prototypes(
            ck.tensor(&format!("{prefix}.prototypes"))?,
            *classes as usize,
            *k as usize,
            *alpha,
        )?;
        bank.rule = if *rule == 1.0 {
            UpdateRule::PerPixel
        } else {
            UpdateRule::BatchMean
        };
        let (_, tags) = ck.get(&format!("{prefix}.class_of"))?;
        if tags.iter().map(|&t| t as usize).ne(bank.class_of.iter().copied()) {
            return Err(Error::Checkpoint("bank class tags are not class-major".into()));
        }
        let (_, counts) = ck.get(&format!("{prefix}.update_counts"))?;
        if counts.len() != bank.len() {
            return Err(Error::Checkpoint("bank update counts length".into()));
        }
        bank.update_counts = counts.iter().map(|&c| c as u64).collect();
        Ok(bank)
    }
}

/// Settings for building the initial bank from a warmed-up network.
#[derive(Debug, Clone, Copy)]
pub struct BankInit {
    pub k: usize,
    pub pixels_per_class: usize,
    pub alpha: f64,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for BankInit {
    fn default() -> Self {
        BankInit {
            k: DEFAULT_K,
            pixels_per_class: DEFAULT_PIXELS_PER_CLASS,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

/// Collects per-class pixel features (full-resolution maps) of the labeled set.
pub fn class_features<S: Scalar>(net: &Network<S>, labeled: &[SegSample]) -> Result<Vec<Vec<S>>> {
    let mut per_class = vec![Vec::new(); net.classes()];
    for s in labeled {
        let fmap = extract_features(net, &s.image)?;
        for (row, &c) in fmap.rows().zip(&s.label) {
            per_class
                .get_mut(c as usize)
                .ok_or(Error::MissingClass(c as usize))?
                .extend_from_slice(row);
        }
    }
    Ok(per_class)
}

/// Clusters sampled ground-truth pixel features of each class into `k`
/// prototypes.
pub fn init_bank<S: Scalar>(net: &Network<S>, labeled: &[SegSample], cfg: &BankInit) -> Result<PrototypeBank<S>> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let d = net.feature_dim();
    let per_class = class_features(net, labeled)?;
    let mut protos = Vec::with_capacity(net.classes() * cfg.k * d);
    for (c, feats) in per_class.iter().enumerate() {
        let n = feats.len() / d;
        if n == 0 {
            return Err(Error::MissingClass(c));
        }
        let mut rng = rng::stream(cfg.seed, tag::PROTO_SAMPLE, c as u64);
        let mut picked: Vec<usize> = if n > cfg.pixels_per_class {
            sample_indices(&mut rng, n, cfg.pixels_per_class).into_vec()
        } else {
            (0..n).collect()
        };
        picked.sort_unstable();
        let points: Vec<S> = picked.iter().flat_map(|&i| feats[i * d..(i + 1) * d].iter().copied()).collect();
        if n < cfg.k {
            warn!("class {c}: only {n} labeled pixels for {} prototypes", cfg.k);
        }
        let km = kmeans(&points, d, cfg.k, rng::derive_seed(cfg.seed, tag::KMEANS, c as u64), cfg.max_iters);
        protos.extend_from_slice(&km.centroids);
    }
    let t = Tensor::new(&[net.classes() * cfg.k, d], protos)?;
    PrototypeBank::from_prototypes(t, net.classes(), cfg.k, cfg.alpha)
}
