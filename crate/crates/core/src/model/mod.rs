//! Feature extractor, linear head and prototype head, plus the EMA teacher.
//!
//! Backbone: `conv3x3(3->16) relu conv3x3(16->32, /2) relu conv3x3(32->32)
//! relu upsample(x2, bilinear, back to input size) conv1x1(32->D)`. The
//! output is one `D`-dimensional feature per input pixel.

mod checkpoint;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, MAGIC};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::protobank::PrototypeBank;
use crate::rng::{self, tag};
use crate::scalar::Scalar;

pub const DEFAULT_FEATURE_DIM: usize = 16;
/// Subtracted from every input value before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;
/// Probability clamp used inside every cross-entropy.
pub const CE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<S> {
    /// `[cout, cin, k, k]`
    pub weight: Tensor<S>,
    /// `[cout]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> Conv<S> {
    fn he(cout: usize, cin: usize, k: usize, rng: &mut rng::Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Conv {
            weight: Tensor::from_fn(&[cout, cin, k, k], |_| S::of(normal.sample(rng))),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<S> {
    pub conv1: Conv<S>,
    pub conv2: Conv<S>,
    pub conv3: Conv<S>,
    pub proj: Conv<S>,
}

/// Per-class weight vectors, `[classes, feature_dim]`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<S> {
    pub weight: Tensor<S>,
}

impl<S: Scalar> LinearHead<S> {
    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Backbone plus linear head: the parameter set shared by student and teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    pub backbone: Backbone<S>,
    pub head: LinearHead<S>,
}

pub const PARAM_NAMES: [&str; 9] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "proj.weight",
    "proj.bias",
    "head.weight",
];

/// Graph handles for every parameter of a [`Network`].
#[derive(Debug, Clone, Copy)]
pub struct BoundNetwork {
    pub params: [Var; 9],
}

impl BoundNetwork {
    pub fn head(&self) -> Var {
        self.params[8]
    }
}

impl<S: Scalar> Network<S> {
    pub fn init(classes: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, tag::INIT, 0);
        let backbone = Backbone {
            conv1: Conv::he(16, 3, 3, &mut rng),
            conv2: Conv::he(32, 16, 3, &mut rng),
            conv3: Conv::he(32, 32, 3, &mut rng),
            proj: Conv::he(feature_dim, 32, 1, &mut rng),
        };
        let normal = Normal::new(0.0, (1.0 / feature_dim as f64).sqrt()).expect("finite std");
        let head = LinearHead {
            weight: Tensor::from_fn(&[classes, feature_dim], |_| S::of(normal.sample(&mut rng))),
        };
        Network { backbone, head }
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.feature_dim()
    }

    pub fn params(&self) -> [&Tensor<S>; 9] {
        let b = &self.backbone;
        [
            &b.conv1.weight,
            &b.conv1.bias,
            &b.conv2.weight,
            &b.conv2.bias,
            &b.conv3.weight,
            &b.conv3.bias,
            &b.proj.weight,
            &b.proj.bias,
            &self.head.weight,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<S>; 9] {
        let b = &mut self.backbone;
        [
            &mut b.conv1.weight,
            &mut b.conv1.bias,
            &mut b.conv2.weight,
            &mut b.conv2.bias,
            &mut b.conv3.weight,
            &mut b.conv3.bias,
            &mut b.proj.weight,
            &mut b.proj.bias,
            &mut self.head.weight,
        ]
    }

    /// SHA-256 over every parameter value, for bit-level change detection.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        for (name, p) in PARAM_NAMES.iter().zip(self.params()) {
            ck.push_tensor(format!("{prefix}.{name}"), p);
        }
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let t = |i: usize| ck.tensor::<S>(&format!("{prefix}.{}", PARAM_NAMES[i]));
        let conv = |w: usize| -> Result<Conv<S>> {
            Ok(Conv {
                weight: t(w)?,
                bias: t(w + 1)?,
            })
        };
        let net = Network {
            backbone: Backbone {
                conv1: conv(0)?,
                conv2: conv(2)?,
                conv3: conv(4)?,
                proj: conv(6)?,
            },
            head: LinearHead { weight: t(8)? },
        };
        let reference = Network::<S>::init(net.classes(), net.feature_dim(), 0);
        for ((name, a), b) in PARAM_NAMES.iter().zip(net.params()).zip(reference.params()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("`{prefix}.{name}` has shape {:?}", a.shape())));
            }
        }
        Ok(net)
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> BoundNetwork {
        let params = self.params().map(|p| g.leaf(p.clone().with_grad(trainable)));
        BoundNetwork { params }
    }

    /// Runs the backbone on `images: [n, 3, h, w]`, returning `[n*h*w, D]`.
    pub fn features(&self, g: &mut Graph<S>, bound: &BoundNetwork, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                left: s,
                right: vec![0, 3, 0, 0],
            });
        }
        let (h, w) = (s[2], s[3]);
        let p = &bound.params;
        let x = g.conv2d(images, p[0], Some(p[1]), 1, 1)?;
        let x = g.relu(x);
        let x = g.conv2d(x, p[2], Some(p[3]), 2, 1)?;
        let x = g.relu(x);
        let x = g.conv2d(x, p[4], Some(p[5]), 1, 1)?;
        let x = g.relu(x);
        let x = g.upsample_bilinear(x, h, w)?;
        let x = g.conv2d(x, p[6], Some(p[7]), 1, 0)?;
        g.channels_last(x)
    }
}

/// Softmax over `w_c . f` for every pixel row of `features`.
pub fn linear_posterior_var<S: Scalar>(g: &mut Graph<S>, head: Var, features: Var) -> Result<Var> {
    let wt = g.transpose(head)?;
    let logits = g.matmul(features, wt)?;
    g.softmax(logits, 1)
}

/// Softmax over `max_{i in class c} cos(p_i, f) / temperature`. The bank is a
/// constant: no gradient reaches the prototypes.
pub fn prototype_posterior_var<S: Scalar>(
    g: &mut Graph<S>,
    bank: &PrototypeBank<S>,
    features: Var,
    temperature: f64,
) -> Result<Var> {
    let protos = g.constant(bank.prototypes().clone());
    prototype_posterior_with(g, protos, bank, features, temperature)
}

/// As [`prototype_posterior_var`], with the prototype matrix already on the
/// graph as `protos`.
pub fn prototype_posterior_with<S: Scalar>(
    g: &mut Graph<S>,
    protos: Var,
    bank: &PrototypeBank<S>,
    features: Var,
    temperature: f64,
) -> Result<Var> {
    let sims = g.cosine_similarity(features, protos)?;
    let per_class = g.group_max(sims, bank.class_of(), bank.classes())?;
    let scaled = g.scale(per_class, S::of(1.0 / temperature));
    g.softmax(scaled, 1)
}

/// Stacks images into `[n, 3, h, w]`.
pub fn images_to_tensor<S: Scalar>(images: &[&Image]) -> Result<Tensor<S>> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidShape {
            shape: vec![0],
            len: 0,
        });
    };
    let (h, w) = (first.height, first.width);
    let mut data = vec![S::zero(); images.len() * 3 * h * w];
    for (n, img) in images.iter().enumerate() {
        if (img.height, img.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "images_to_tensor",
                left: vec![h, w],
                right: vec![img.height, img.width],
            });
        }
        for p in 0..h * w {
            for c in 0..3 {
                data[((n * 3 + c) * h * w) + p] = S::of(img.data[p * 3 + c] as f64 - INPUT_MEAN);
            }
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// `height x width x dim` feature map, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn pixel(&self, y: usize, x: usize) -> &[S] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[S]> {
        self.data.chunks_exact(self.dim)
    }

    fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(&[self.height * self.width, self.dim], self.data.clone()).expect("feature map shape")
    }
}

/// `height x width x classes` per-pixel distributions, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<S> {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> ProbMap<S> {
    pub fn pixel(&self, p: usize) -> &[S] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    /// Arg-max class and its probability per pixel (ties to the lower class).
    pub fn argmax(&self) -> Vec<(u8, S)> {
        self.data
            .chunks_exact(self.classes)
            .map(|row| {
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                (best as u8, row[best])
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.argmax().into_iter().map(|(c, _)| c).collect()
    }
}

pub fn extract_features<S: Scalar>(net: &Network<S>, image: &Image) -> Result<FeatureMap<S>> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let x = g.constant(images_to_tensor(&[image])?);
    let f = net.features(&mut g, &bound, x)?;
    Ok(FeatureMap {
        height: image.height,
        width: image.width,
        dim: net.feature_dim(),
        data: g.value(f).data().to_vec(),
    })
}

fn to_prob_map<S: Scalar>(fmap: &FeatureMap<S>, t: &Tensor<S>) -> ProbMap<S> {
    ProbMap {
        height: fmap.height,
        width: fmap.width,
        classes: t.shape()[1],
        data: t.data().to_vec(),
    }
}

pub fn linear_posterior<S: Scalar>(head: &LinearHead<S>, fmap: &FeatureMap<S>) -> Result<ProbMap<S>> {
    if head.feature_dim() != fmap.dim {
        return Err(Error::ShapeMismatch {
            op: "linear_posterior",
            left: head.weight.shape().to_vec(),
            right: vec![fmap.height, fmap.width, fmap.dim],
        });
    }
    let mut g = Graph::new();
    let w = g.constant(head.weight.clone());
    let f = g.constant(fmap.to_tensor());
    let p = linear_posterior_var(&mut g, w, f)?;
    Ok(to_prob_map(fmap, g.value(p)))
}

pub fn prototype_posterior<S: Scalar>(
    bank: &PrototypeBank<S>,
    fmap: &FeatureMap<S>,
    temperature: f64,
) -> Result<ProbMap<S>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig {
            field: "temperature".into(),
            reason: "must be positive".into(),
        });
    }
    let mut g = Graph::new();
    let f = g.constant(fmap.to_tensor());
    let p = prototype_posterior_var(&mut g, bank, f, temperature)?;
    Ok(to_prob_map(fmap, g.value(p)))
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise over every tensor.
pub fn ema_update<S: Scalar>(teacher: &mut Network<S>, student: &Network<S>, momentum: f64) -> Result<()> {
    let (m, one_m) = (S::of(momentum), S::of(1.0 - momentum));
    for (t, s) in teacher.params_mut().into_iter().zip(student.params()) {
        t.same_shape(s, "ema_update")?;
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + one_m * sv;
        }
    }
    Ok(())
}

/// Teacher network: an exponential moving average of the student, never
/// touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher<S> {
    pub net: Network<S>,
    pub momentum: f64,
}

impl<S: Scalar> Teacher<S> {
    pub fn from_student(student: &Network<S>, momentum: f64) -> Self {
        Teacher {
            net: student.clone(),
            momentum,
        }
    }

    pub fn update(&mut self, student: &Network<S>) -> Result<()> {
        ema_update(&mut self.net, student, self.momentum)
    }
}
