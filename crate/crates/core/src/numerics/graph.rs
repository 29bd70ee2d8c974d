//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its variables. Leaves bound from
//! tensors with `requires_grad` set receive gradients on [`Graph::backward`];
//! repeated backward calls accumulate until [`Graph::zero_grad`].

use super::kernels::{axpy, bilinear_table, dot, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Log(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample(Var),
    ChannelsLast(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
        eps: f64,
    },
    Cosine {
        x: Var,
        protos: Var,
    },
    GroupMax {
        input: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum {
        input: Var,
        weights: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds a tensor as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Binds a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * k).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape(),
            ta.data().iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|x| x.ln()).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                axpy(row, da[i * k + kk], &db[kk * n..(kk + 1) * n]);
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 {
            return Err(mismatch("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let d = ta.data();
        let t = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn conv_geom(&self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(mismatch("conv2d", si, sw));
        }
        let geom = ConvGeom::new(si[1], si[2], si[3], sw[2], sw[3], stride, pad)
            .ok_or_else(|| mismatch("conv2d", si, sw))?;
        Ok((si[0], sw[0], geom))
    }

    /// 2-D convolution. `input: [n, cin, h, w]`, `weight: [cout, cin, kh, kw]`,
    /// optional `bias: [cout]`; zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cout, g) = self.conv_geom(input, weight, stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let np = g.out_pixels();
        let patch = g.patch();
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bvals = bias.map(|b| self.value(b).data());
        let mut out = vec![S::zero(); n * cout * np];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![S::zero(); patch * np]
        };
        let img_len = g.cin * g.h * g.w;
        for b in 0..n {
            let img = &x[b * img_len..(b + 1) * img_len];
            let cols: &[S] = if g.is_pointwise() {
                img
            } else {
                g.im2col(img, &mut cols);
                &cols
            };
            let dst = &mut out[b * cout * np..(b + 1) * cout * np];
            for co in 0..cout {
                let row = &mut dst[co * np..(co + 1) * np];
                if let Some(bv) = bvals {
                    row.fill(bv[co]);
                }
                let wrow = &w[co * patch..(co + 1) * patch];
                for (k, &wv) in wrow.iter().enumerate() {
                    axpy(row, wv, &cols[k * np..(k + 1) * np]);
                }
            }
        }
        let t = Tensor::new(&[n, cout, g.hout, g.wout], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Bilinear resampling (half-pixel centers) of `[n, c, h, w]` to `[n, c, out_h, out_w]`.
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 || out_h == 0 || out_w == 0 {
            return Err(mismatch("upsample_bilinear", &s, &[out_h, out_w]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let ty = bilinear_table(h, out_h);
        let tx = bilinear_table(w, out_w);
        let x = self.value(input).data();
        let mut out = vec![S::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (S::of(wy0), S::of(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (S::of(wx0), S::of(wx1));
                    dst[oy * out_w + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], out_h, out_w], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Upsample(input), rg))
    }

    /// `[n, c, h, w] -> [n*h*w, c]`: one row per pixel.
    pub fn channels_last(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(mismatch("channels_last", &s, &[0, 0, 0, 0]));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = self.value(input).data();
        let mut out = vec![S::zero(); n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    out[(b * hw + p) * c + ch] = v;
                }
            }
        }
        let t = Tensor::new(&[n * hw, c], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::ChannelsLast(input), rg))
    }

    /// Softmax over `axis`; normalizers accumulate in `f64`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(mismatch("softmax", &s, &[axis]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let x = self.value(input).data();
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut m = S::neg_infinity();
                for j in 0..n {
                    m = m.max(x[at(j)]);
                }
                let mut z = 0.0f64;
                for j in 0..n {
                    let e = (x[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e.f64();
                }
                let inv = 1.0 / z;
                for j in 0..n {
                    out[at(j)] = S::of(out[at(j)].f64() * inv);
                }
            }
        }
        let t = Tensor::new(&s, out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Softmax { input, axis }, rg))
    }

    /// Per-row negative log-likelihood of `targets` under `probs: [rows, classes]`,
    /// with probabilities clamped to `[eps, 1 - eps]`. Output shape `[rows]`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(mismatch("cross_entropy", &s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(mismatch("cross_entropy", &s, &[bad]));
        }
        let p = self.value(probs).data();
        let (lo, hi) = (S::of(eps), S::of(1.0 - eps));
        let out = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -(p[r * c + t].max(lo).min(hi)).ln())
            .collect();
        let t = Tensor::new(&[s[0]], out)?;
        let rg = self.rg(probs);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Cosine similarity of every row of `x: [p, d]` with every row of
    /// `protos: [m, d]`, giving `[p, m]`. A zero-norm vector has similarity 0.
    pub fn cosine_similarity(&mut self, x: Var, protos: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x).to_vec(), self.shape(protos).to_vec());
        if sx.len() != 2 || sp.len() != 2 || sx[1] != sp[1] {
            return Err(mismatch("cosine_similarity", &sx, &sp));
        }
        let (p, m, d) = (sx[0], sp[0], sx[1]);
        let xd = self.value(x).data();
        let pd = self.value(protos).data();
        let pn = row_inv_norms(pd, d);
        let mut out = vec![S::zero(); p * m];
        for i in 0..p {
            let xi = &xd[i * d..(i + 1) * d];
            let inv_x = inv_norm(xi);
            for j in 0..m {
                out[i * m + j] = dot(xi, &pd[j * d..(j + 1) * d]) * inv_x * pn[j];
            }
        }
        let t = Tensor::new(&[p, m], out)?;
        let rg = self.rg(x) || self.rg(protos);
        Ok(self.push(t, Op::Cosine { x, protos }, rg))
    }

    /// Per-row maximum within each column group. `group_of[j]` tags column `j`;
    /// output is `[rows, groups]`. Ties resolve to the lowest column index,
    /// which alone receives the gradient.
    pub fn group_max(&mut self, input: Var, group_of: &[usize], groups: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || s[1] != group_of.len() || group_of.iter().any(|&g| g >= groups) {
            return Err(mismatch("group_max", &s, &[group_of.len(), groups]));
        }
        let mut seen = vec![false; groups];
        group_of.iter().for_each(|&g| seen[g] = true);
        if seen.iter().any(|&v| !v) {
            return Err(mismatch("group_max", &s, &[groups]));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(input).data();
        let mut out = vec![S::neg_infinity(); rows * groups];
        let mut argmax = vec![usize::MAX; rows * groups];
        for r in 0..rows {
            for (j, &g) in group_of.iter().enumerate() {
                let v = x[r * cols + j];
                let slot = r * groups + g;
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = r * cols + j;
                }
            }
        }
        let t = Tensor::new(&[rows, groups], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::GroupMax { input, argmax }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let v = S::of(self.value(input).sum_f64());
        let rg = self.rg(input);
        self.push(Tensor::scalar(v), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let v = S::of(t.sum_f64() / t.len() as f64);
        let rg = self.rg(input);
        self.push(Tensor::scalar(v), Op::Mean(input), rg)
    }

    /// `sum_i input[i] * weights[i]` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<S>) -> Result<Var> {
        let t = self.value(input);
        if t.len() != weights.len() {
            return Err(mismatch("weighted_sum", t.shape(), &[weights.len()]));
        }
        let v = t
            .data()
            .iter()
            .zip(&weights)
            .fold(0.0f64, |acc, (&x, &w)| acc + (x * w).f64());
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(S::of(v)), Op::WeightedSum { input, weights }, rg))
    }

    /// Accumulated gradient of a leaf; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor<S> {
        let shape = self.shape(v);
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Reverse pass from a single-element `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.value(v).len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] = ga[k] + g[k] * vb[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] = gb[k] + g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |ga| axpy(ga, *k, g)),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        if va[k] > S::zero() {
                            ga[k] = ga[k] + g[k];
                        }
                    }
                });
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] = ga[k] + g[k] / va[k];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (da, db) = (ta.data(), tb.data());
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            ga[r * k + kk] = ga[r * k + kk] + dot(grow, &db[kk * n..(kk + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            axpy(&mut gb[kk * n..(kk + 1) * n], da[r * k + kk], grow);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => self.conv_backward(*input, *weight, *bias, *stride, *pad, g, grads),
            Op::Upsample(a) => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let ty = bilinear_table(h, oh);
                let tx = bilinear_table(w, ow);
                acc(*a, &mut |ga| {
                    for p in 0..planes {
                        let dst = &mut ga[p * h * w..(p + 1) * h * w];
                        let src = &g[p * oh * ow..(p + 1) * oh * ow];
                        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            let (wy0, wy1) = (S::of(wy0), S::of(wy1));
                            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let (wx0, wx1) = (S::of(wx0), S::of(wx1));
                                let gv = src[oy * ow + ox];
                                dst[y0 * w + x0] = dst[y0 * w + x0] + gv * wy0 * wx0;
                                dst[y0 * w + x1] = dst[y0 * w + x1] + gv * wy0 * wx1;
                                dst[y1 * w + x0] = dst[y1 * w + x0] + gv * wy1 * wx0;
                                dst[y1 * w + x1] = dst[y1 * w + x1] + gv * wy1 * wx1;
                            }
                        }
                    }
                });
            }
            Op::ChannelsLast(a) => {
                let s = self.shape(*a);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                acc(*a, &mut |ga| {
                    for b in 0..n {
                        for ch in 0..c {
                            let plane = &mut ga[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                            for (p, v) in plane.iter_mut().enumerate() {
                                *v = *v + g[(b * hw + p) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                acc(*input, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mut s = 0.0f64;
                            for j in 0..n {
                                s += (g[at(j)] * y[at(j)]).f64();
                            }
                            let s = S::of(s);
                            for j in 0..n {
                                ga[at(j)] = ga[at(j)] + y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                probs,
                targets,
                eps,
            } => {
                let c = self.shape(*probs)[1];
                let p = self.value(*probs).data();
                let (lo, hi) = (S::of(*eps), S::of(1.0 - eps));
                acc(*probs, &mut |gp| {
                    for (r, &t) in targets.iter().enumerate() {
                        let pv = p[r * c + t];
                        if pv > lo && pv < hi {
                            gp[r * c + t] = gp[r * c + t] - g[r] / pv;
                        }
                    }
                });
            }
            Op::Cosine { x, protos } => self.cosine_backward(*x, *protos, g, grads),
            Op::GroupMax { input, argmax } => {
                acc(*input, &mut |ga| {
                    for (k, &src) in argmax.iter().enumerate() {
                        ga[src] = ga[src] + g[k];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|v| *v = *v + g[0])),
            Op::Mean(a) => {
                let k = g[0] / S::of(self.value(*a).len() as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|v| *v = *v + k));
            }
            Op::WeightedSum { input, weights } => {
                acc(*input, &mut |ga| axpy(ga, g[0], weights));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let (n, cout, geom) = self.conv_geom(input, weight, stride, pad).expect("checked in forward");
        let np = geom.out_pixels();
        let patch = geom.patch();
        let img_len = geom.cin * geom.h * geom.w;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let want_x = self.rg(input);
        let want_w = self.rg(weight);
        let want_b = bias.is_some_and(|b| self.rg(b));

        let mut gw = want_w.then(|| vec![S::zero(); w.len()]);
        let mut gx = want_x.then(|| vec![S::zero(); x.len()]);
        let mut gb = want_b.then(|| vec![S::zero(); cout]);
        let mut cols = vec![S::zero(); if geom.is_pointwise() { 0 } else { patch * np }];
        let mut dcols = vec![S::zero(); if want_x { patch * np } else { 0 }];

        for b in 0..n {
            let gout = &g[b * cout * np..(b + 1) * cout * np];
            if let Some(gb) = gb.as_mut() {
                for co in 0..cout {
                    let s = gout[co * np..(co + 1) * np]
                        .iter()
                        .fold(0.0f64, |a, v| a + v.f64());
                    gb[co] = gb[co] + S::of(s);
                }
            }
            let img = &x[b * img_len..(b + 1) * img_len];
            if let Some(gw) = gw.as_mut() {
                let cols: &[S] = if geom.is_pointwise() {
                    img
                } else {
                    geom.im2col(img, &mut cols);
                    &cols
                };
                for co in 0..cout {
                    let grow = &gout[co * np..(co + 1) * np];
                    for k in 0..patch {
                        let idx = co * patch + k;
                        gw[idx] = gw[idx] + dot(grow, &cols[k * np..(k + 1) * np]);
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                dcols.fill(S::zero());
                for co in 0..cout {
                    let grow = &gout[co * np..(co + 1) * np];
                    for k in 0..patch {
                        axpy(&mut dcols[k * np..(k + 1) * np], w[co * patch + k], grow);
                    }
                }
                let dst = &mut gx[b * img_len..(b + 1) * img_len];
                if geom.is_pointwise() {
                    dst.iter_mut().zip(&dcols).for_each(|(d, &v)| *d = *d + v);
                } else {
                    geom.col2im(&dcols, dst);
                }
            }
        }
        add_into(grads, input, gx);
        add_into(grads, weight, gw);
        if let Some(b) = bias {
            add_into(grads, b, gb);
        }
    }

    fn cosine_backward(&self, x: Var, protos: Var, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let (sx, sp) = (self.shape(x), self.shape(protos));
        let (p, m, d) = (sx[0], sp[0], sx[1]);
        let xd = self.value(x).data();
        let pd = self.value(protos).data();
        let pn = row_inv_norms(pd, d);
        let xn = row_inv_norms(xd, d);
        let mut gx = self.rg(x).then(|| vec![S::zero(); xd.len()]);
        let mut gp = self.rg(protos).then(|| vec![S::zero(); pd.len()]);
        for i in 0..p {
            if xn[i] == S::zero() {
                continue;
            }
            let xi = &xd[i * d..(i + 1) * d];
            for j in 0..m {
                if pn[j] == S::zero() {
                    continue;
                }
                let gij = g[i * m + j];
                if gij == S::zero() {
                    continue;
                }
                let pj = &pd[j * d..(j + 1) * d];
                let s = dot(xi, pj) * xn[i] * pn[j];
                if let Some(gx) = gx.as_mut() {
                    // d s / d x = p/(|x||p|) - s x/|x|^2
                    let a = gij * xn[i] * pn[j];
                    let b = gij * s * xn[i] * xn[i];
                    let dst = &mut gx[i * d..(i + 1) * d];
                    for k in 0..d {
                        dst[k] = dst[k] + a * pj[k] - b * xi[k];
                    }
                }
                if let Some(gp) = gp.as_mut() {
                    let a = gij * xn[i] * pn[j];
                    let b = gij * s * pn[j] * pn[j];
                    let dst = &mut gp[j * d..(j + 1) * d];
                    for k in 0..d {
                        dst[k] = dst[k] + a * xi[k] - b * pj[k];
                    }
                }
            }
        }
        add_into(grads, x, gx);
        add_into(grads, protos, gp);
    }
}

fn add_into<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Option<Vec<S>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot => *slot = Some(g),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn inv_norm<S: Scalar>(v: &[S]) -> S {
    let n = dot(v, v).sqrt();
    if n > S::zero() {
        S::one() / n
    } else {
        S::zero()
    }
}

fn row_inv_norms<S: Scalar>(data: &[S], d: usize) -> Vec<S> {
    data.chunks_exact(d).map(inv_norm).collect()
}

/// Cosine similarity of two vectors; zero when either has zero norm.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    dot(a, b) * inv_norm(a) * inv_norm(b)
}
