//! Central finite differences against reverse-mode gradients.

use protoseg::numerics::{Graph, Tensor, Var};
use protoseg::rng;
use rand::Rng as _;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;
const INSTANCES: u64 = 10;

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Reduces the op output with fixed random weights so every output element
/// contributes, then compares d(loss)/d(input) with central differences.
pub fn check(name: &str, shapes: &[&[usize]], sample: impl Fn(&mut rng::Rng) -> f64, build: &Build) -> Result<(), String> {
    check_where(name, shapes, sample, |_| true, build)
}

/// As [`check`], drawing instances until `INSTANCES` of them satisfy `accept`.
pub fn check_where(
    name: &str,
    shapes: &[&[usize]],
    sample: impl Fn(&mut rng::Rng) -> f64,
    accept: impl Fn(&[Tensor<f64>]) -> bool,
    build: &Build,
) -> Result<(), String> {
    let mut accepted = 0;
    for inst in 0.. {
        if accepted == INSTANCES {
            break;
        }
        let mut r = rng::stream(inst, 0, name.len() as u64);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| sample(&mut r)))
            .collect();
        if !accept(&inputs) {
            continue;
        }
        accepted += 1;
        let mut weights = None;
        let mut eval = |inputs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad(true))).collect();
            let out = build(&mut g, &vars);
            let n = g.value(out).len();
            let w = weights
                .get_or_insert_with(|| {
                    let mut wr = rng::stream(inst, 1, 0);
                    (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
                })
                .clone();
            let loss = g.weighted_sum(out, w).unwrap();
            let value = g.value(loss).item().unwrap();
            if !grads {
                return (value, Vec::new());
            }
            g.backward(loss).unwrap();
            (value, vars.iter().map(|&v| g.grad(v)).collect())
        };
        let (_, grads) = eval(&inputs, true);
        for (ti, t) in inputs.iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[i] += EPS;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[i] -= EPS;
                let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * EPS);
                let an = grads[ti].data()[i];
                let scale = fd.abs().max(an.abs());
                let err = if scale < 1e-7 { (fd - an).abs() } else { (fd - an).abs() / scale };
                if err >= TOL {
                    return Err(format!(
                        "{name} instance {inst} input {ti}[{i}]: autodiff {an} vs finite difference {fd}"
                    ));
                }
            }
        }
    }
    Ok(())
}

pub fn uniform(r: &mut rng::Rng) -> f64 {
    r.gen_range(-1.0..1.0)
}

/// Bounded away from zero so relu kinks sit outside the difference stencil.
pub fn off_zero(r: &mut rng::Rng) -> f64 {
    let v: f64 = r.gen_range(0.05..1.0);
    if r.gen::<bool>() {
        v
    } else {
        -v
    }
}

pub fn positive(r: &mut rng::Rng) -> f64 {
    r.gen_range(0.2..2.0)
}

pub fn elementwise_ops() -> Result<(), String> {
    check("add", &[&[3, 4], &[3, 4]], uniform, &|g, v| g.add(v[0], v[1]).unwrap())?;
    check("sub", &[&[3, 4], &[3, 4]], uniform, &|g, v| g.sub(v[0], v[1]).unwrap())?;
    check("mul", &[&[3, 4], &[3, 4]], uniform, &|g, v| g.mul(v[0], v[1]).unwrap())?;
    check("scale", &[&[5]], uniform, &|g, v| g.scale(v[0], -1.7))?;
    check("relu", &[&[4, 5]], off_zero, &|g, v| g.relu(v[0]))?;
    check("log", &[&[6]], positive, &|g, v| g.log(v[0]))?;
    Ok(())
}

pub fn linear_algebra_ops() -> Result<(), String> {
    check("matmul", &[&[3, 4], &[4, 2]], uniform, &|g, v| g.matmul(v[0], v[1]).unwrap())?;
    check("transpose", &[&[3, 5]], uniform, &|g, v| g.transpose(v[0]).unwrap())?;
    Ok(())
}

pub fn convolution() -> Result<(), String> {
    check("conv2d", &[&[1, 3, 5, 5], &[2, 3, 3, 3], &[2]], uniform, &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()
    })?;
    check("conv2d_stride2", &[&[1, 3, 5, 5], &[2, 3, 3, 3]], uniform, &|g, v| {
        g.conv2d(v[0], v[1], None, 2, 1).unwrap()
    })?;
    check("conv2d_pointwise", &[&[2, 3, 4, 4], &[4, 3, 1, 1], &[4]], uniform, &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 0).unwrap()
    })?;
    Ok(())
}

pub fn resampling_and_layout() -> Result<(), String> {
    check("upsample_bilinear", &[&[1, 2, 3, 4]], uniform, &|g, v| {
        g.upsample_bilinear(v[0], 7, 5).unwrap()
    })?;
    check("channels_last", &[&[2, 3, 2, 2]], uniform, &|g, v| g.channels_last(v[0]).unwrap())?;
    Ok(())
}

pub fn distributions_and_losses() -> Result<(), String> {
    check("softmax_rows", &[&[4, 5]], uniform, &|g, v| g.softmax(v[0], 1).unwrap())?;
    check("softmax_cols", &[&[4, 5]], uniform, &|g, v| g.softmax(v[0], 0).unwrap())?;
    check("cross_entropy", &[&[4, 3]], uniform, &|g, v| {
        let p = g.softmax(v[0], 1).unwrap();
        g.cross_entropy(p, &[0, 2, 1, 2], 1e-9).unwrap()
    })?;
    Ok(())
}

pub fn prototype_ops() -> Result<(), String> {
    check("cosine_similarity", &[&[5, 3], &[4, 3]], uniform, &|g, v| {
        g.cosine_similarity(v[0], v[1]).unwrap()
    })?;
    // the max is not differentiable at a tie, so skip instances with a
    // near-tie inside one group
    let separated = |t: &[Tensor<f64>]| t[0].data().chunks(2).all(|p| (p[0] - p[1]).abs() > 1e-2);
    check_where("group_max", &[&[4, 6]], uniform, separated, &|g, v| {
        g.group_max(v[0], &[0, 0, 1, 1, 2, 2], 3).unwrap()
    })?;
    Ok(())
}

pub fn reductions() -> Result<(), String> {
    check("sum", &[&[3, 3]], uniform, &|g, v| g.sum(v[0]))?;
    check("mean", &[&[3, 3]], uniform, &|g, v| g.mean(v[0]))?;
    check("weighted_sum", &[&[7]], uniform, &|g, v| {
        g.weighted_sum(v[0], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25, 3.0]).unwrap()
    })?;
    Ok(())
}

pub fn composed_prototype_posterior() -> Result<(), String> {
    check("posterior", &[&[6, 4], &[6, 4]], uniform, &|g, v| {
        let s = g.cosine_similarity(v[0], v[1]).unwrap();
        let m = g.group_max(s, &[0, 0, 1, 1, 2, 2], 3).unwrap();
        let z = g.scale(m, 10.0);
        g.softmax(z, 1).unwrap()
    })?;
    Ok(())
}

/// Every op group, in a fixed order.
pub const SUITES: [(&str, fn() -> Result<(), String>); 8] = [
    ("elementwise_ops", elementwise_ops),
    ("linear_algebra_ops", linear_algebra_ops),
    ("convolution", convolution),
    ("resampling_and_layout", resampling_and_layout),
    ("distributions_and_losses", distributions_and_losses),
    ("prototype_ops", prototype_ops),
    ("reductions", reductions),
    ("composed_prototype_posterior", composed_prototype_posterior),
];
