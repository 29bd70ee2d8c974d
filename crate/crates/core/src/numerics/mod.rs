//! Tensor arithmetic, reverse-mode differentiation and SGD.

mod graph;
mod kernels;
mod optim;
mod tensor;

pub use graph::{cosine, Graph, Var};
pub use kernels::{axpy, dot};
pub use optim::{Sgd, SgdConfig};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_over_middle_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2], |i| (i as f64 * 0.37).sin()));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| v[(o * 3 + j) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_of_vector_with_itself() {
        let v = [0.3f64, -1.2, 4.0, 0.01];
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&v, &[0.0; 4]), 0.0);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64).with_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0; 6]);
        // accumulates without reset
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0; 6]);
        g.zero_grad();
        assert_eq!(g.grad(x).data(), &[0.0; 6]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_closed_form() {
        let z = [0.4, -1.3, 2.2, 0.05];
        let target = 2;
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 4], &z).with_grad(true));
        let p = g.softmax(x, 1).unwrap();
        let ce = g.cross_entropy(p, &[target], 1e-9).unwrap();
        let loss = g.sum(ce);
        g.backward(loss).unwrap();
        let probs = g.value(p).data().to_vec();
        for (k, (&gk, &pk)) in g.grad(x).data().iter().zip(&probs).enumerate() {
            let expected = pk - if k == target { 1.0 } else { 0.0 };
            assert!((gk - expected).abs() < 1e-12, "{k}: {gk} vs {expected}");
        }
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(&[3]).with_grad(true));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn detached_loss_gives_zero_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::<f64>::full(&[2], 1.0).with_grad(true));
        let c = g.constant(Tensor::full(&[2], 3.0));
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { op, left, right } => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.add(a, b).is_ok());
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn group_max_ties_pick_lowest_column() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 4], &[0.5, 0.5, 0.2, 0.2]).with_grad(true));
        let m = g.group_max(x, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 0.2]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn(&[2, 3, 9, 7], |i| ((i * 31 % 17) as f32) * 0.1 - 0.8));
            let w = g.constant(Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 7 % 5) as f32) * 0.2 - 0.4));
            let y = g.conv2d(x, w, None, 2, 1).unwrap();
            let y = g.upsample_bilinear(y, 9, 7).unwrap();
            let y = g.channels_last(y).unwrap();
            let y = g.softmax(y, 1).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
