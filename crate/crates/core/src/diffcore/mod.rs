//! Dense `f64` tensors with reverse-mode gradients, Adam, finite-difference
//! checking and checkpoint serialization.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod nn;
mod optim;
mod tensor;

use thiserror::Error;

pub use gradcheck::{
    analytic_gradient, compare, gradcheck, gradcheck_params, numeric_gradient, relative_error, Coord,
    GradcheckReport,
};
pub use graph::{Gradients, Graph, Var};
pub use nn::{uniform_init, Linear, Mlp};
pub use optim::Adam;
pub use tensor::{ParamId, ParamStore, Tensor};

pub(crate) use graph::{matmul, softmax_in_place};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of bounds ({bound}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0} needs at least one operand")]
    Empty(&'static str),
    #[error("only rank <= 2 tensors are supported, got rank {0}")]
    Rank(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::row(vec![-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 2.0]);

        let z = g.input(&Tensor::row(vec![0.0, 0.0]));
        let s = g.softmax_rows(z);
        assert_eq!(g.value(s), &[0.5, 0.5]);

        let v = g.input(&Tensor::row(vec![3.0, 4.0]));
        let n = g.l2_norm(v);
        assert_eq!(g.scalar(n), 5.0);
        let n1 = g.l1_norm(v);
        assert_eq!(g.scalar(n1), 7.0);

        let a = g.input(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.input(&Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let m = g.matmul(a, b).unwrap();
        assert_eq!(g.value(m), &[17.0, 39.0]);

        let sg = g.sigmoid(z);
        assert_eq!(g.value(sg), &[0.5, 0.5]);
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.dims(c), (2, 3));
        assert_eq!(g.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::zeros(2, 3));
        let b = g.input(&Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        let c = g.input(&Tensor::zeros(3, 2));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn mse_gradient_example() {
        // loss = (w*x - y)^2 with w = 1, x = 2, y = 0  =>  dloss/dw = 2*x*(w*x) = 8.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let x = g.input(&Tensor::scalar(2.0));
        let y = g.input(&Tensor::scalar(0.0));
        let wx = g.matmul(wv, x).unwrap();
        let loss = g.mse(wx, y).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[8.0]);
    }

    #[test]
    fn l1_gradient_is_sign() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(vec![0.3, -0.2]));
        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let l = g.l1_norm(pv);
        g.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(p).grad().unwrap(), &[1.0, -1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.7));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.add(xv, xv).unwrap();
        let s = g.sum(y);
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(x).grad().unwrap(), &[2.0]);
        // A second backward without reset accumulates.
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(x).grad().unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::zeros(1, 2));
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn block_ops_forward() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = g.input(&Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let y = g.block_matmul(l, x).unwrap();
        assert_eq!(g.value(y), &[2.0, 1.0, 4.0, 3.0]);
        let m = g.block_mean(x, 2).unwrap();
        assert_eq!(g.value(m), &[1.5, 3.5]);
        let r = g.repeat_blocks(m, 2);
        assert_eq!(g.value(r), &[1.5, 1.5, 3.5, 3.5]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn every_op_passes_gradcheck(
            a in proptest::collection::vec(-1.0f64..1.0, 9),
            b in proptest::collection::vec(-1.0f64..1.0, 9),
        ) {
            let mut store = ParamStore::new();
            let ia = store.add("a", Tensor::matrix(3, 3, a).unwrap());
            let ib = store.add("b", Tensor::matrix(3, 3, b).unwrap());
            for (name, op) in crate::selfcheck::op_suite() {
                let report = gradcheck_params(
                    &store,
                    None,
                    |g, s| {
                        let av = g.param(s, ia);
                        let bv = g.param(s, ib);
                        op(g, av, bv)
                    },
                    1e-4,
                    crate::par::Exec::Sequential,
                )
                .unwrap();
                prop_assert!(report.max_rel_error < 1e-3, "{name}: {report:?}");
            }
        }

        #[test]
        fn softmax_is_a_distribution(row in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut g = Graph::new();
            let x = g.input(&Tensor::row(row));
            let s = g.softmax_rows(x);
            let total: f64 = g.value(s).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(g.value(s).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::matrix(2, 3, vec![0.1, -2.0, 3.0, 5.0, 5.0, -1.0]).unwrap());
        let s = g.softmax_rows(x);
        let ls = g.log(s);
        let direct = g.log_softmax_rows(x);
        assert!(approx(g.value(ls), g.value(direct), 1e-12));
    }
}
