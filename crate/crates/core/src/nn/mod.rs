//! A small CPU neural-network engine with explicit forward/backward passes.
//!
//! Every tensor carries a leading batch axis. Layers keep no per-call state,
//! so a frozen network can be shared across threads; backward passes take the
//! activations recorded by the matching forward pass.

mod conv;
mod graph;
mod linear;
mod optim;
mod param;

pub use conv::Conv2d;
pub use graph::{Backward, Graph, Node, NodeHook, Op, ParamGrad, ReceptiveField};
pub use linear::Linear;
pub use optim::Adam;
pub use param::Param;

use ndarray::{ArrayD, Zip};

pub fn relu_inplace(x: &mut ArrayD<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Numerically stable row-wise softmax over the last axis of a 2-D array.
pub fn softmax_rows(logits: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Denominator stabilizer used by the epsilon rule: `z + eps * sign(z)`, with sign(0) = +1.
pub(crate) fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

pub(crate) fn add_assign(acc: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match acc {
        Some(a) => Zip::from(a).and(&g).for_each(|a, &b| *a += b),
        None => *acc = Some(g),
    }
}
