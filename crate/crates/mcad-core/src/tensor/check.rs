//! Central finite-difference gradient checking (f64 only; 32-bit floats are
//! too coarse for reliable difference quotients).

use super::{Graph, NodeId, Tensor, TensorResult};

/// Compare the analytic gradient of a scalar-valued graph function against
/// central finite differences at every coordinate of `x`.
///
/// `f` rebuilds the forward pass from scratch each call (it must be
/// deterministic: stochastic primitives fixed-seeded or disabled). Returns
/// the max over coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> TensorResult<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> TensorResult<NodeId>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut g = Graph::new();
    let xid = g.leaf(x.clone().with_grad());
    let loss = f(&mut g, xid)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .leaf(xid)
        .expect("input leaf requires grad")
        .data()
        .to_vec();

    let eval = |data: Vec<f64>| -> TensorResult<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(Tensor::from_vec_unchecked(x.shape().to_vec(), data));
        let loss = f(&mut g, xid)?;
        Ok(g.scalar_value(loss)?)
    };

    let base = x.data();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        plus[i] += eps;
        let mut minus = base.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
