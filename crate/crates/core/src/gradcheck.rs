//! Central finite-difference gradient checks.
//!
//! The checked function must be deterministic: it is re-evaluated twice per
//! coordinate with freshly built graphs, and any nondeterminism shows up as
//! spurious error.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Checks the gradient of scalar `f` with respect to a single input tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone())?;
    grad_check_store(
        |g, s| {
            let v = g.param(s, id);
            f(g, v)
        },
        &store,
        eps,
    )
}

/// Checks the gradient of scalar `f` with respect to every trainable
/// coordinate of `store`.
pub fn grad_check_store<F>(f: F, store: &ParamStore, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let mut analytic = store.detached();
    analytic.accumulate_grads(&g);

    let mut probe = store.detached();
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let grad = analytic
            .tensor(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.tensor(id).numel()]);
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.tensor(id).data()[i];
            probe.tensor_mut(id).data_mut()[i] = orig + eps;
            let mut gp = Graph::new();
            let vp = f(&mut gp, &probe)?;
            let fp = scalar_of(&gp, vp)?;
            probe.tensor_mut(id).data_mut()[i] = orig - eps;
            let mut gm = Graph::new();
            let vm = f(&mut gm, &probe)?;
            let fm = scalar_of(&gm, vm)?;
            probe.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::RngSeed;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut RngSeed(seed).rng())
    }

    #[test]
    fn sum_and_constant() {
        let x = rand(&[3, 4], 1);
        let r = grad_check(|g, v| Ok(g.sum(v)), &x, EPS).unwrap();
        assert!(r.max_rel_error < 1e-9);
        let r = grad_check(|g, _| Ok(g.constant(Tensor::scalar(0.0))), &x, EPS).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.coordinates, 12);
    }

    #[test]
    fn rejects_vector_function() {
        let x = rand(&[3], 1);
        assert!(grad_check(|_, v| Ok(v), &x, EPS).is_err());
    }

    /// Weighted sum with fixed random weights, so every output coordinate
    /// contributes a distinct amount.
    fn probe_loss(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let w = g.constant(rand(g.shape(y), seed));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn composite_matmul_softmax() {
        let mut s = ParamStore::new();
        let a = s.add("a", rand(&[4, 3], 2)).unwrap();
        let b = s.add("b", rand(&[3, 5], 3)).unwrap();
        let r = grad_check_store(
            |g, st| {
                let (a, b) = (g.param(st, a), g.param(st, b));
                let m = g.matmul(a, b)?;
                let sm = g.softmax(m, 1)?;
                probe_loss(g, sm, 4)
            },
            &s,
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn losses_pass() {
        let x = rand(&[6], 11);
        let target = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let weight = [0.5, 0.1, 0.1, 0.5, 0.1, 0.1];
        let r = grad_check(|g, v| g.bce_with_logits(v, &target, &weight), &x, EPS).unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");

        let pred = Tensor::new(&[2, 4], vec![3.1, 2.2, 5.3, 1.4, 4.0, 6.5, 2.5, 3.5]).unwrap();
        let tgt = [4.0, 1.5, 4.0, 2.0, 3.0, 7.0, 3.0, 3.0];
        let r = grad_check(|g, v| g.iou_loss(v, &tgt), &pred, EPS).unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }
}
