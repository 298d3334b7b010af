//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖ / max(1, ‖numeric‖)` over all inputs.
    pub rel_error: f64,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    libm::sqrt(v.map(|x| x * x).sum::<f64>())
}

/// Compares the tape gradient of `f` with respect to every element of
/// `inputs` against central differences with step `h`. `f` receives the
/// inputs as trainable leaves, in order.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut analytic = Vec::new();
    for (&v, t) in vars.iter().zip(inputs) {
        match g.grad(v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(core::iter::repeat(0.0).take(t.numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let base = inputs[i].data()[j];
            let nudged = |x: f64, work: &mut Vec<Tensor>| -> Result<f64> {
                let mut d = inputs[i].data().to_vec();
                d[j] = x;
                work[i] = Tensor::new(inputs[i].shape().to_vec(), d)?;
                eval(work)
            };
            let up = nudged(base + h, &mut work)?;
            let down = nudged(base - h, &mut work)?;
            work[i] = inputs[i].clone();
            numeric.push((up - down) / (2.0 * h));
        }
    }
    if numeric.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate {
            op: "gradcheck",
            detail: "non-finite finite difference".into(),
        });
    }
    let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
    let rel_error = diff / norm(numeric.iter().copied()).max(1.0);
    Ok(GradReport {
        analytic,
        numeric,
        rel_error,
    })
}
