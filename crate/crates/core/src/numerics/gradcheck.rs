use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so coordinates with vanishing gradient are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares `backward()` against central differences of `f` at `x`, using
/// step `1e-5 · max(1, |x_i|)` per coordinate.
///
/// `f` builds a scalar on a fresh graph from the leaf it is handed; it must
/// be deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.param(t);
        let out = f(&mut g, leaf)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let root = f(&mut g, leaf)?;
    g.backward(root)?;
    let analytic = g
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let xi = x.data()[i];
        let h = 1e-5 * xi.abs().max(1.0);
        let mut plus = x.clone();
        plus.data_mut()[i] = xi + h;
        let mut minus = x.clone();
        minus.data_mut()[i] = xi - h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient check coordinate {i}")));
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        pass: max_rel_err < tol,
    })
}
