use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Default central-difference step for 32-bit checking.
pub const DEFAULT_EPS: f32 = 1e-3;

/// Compare the analytic gradient of a scalar-valued closure against
/// central finite differences at `point`. Returns the max over checked
/// coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, point: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, eps, &coords)
}

/// Same check restricted to `max_coords` randomly sampled coordinates;
/// makes checking large parameter tensors tractable.
pub fn grad_check_sampled<F>(
    f: F,
    point: &Tensor,
    eps: f32,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f32>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let n = point.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        sample(rng, n, max_coords).into_vec()
    };
    grad_check_coords(f, point, eps, &coords)
}

fn grad_check_coords<F>(f: F, point: &Tensor, eps: f32, coords: &[usize]) -> Result<f32>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", format!("eps must be > 0, got {eps}")));
    }
    let analytic = {
        let g = Graph::new();
        let x = g.leaf(point.clone(), true);
        let loss = f(&g, x)?;
        g.backward(loss)?;
        g.grad(x).ok_or_else(|| Error::invalid("grad_check", "no gradient on input"))?
    };
    if !analytic.all_finite() {
        return Err(Error::NonFinite { op: "grad_check(analytic)" });
    }
    let eval = |t: Tensor| -> Result<f32> {
        let g = Graph::new();
        let x = g.leaf(t, false);
        let loss = f(&g, x)?;
        g.value(loss).scalar_value()
    };
    let mut worst = 0.0f32;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite { op: "grad_check(numeric)" });
        }
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0f32.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
