//! Finite-difference validation of reverse-mode gradients.
//!
//! The analytic gradient comes from the f32 backward pass. The numeric side
//! re-evaluates the recorded graph in f64 with one coordinate nudged by
//! `+-h`, so the difference quotient is not drowned by f32 rounding even for
//! deep composites.

use alloc::vec::Vec;

use super::{Graph, Param, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn rel_err(analytic: f32, numeric: f64) -> f32 {
    let a = analytic as f64;
    let denom = 1.0f64.max(a.abs()).max(numeric.abs());
    (((a - numeric) / denom).abs()) as f32
}

/// Check the gradient of a scalar-valued function at `x` against central
/// finite differences with step `h`. Returns the maximum relative error over
/// all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &[f32], shape: &[usize], h: f64) -> Result<f32>
where
    F: FnOnce(&mut Graph, Tensor) -> Result<Tensor>,
{
    let p = Param::new(x.to_vec(), shape.to_vec())?;
    let mut g = Graph::new();
    let leaf = g.param(&p);
    let loss = f(&mut g, leaf)?;
    if g.data(loss).len() != 1 {
        return Err(Error::shape("grad_check needs a scalar-valued function"));
    }
    g.backward(loss)?;
    max_rel_err_for_leaf(&g, loss, leaf, h, None, &mut Rng::new(0))
}

/// Check gradients of a scalar loss with respect to every trainable
/// parameter bound by `build`. For parameters with more than `max_coords`
/// elements a seeded random subset of coordinates is checked.
pub fn grad_check_params<F>(
    build: F,
    params: &[Param],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f32>
where
    F: FnOnce(&mut Graph) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let loss = build(&mut g)?;
    if g.data(loss).len() != 1 {
        return Err(Error::shape("grad_check needs a scalar-valued function"));
    }
    g.backward(loss)?;
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f32;
    for p in params {
        let leaf = g
            .binding(p)
            .ok_or_else(|| Error::config("parameter not bound in the checked graph"))?;
        let e = max_rel_err_for_leaf(&g, loss, leaf, h, Some(max_coords), &mut rng)?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn max_rel_err_for_leaf(
    g: &Graph,
    loss: Tensor,
    leaf: Tensor,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut Rng,
) -> Result<f32> {
    let n = g.data(leaf).len();
    let analytic = g
        .grad(leaf)
        .ok_or_else(|| Error::config("no gradient recorded for the checked leaf"))?
        .to_vec();
    let coords: Vec<usize> = match max_coords {
        Some(cap) if n > cap => (0..cap).map(|_| rng.next_below(n)).collect(),
        _ => (0..n).collect(),
    };
    let mut worst = 0.0f32;
    for &i in &coords {
        let fp = g.eval_f64(loss, leaf, i, h)?;
        let fm = g.eval_f64(loss, leaf, i, -h)?;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}
