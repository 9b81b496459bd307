//! Independent verification utilities: central finite differences and
//! exhaustive search over tiny response spaces.
//!
//! Nothing here shares code with the analytic gradient path.

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams};
use crate::world::{Task, TokenId, World};

/// Default step for central differences on f64 parameters of magnitude <= 1.
pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `point` along the listed coordinates.
/// Coordinates not listed get zero.
pub fn finite_diff<F>(f: F, point: &[f64], coords: &[usize], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::input(format!("step must be positive, got {step}")));
    }
    let mut x = point.to_vec();
    let mut out = vec![0.0; point.len()];
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x)?;
        x[i] = orig - step;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::input(format!("non-finite loss probing coordinate {i}")));
        }
        out[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Numeric gradient of a loss over the trainable entries of `params`.
pub fn finite_diff_grad<F>(loss: F, params: &PolicyParams, step: f64) -> Result<Gradient>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let coords = params.trainable_indices();
    let g = finite_diff(
        |x| {
            let p = PolicyParams::from_raw(params.dims, params.freeze, params.seed, params.step, x.to_vec())?;
            loss(&p)
        },
        params.as_slice(),
        &coords,
        step,
    )?;
    Ok(Gradient(g))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Exhaustive argmax of total reward over every sequence of length <= `max_len`.
/// Ties go to the lexicographically smallest sequence (a prefix sorts first).
pub fn enumerate_best_response(
    world: &World,
    task: &Task,
    max_len: usize,
    budget: u64,
) -> Result<(Vec<TokenId>, f64)> {
    let v = world.vocab.size as u64;
    let mut count: u64 = 0;
    let mut layer: u64 = 1;
    for _ in 0..=max_len {
        count = count.saturating_add(layer);
        layer = layer.saturating_mul(v);
    }
    if count > budget {
        return Err(Error::input(format!(
            "enumerating {count} sequences exceeds budget {budget}"
        )));
    }

    let mut best = Vec::new();
    let mut best_reward = world.score(task, &[]).total;
    let mut seq: Vec<TokenId> = Vec::with_capacity(max_len);
    // depth-first preorder visits sequences in lexicographic order
    loop {
        if seq.len() < max_len {
            seq.push(0);
        } else {
            loop {
                match seq.last_mut() {
                    None => return Ok((best, best_reward)),
                    Some(t) if *t + 1 < world.vocab.size => {
                        *t += 1;
                        break;
                    }
                    Some(_) => {
                        seq.pop();
                    }
                }
            }
        }
        let r = world.score(task, &seq).total;
        if r > best_reward {
            best_reward = r;
            best = seq.clone();
        }
    }
}
