//! Central-difference gradient verification in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares analytic gradients against central finite differences at a random
/// sample of parameter coordinates and returns the worst relative error.
///
/// `loss_fn(params, want_grads)` must be a deterministic function of `params`;
/// when `want_grads` is true it also returns one gradient tensor per
/// parameter, shape-aligned.
pub fn finite_difference_check<L>(
    mut loss_fn: L,
    params: &mut [Tensor<f64>],
    epsilon: f64,
    num_coords: usize,
    seed: u64,
) -> Result<f64>
where
    L: FnMut(&[Tensor<f64>], bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Config(format!("epsilon {} outside (0, 1e-2]", epsilon)));
    }
    let (l1, _) = loss_fn(params, false)?;
    let (l2, _) = loss_fn(params, false)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::NonDeterministic { a: l1, b: l2 });
    }
    let (_, grads) = loss_fn(params, true)?;
    let grads = grads.ok_or_else(|| Error::Config("loss_fn returned no gradients".into()))?;
    if grads.len() != params.len() {
        return Err(Error::Config(format!(
            "{} gradient tensors for {} parameters",
            grads.len(),
            params.len()
        )));
    }

    let total: usize = params.iter().map(|p| p.numel()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..num_coords {
        let mut flat = rng.gen_range(0..total);
        let mut t = 0;
        while flat >= params[t].numel() {
            flat -= params[t].numel();
            t += 1;
        }
        let orig = params[t].data[flat];
        params[t].data[flat] = orig + epsilon;
        let (lp, _) = loss_fn(params, false)?;
        params[t].data[flat] = orig - epsilon;
        let (lm, _) = loss_fn(params, false)?;
        params[t].data[flat] = orig;

        let fd = (lp - lm) / (2.0 * epsilon);
        let an = grads[t].data[flat];
        // Absolute floor keeps coordinates with vanishing gradients from being
        // dominated by roundoff noise in the loss evaluation itself.
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
