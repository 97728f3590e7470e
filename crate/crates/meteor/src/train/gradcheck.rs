//! Central finite-difference verification of the analytic gradients.

use crate::fusion::{FusionParams, ScanMode};
use crate::tokens::TokenGrid;
use crate::{Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backward::{toy_loss_grads, toy_loss_value};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that genuinely tiny gradients are held to an absolute bar instead of an
/// unbounded relative one.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
}

/// Compares analytic gradients of the toy objective against central finite
/// differences at `coords_per_tensor` randomly chosen coordinates of every
/// parameter tensor (all coordinates when a tensor is smaller than that).
pub fn check_gradients<F: Scalar>(
    params: &FusionParams<F>,
    grid: &TokenGrid<F>,
    truth: &[usize],
    lambda_eff: f64,
    window: usize,
    mode: ScanMode,
    epsilon: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = toy_loss_grads(params, grid, truth, lambda_eff, window, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let eps = F::of(epsilon);

    let n_tensors = params.param_tensors().len();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        per_tensor: Vec::with_capacity(n_tensors),
    };

    for tensor_idx in 0..n_tensors {
        let (name, values) = {
            let tensors = params.param_tensors();
            (tensors[tensor_idx].0, tensors[tensor_idx].1.to_vec())
        };
        let len = values.len();
        let coords: Vec<usize> = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            let mut picked: Vec<usize> = (0..coords_per_tensor)
                .map(|_| rng.gen_range(0..len))
                .collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };

        let mut worst = 0.0f64;
        for &coord in &coords {
            let original = values[coord];
            {
                let mut tensors = work.param_tensors_mut();
                tensors[tensor_idx].1[coord] = original + eps;
            }
            let plus = toy_loss_value(&work, grid, truth, lambda_eff, window, mode)?.to64();
            {
                let mut tensors = work.param_tensors_mut();
                tensors[tensor_idx].1[coord] = original - eps;
            }
            let minus = toy_loss_value(&work, grid, truth, lambda_eff, window, mode)?.to64();
            {
                let mut tensors = work.param_tensors_mut();
                tensors[tensor_idx].1[coord] = original;
            }

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.param_tensors()[tensor_idx].1[coord].to64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            report.coords_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.push((name.to_string(), worst));
    }
    Ok(report)
}
