//! Reverse-mode differentiation of the toy selection objective:
//! fusion scan -> native scores -> score aggregation -> cross-entropy.
//!
//! Gradients are accumulated into a [`FusionParams`]-shaped container so the
//! optimizer, serializer and gradient checker all walk the same tensor list.
//! The visual expert is constant with respect to the parameters, and top-k
//! itself is never differentiated: the loss reads the aggregated scores
//! directly.

use crate::fusion::{fuse_forward, FuseCache, FusedOutput, FusionParams, ScanMode};
use crate::selection::{aggregate_scores, native_scores, visual_scores};
use crate::ssm::{ScanCache, SsmParams, DELTA_A_FLOOR};
use crate::tokens::TokenGrid;
use crate::{Error, Result, Scalar};

use super::{selection_loss, LOSS_EPS};

/// Backpropagation through time over one recorded scan pass. Returns the
/// gradient with respect to the scan inputs and accumulates parameter
/// gradients into `grads`.
pub(crate) fn scan_backward<F: Scalar>(
    params: &SsmParams<F>,
    cache: &ScanCache<F>,
    dy: &[F],
    grads: &mut SsmParams<F>,
) -> Vec<F> {
    let ch = params.channels;
    let sd = params.state_dim;
    let len = cache.len;
    debug_assert_eq!(dy.len(), len * ch);

    let floor = F::of(DELTA_A_FLOOR);
    let mut dx = vec![F::zero(); len * ch];
    let mut dh = vec![F::zero(); ch * sd];
    let mut dh_prev = vec![F::zero(); ch * sd];
    let mut ddelta = vec![F::zero(); ch];
    let mut dbvec = vec![F::zero(); sd];
    let mut dcvec = vec![F::zero(); sd];
    let mut da = vec![F::zero(); ch * sd];

    for t in (0..len).rev() {
        let x = &cache.x[t * ch..(t + 1) * ch];
        let bvec = &cache.bvec[t * sd..(t + 1) * sd];
        let cvec = &cache.cvec[t * sd..(t + 1) * sd];
        ddelta.fill(F::zero());
        dbvec.fill(F::zero());
        dcvec.fill(F::zero());

        for c in 0..ch {
            let g_y = dy[t * ch + c];
            let xc = x[c];
            let delta_c = cache.delta[t * ch + c];

            // y_t[c] = <C_t, h_t[c]> + d_skip[c] * x_t[c]
            grads.d_skip[c] = grads.d_skip[c] + g_y * xc;
            dx[t * ch + c] = dx[t * ch + c] + g_y * params.d_skip[c];
            for s in 0..sd {
                let h_ts = cache.h[(t * ch + c) * sd + s];
                dh[c * sd + s] = dh[c * sd + s] + g_y * cvec[s];
                dcvec[s] = dcvec[s] + g_y * h_ts;
            }

            // h_t = a_bar * h_{t-1} + (delta*B_t[s]) * x_t[c]
            for s in 0..sd {
                let g = dh[c * sd + s];
                let a_bar = cache.abar[(t * ch + c) * sd + s];
                let h_prev = if t > 0 {
                    cache.h[((t - 1) * ch + c) * sd + s]
                } else {
                    F::zero()
                };
                let a = -params.a_log[c * sd + s].exp();
                // a_bar = exp(max(delta*a, floor)): gradient gated off in the
                // clamped region.
                if delta_c * a > floor {
                    let dprod = g * h_prev * a_bar;
                    ddelta[c] = ddelta[c] + dprod * a;
                    da[c * sd + s] = da[c * sd + s] + dprod * delta_c;
                }
                ddelta[c] = ddelta[c] + g * bvec[s] * xc;
                dbvec[s] = dbvec[s] + g * delta_c * xc;
                dx[t * ch + c] = dx[t * ch + c] + g * delta_c * bvec[s];
                dh_prev[c * sd + s] = g * a_bar;
            }
        }

        // delta = softplus(delta_proj(x))
        for c in 0..ch {
            let draw = ddelta[c] * cache.dsig[t * ch + c];
            grads.delta_proj.bias[c] = grads.delta_proj.bias[c] + draw;
            for k in 0..ch {
                grads.delta_proj.weight[c * ch + k] =
                    grads.delta_proj.weight[c * ch + k] + draw * x[k];
                dx[t * ch + k] = dx[t * ch + k] + draw * params.delta_proj.weight[c * ch + k];
            }
        }
        // B_t = b_proj(x), C_t = c_proj(x)
        for s in 0..sd {
            grads.b_proj.bias[s] = grads.b_proj.bias[s] + dbvec[s];
            grads.c_proj.bias[s] = grads.c_proj.bias[s] + dcvec[s];
            for k in 0..ch {
                grads.b_proj.weight[s * ch + k] = grads.b_proj.weight[s * ch + k] + dbvec[s] * x[k];
                grads.c_proj.weight[s * ch + k] = grads.c_proj.weight[s * ch + k] + dcvec[s] * x[k];
                dx[t * ch + k] = dx[t * ch + k]
                    + dbvec[s] * params.b_proj.weight[s * ch + k]
                    + dcvec[s] * params.c_proj.weight[s * ch + k];
            }
        }

        std::mem::swap(&mut dh, &mut dh_prev);
    }

    for i in 0..ch * sd {
        let a = -params.a_log[i].exp();
        grads.a_log[i] = grads.a_log[i] + da[i] * a;
    }
    dx
}

/// Backward through the fusion stage given cotangents for the fused tokens
/// and the fused instruction representation.
pub(crate) fn fuse_backward<F: Scalar>(
    grid: &TokenGrid<F>,
    params: &FusionParams<F>,
    cache: &FuseCache<F>,
    d_f_tokens: &[F],
    d_ins_out: &[F],
    grads: &mut FusionParams<F>,
) {
    let ch = params.channels;
    let n = cache.n;
    let ins_id = 2 * n;

    // Mean combine: each pass containing a slot receives 1/visits of the
    // slot's output cotangent. Window slots carry none (discarded outputs).
    let mut d_out = vec![F::zero(); (2 * n + 1) * ch];
    for i in 0..n {
        let id = n + i;
        let inv = F::of(1.0 / f64::from(cache.visits[id]));
        for k in 0..ch {
            d_out[id * ch + k] = d_f_tokens[i * ch + k] * inv;
        }
    }
    let inv = F::of(1.0 / f64::from(cache.visits[ins_id]));
    for k in 0..ch {
        d_out[ins_id * ch + k] = d_ins_out[k] * inv;
    }

    let mut d_normed = vec![F::zero(); (2 * n + 1) * ch];
    for pass in &cache.passes {
        let len = pass.slots.len();
        let mut dy = vec![F::zero(); len * ch];
        for (pos, &id) in pass.slots.iter().enumerate() {
            dy[pos * ch..(pos + 1) * ch].copy_from_slice(&d_out[id * ch..(id + 1) * ch]);
        }
        let (ssm, ssm_grads) = if pass.backward_params {
            (&params.ssm_bwd, &mut grads.ssm_bwd)
        } else {
            (&params.ssm_fwd, &mut grads.ssm_fwd)
        };
        let dx = scan_backward(ssm, &pass.scan, &dy, ssm_grads);
        for (pos, &id) in pass.slots.iter().enumerate() {
            for k in 0..ch {
                d_normed[id * ch + k] = d_normed[id * ch + k] + dx[pos * ch + k];
            }
        }
    }

    // in_norm: normed = scale * raw + shift. Window aggregates and content
    // tokens are input data; only the instruction slot feeds a parameter.
    let raw_of = |id: usize| -> &[F] {
        if id < n {
            &cache.tl[id * ch..(id + 1) * ch]
        } else if id < 2 * n {
            grid.token(id - n)
        } else {
            &params.ins_token
        }
    };
    for id in 0..=2 * n {
        if id < n && cache.tl.is_empty() {
            continue; // single mode: no window slots were built
        }
        let raw = raw_of(id);
        for k in 0..ch {
            let g = d_normed[id * ch + k];
            grads.in_norm.scale[k] = grads.in_norm.scale[k] + g * raw[k];
            grads.in_norm.shift[k] = grads.in_norm.shift[k] + g;
        }
    }
    for k in 0..ch {
        grads.ins_token[k] =
            grads.ins_token[k] + d_normed[ins_id * ch + k] * params.in_norm.scale[k];
    }
}

/// Forward state kept for the backward pass of the toy objective.
pub struct LossTrace<F> {
    pub loss: F,
    pub fused: FusedOutput<F>,
    pub vs: Vec<F>,
    pub ns: Vec<F>,
    pub as_scores: Vec<F>,
    cache: FuseCache<F>,
}

/// Forward pass of the toy objective with intermediates recorded.
pub fn toy_loss_forward<F: Scalar>(
    params: &FusionParams<F>,
    grid: &TokenGrid<F>,
    truth: &[usize],
    lambda_eff: f64,
    window: usize,
    mode: ScanMode,
) -> Result<LossTrace<F>> {
    let mut cache = FuseCache {
        n: 0,
        tl: Vec::new(),
        normed: Vec::new(),
        visits: Vec::new(),
        passes: Vec::new(),
    };
    let fused = fuse_forward(grid, params, window, mode, Some(&mut cache))?;
    let vs = visual_scores(grid.cls_attention())?;
    let ns = native_scores(&fused.f_tokens, &fused.ins_out)?;
    let as_scores = aggregate_scores(&vs, &ns, lambda_eff)?;
    let loss = selection_loss(&as_scores, truth)?;
    Ok(LossTrace {
        loss,
        fused,
        vs,
        ns,
        as_scores,
        cache,
    })
}

/// Loss-only evaluation (no intermediates), used by finite differences.
pub fn toy_loss_value<F: Scalar>(
    params: &FusionParams<F>,
    grid: &TokenGrid<F>,
    truth: &[usize],
    lambda_eff: f64,
    window: usize,
    mode: ScanMode,
) -> Result<F> {
    let fused = fuse_forward(grid, params, window, mode, None)?;
    let vs = visual_scores(grid.cls_attention())?;
    let ns = native_scores(&fused.f_tokens, &fused.ins_out)?;
    let as_scores = aggregate_scores(&vs, &ns, lambda_eff)?;
    selection_loss(&as_scores, truth)
}

/// Backward pass of the toy objective; accumulates into `grads`.
pub fn toy_loss_backward<F: Scalar>(
    params: &FusionParams<F>,
    grid: &TokenGrid<F>,
    trace: &LossTrace<F>,
    truth: &[usize],
    lambda_eff: f64,
    grads: &mut FusionParams<F>,
) {
    let n = trace.as_scores.len();
    let ch = params.channels;
    let eps = F::of(LOSS_EPS);
    let inv_truth = F::of(1.0 / truth.len() as f64);

    // loss = -(1/|truth|) sum ln(AS_i + eps)
    let mut d_as = vec![F::zero(); n];
    for &idx in truth {
        d_as[idx - 1] = -inv_truth / (trace.as_scores[idx - 1] + eps);
    }

    // AS = lambda*VS + (1-lambda)*NS, VS constant.
    let w = F::of(1.0 - lambda_eff);
    let d_ns: Vec<F> = d_as.iter().map(|&g| g * w).collect();

    // NS = softmax(logits), logits_i = <F_i, ins_out>.
    let weighted: F = trace.ns.iter().zip(&d_ns).map(|(&p, &g)| p * g).sum();
    let d_logits: Vec<F> = trace
        .ns
        .iter()
        .zip(&d_ns)
        .map(|(&p, &g)| p * (g - weighted))
        .collect();

    let mut d_f = vec![F::zero(); n * ch];
    let mut d_ins_out = vec![F::zero(); ch];
    for i in 0..n {
        let gi = d_logits[i];
        let fi = &trace.fused.f_tokens[i * ch..(i + 1) * ch];
        for k in 0..ch {
            d_f[i * ch + k] = gi * trace.fused.ins_out[k];
            d_ins_out[k] = d_ins_out[k] + gi * fi[k];
        }
    }

    fuse_backward(grid, params, &trace.cache, &d_f, &d_ins_out, grads);
}

/// Full forward + backward of the toy objective. Every gradient tensor is
/// checked for finiteness; the first offending parameter is named.
pub fn toy_loss_grads<F: Scalar>(
    params: &FusionParams<F>,
    grid: &TokenGrid<F>,
    truth: &[usize],
    lambda_eff: f64,
    window: usize,
    mode: ScanMode,
) -> Result<(LossTrace<F>, FusionParams<F>)> {
    let trace = toy_loss_forward(params, grid, truth, lambda_eff, window, mode)?;
    let mut grads = FusionParams::zeros(params.channels, params.out_width, params.ssm_fwd.state_dim);
    toy_loss_backward(params, grid, &trace, truth, lambda_eff, &mut grads);
    for (name, tensor) in grads.param_tensors() {
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((trace, grads))
}

/// `dst += src * scale` across every parameter tensor.
pub fn add_scaled<F: Scalar>(dst: &mut FusionParams<F>, src: &FusionParams<F>, scale: F) {
    let src_tensors = src.param_tensors();
    for ((_, d), (_, s)) in dst.param_tensors_mut().into_iter().zip(src_tensors) {
        for (x, &y) in d.iter_mut().zip(s.iter()) {
            *x = *x + y * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::gradcheck::check_gradients;
    use crate::train::{gen_toy_batch, ToyTaskSpec};

    fn tiny_case(seed: u64) -> (FusionParams<f64>, TokenGrid<f64>, Vec<usize>) {
        let spec = ToyTaskSpec {
            grid_h: 3,
            grid_w: 3,
            channels: 4,
            n_salient: 2,
            signal_strength: 2.0,
            seed,
        };
        let (grid, truth) = gen_toy_batch::<f64>(&spec, 1).unwrap().pop().unwrap();
        let params = FusionParams::<f64>::init(4, 4, 2, seed ^ 0xabc);
        (params, grid, truth)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for mode in [ScanMode::Single, ScanMode::LocalToSingle, ScanMode::Combined] {
            let (params, grid, truth) = tiny_case(7);
            let report =
                check_gradients(&params, &grid, &truth, 0.8, 3, mode, 1e-5, 20, 99).unwrap();
            assert!(
                report.max_rel_error <= 1e-4,
                "{mode}: max rel error {} (per tensor: {:?})",
                report.max_rel_error,
                report.per_tensor
            );
        }
    }

    #[test]
    fn out_proj_gradient_is_exactly_zero() {
        // The output projection sits after selection, outside this loss.
        let (params, grid, truth) = tiny_case(11);
        let (_, grads) =
            toy_loss_grads(&params, &grid, &truth, 0.8, 3, ScanMode::LocalToSingle).unwrap();
        for (name, tensor) in grads.param_tensors() {
            if name.starts_with("out_proj") {
                assert!(tensor.iter().all(|&v| v == 0.0), "{name} has nonzero grad");
            }
        }
    }

    #[test]
    fn ins_token_gradient_is_nonzero_for_generic_inputs() {
        let (params, grid, truth) = tiny_case(13);
        let (_, grads) =
            toy_loss_grads(&params, &grid, &truth, 0.8, 3, ScanMode::LocalToSingle).unwrap();
        let norm: f64 = grads.ins_token.iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "instruction token receives no gradient");
    }

    #[test]
    fn pure_visual_lambda_zeroes_every_gradient() {
        // With lambda = 1 the aggregated scores reduce to the visual expert,
        // which is constant in the parameters.
        let (params, grid, truth) = tiny_case(17);
        let (_, grads) =
            toy_loss_grads(&params, &grid, &truth, 1.0, 3, ScanMode::LocalToSingle).unwrap();
        for (name, tensor) in grads.param_tensors() {
            assert!(
                tensor.iter().all(|&v| v == 0.0),
                "{name} has nonzero grad at lambda=1"
            );
        }
    }

    #[test]
    fn loss_decreases_along_negative_gradient() {
        let (params, grid, truth) = tiny_case(19);
        let (trace, grads) =
            toy_loss_grads(&params, &grid, &truth, 0.5, 3, ScanMode::LocalToSingle).unwrap();
        let mut stepped = params.clone();
        add_scaled(&mut stepped, &grads, -1e-3);
        let after = toy_loss_value(&stepped, &grid, &truth, 0.5, 3, ScanMode::LocalToSingle)
            .unwrap();
        assert!(
            after < trace.loss,
            "loss did not decrease: {} -> {after}",
            trace.loss
        );
    }
}
