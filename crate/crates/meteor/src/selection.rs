//! Dual-expert token scoring and top-k retention.
//!
//! The visual expert reads the encoder's class-token attention; the native
//! expert measures similarity between each fused token and the fused
//! instruction representation. Scores are blended by a weight `lambda` that
//! warms the native side in linearly over early training, and the k
//! highest-scoring tokens are kept in spatial order.

use crate::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

/// All per-view scores plus the blend weight that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet<F> {
    /// Visual-expert distribution over the n content tokens.
    pub vs: Vec<F>,
    /// Native-expert distribution over the n content tokens.
    pub ns: Vec<F>,
    /// Blended scores, `lambda*vs + (1-lambda)*ns`.
    pub as_scores: Vec<F>,
    pub lambda_eff: f64,
}

/// Linear warmup of the native expert's contribution: its weight grows from
/// 0 to `1 - lambda_target` over `warmup_steps`, then stays flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub lambda_target: f64,
    pub warmup_steps: usize,
    pub current_step: usize,
}

impl WarmupSchedule {
    pub fn new(lambda_target: f64, warmup_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_target) {
            return Err(Error::InvalidConfig(format!(
                "lambda_target must lie in [0, 1], got {lambda_target}"
            )));
        }
        if warmup_steps == 0 {
            return Err(Error::InvalidConfig("warmup_steps must be >= 1".into()));
        }
        Ok(Self {
            lambda_target,
            warmup_steps,
            current_step: 0,
        })
    }

    pub fn advance(&mut self) {
        self.current_step += 1;
    }
}

/// Blend weight at the schedule's current step:
/// `1 - (1 - lambda_target) * min(1, step/warmup_steps)`.
pub fn effective_lambda(schedule: &WarmupSchedule) -> Result<f64> {
    if !(0.0..=1.0).contains(&schedule.lambda_target) {
        return Err(Error::InvalidConfig(format!(
            "lambda_target must lie in [0, 1], got {}",
            schedule.lambda_target
        )));
    }
    if schedule.warmup_steps == 0 {
        return Err(Error::InvalidConfig("warmup_steps must be >= 1".into()));
    }
    let progress = (schedule.current_step as f64 / schedule.warmup_steps as f64).min(1.0);
    Ok(1.0 - (1.0 - schedule.lambda_target) * progress)
}

/// Visual-expert scores from a class-attention vector: drops the class
/// token's self-attention (entry 0) and renormalizes the rest into a
/// distribution over content tokens.
pub fn visual_scores<F: Scalar>(cls_attention: &[F]) -> Result<Vec<F>> {
    if cls_attention.len() < 2 {
        return Err(Error::ShapeMismatch(
            "cls_attention needs the class entry plus at least one token".into(),
        ));
    }
    let body = &cls_attention[1..];
    let mut sum = F::zero();
    for &a in body {
        if !a.is_finite() || a < F::zero() {
            return Err(Error::InvalidImage(
                "cls_attention entries must be finite and nonnegative".into(),
            ));
        }
        sum = sum + a;
    }
    if sum <= F::zero() {
        return Err(Error::DegenerateAttention);
    }
    Ok(body.iter().map(|&a| a / sum).collect())
}

/// Native-expert scores: softmax over tokens of `<F^i, ins_out>`, computed
/// with max subtraction.
pub fn native_scores<F: Scalar>(f_tokens: &[F], ins_out: &[F]) -> Result<Vec<F>> {
    let width = ins_out.len();
    if width == 0 || f_tokens.is_empty() || f_tokens.len() % width != 0 {
        return Err(Error::ShapeMismatch(format!(
            "f_tokens length {} incompatible with width {width}",
            f_tokens.len()
        )));
    }
    if f_tokens.iter().chain(ins_out).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("native score inputs".into()));
    }
    let n = f_tokens.len() / width;
    let logits: Vec<F> = (0..n)
        .map(|i| crate::dot(&f_tokens[i * width..(i + 1) * width], ins_out))
        .collect();
    Ok(softmax(&logits))
}

pub(crate) fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Blends the two expert distributions: `lambda*vs + (1-lambda)*ns`.
pub fn aggregate_scores<F: Scalar>(vs: &[F], ns: &[F], lambda_eff: f64) -> Result<Vec<F>> {
    if vs.len() != ns.len() {
        return Err(Error::ShapeMismatch(format!(
            "score length mismatch: vs={}, ns={}",
            vs.len(),
            ns.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda_eff) {
        return Err(Error::InvalidConfig(format!(
            "lambda_eff must lie in [0, 1], got {lambda_eff}"
        )));
    }
    let (l, r) = (F::of(lambda_eff), F::of(1.0 - lambda_eff));
    Ok(vs.iter().zip(ns).map(|(&v, &n)| l * v + r * n).collect())
}

/// Scores one view end to end and packages the result.
pub fn score_tokens<F: Scalar>(
    cls_attention: &[F],
    f_tokens: &[F],
    ins_out: &[F],
    lambda_eff: f64,
) -> Result<ScoreSet<F>> {
    let vs = visual_scores(cls_attention)?;
    let ns = native_scores(f_tokens, ins_out)?;
    if vs.len() != ns.len() {
        return Err(Error::ShapeMismatch(format!(
            "attention covers {} tokens but fusion produced {}",
            vs.len(),
            ns.len()
        )));
    }
    let as_scores = aggregate_scores(&vs, &ns, lambda_eff)?;
    Ok(ScoreSet {
        vs,
        ns,
        as_scores,
        lambda_eff,
    })
}

/// Keeps the k highest-scoring tokens. Ties break toward the smaller index;
/// returned indices are 1-based and ascending, and the gathered tokens stay
/// in spatial raster order (never score order).
pub fn select_top_k<F: Scalar>(
    as_scores: &[F],
    f_tokens: &[F],
    width: usize,
    k: usize,
) -> Result<(Vec<usize>, Vec<F>)> {
    let n = as_scores.len();
    if k == 0 || k > n {
        return Err(Error::KExceedsTokens { k, n });
    }
    if f_tokens.len() != n * width {
        return Err(Error::ShapeMismatch(format!(
            "f_tokens length {} != {n}x{width}",
            f_tokens.len()
        )));
    }
    if as_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("aggregated scores".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        as_scores[b]
            .partial_cmp(&as_scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..k].iter().map(|&i| i + 1).collect();
    picked.sort_unstable();

    let mut selected = Vec::with_capacity(k * width);
    for &idx in &picked {
        selected.extend_from_slice(&f_tokens[(idx - 1) * width..idx * width]);
    }
    Ok((picked, selected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visual_scores_uniform_renormalization() {
        let vs = visual_scores(&[0.2f64, 0.2, 0.2, 0.2, 0.2]).unwrap();
        assert_eq!(vs, vec![0.25; 4]);
    }

    #[test]
    fn visual_scores_drops_self_attention_mass() {
        let vs = visual_scores(&[0.2f64, 0.4, 0.2, 0.1, 0.1]).unwrap();
        let expect = [0.5, 0.25, 0.125, 0.125];
        for (a, b) in vs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn visual_scores_reject_degenerate_attention() {
        assert!(matches!(
            visual_scores(&[1.0f64, 0.0, 0.0, 0.0]),
            Err(Error::DegenerateAttention)
        ));
    }

    #[test]
    fn visual_scores_invariant_under_rescaling() {
        let raw = [0.3f64, 0.5, 0.1, 0.7, 0.4];
        let a = visual_scores(&raw).unwrap();
        let scaled: Vec<f64> = raw.iter().map(|v| v * 37.5).collect();
        let b = visual_scores(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn native_scores_identical_tokens_are_uniform() {
        let f = vec![1.0f64, 2.0, 1.0, 2.0, 1.0, 2.0];
        let ns = native_scores(&f, &[0.5, -0.25]).unwrap();
        for v in &ns {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn native_scores_frozen_softmax_values() {
        // Logits [10, 0, 0] through a scalar softmax oracle.
        let f = vec![10.0f64, 0.0, 0.0];
        let ns = native_scores(&f, &[1.0]).unwrap();
        assert!((ns[0] - 0.9999092083).abs() < 1e-9);
        assert!((ns[1] - 4.5395807e-5).abs() < 1e-10);
        assert!((ns[2] - 4.5395807e-5).abs() < 1e-10);
    }

    #[test]
    fn native_scores_shift_invariant() {
        let base = vec![0.3f64, -1.2, 0.7, 0.1];
        let shifted: Vec<f64> = base.iter().map(|v| v + 123.0).collect();
        let a = native_scores(&base, &[1.0]).unwrap();
        let b = native_scores(&shifted, &[1.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_lambda_endpoints_and_midpoint() {
        let mut s = WarmupSchedule::new(0.8, 100).unwrap();
        assert_eq!(effective_lambda(&s).unwrap(), 1.0);
        s.current_step = 50;
        assert!((effective_lambda(&s).unwrap() - 0.9).abs() < 1e-12);
        s.current_step = 100;
        assert!((effective_lambda(&s).unwrap() - 0.8).abs() < 1e-12);
        s.current_step = 5000;
        assert!((effective_lambda(&s).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn effective_lambda_rejects_bad_target() {
        assert!(WarmupSchedule::new(1.5, 10).is_err());
        assert!(WarmupSchedule::new(-0.1, 10).is_err());
        assert!(WarmupSchedule::new(0.8, 0).is_err());
    }

    #[test]
    fn aggregate_endpoints_and_arithmetic() {
        let vs = [0.5f64, 0.5];
        let ns = [1.0f64, 0.0];
        assert_eq!(aggregate_scores(&vs, &ns, 1.0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(aggregate_scores(&vs, &ns, 0.0).unwrap(), vec![1.0, 0.0]);
        let blended = aggregate_scores(&vs, &ns, 0.8).unwrap();
        assert!((blended[0] - 0.6).abs() < 1e-12);
        assert!((blended[1] - 0.4).abs() < 1e-12);
        assert!(aggregate_scores(&vs, &ns[..1], 0.5).is_err());
    }

    #[test]
    fn top_k_sorts_spatially_and_breaks_ties_low() {
        let scores = [0.1f64, 0.4, 0.3, 0.2];
        let tokens = vec![10.0f64, 20.0, 30.0, 40.0];
        let (idx, sel) = select_top_k(&scores, &tokens, 1, 2).unwrap();
        assert_eq!(idx, vec![2, 3]);
        assert_eq!(sel, vec![20.0, 30.0]);

        let uniform = [0.25f64; 4];
        let (idx, _) = select_top_k(&uniform, &tokens, 1, 2).unwrap();
        assert_eq!(idx, vec![1, 2]);

        let (idx, sel) = select_top_k(&scores, &tokens, 1, 4).unwrap();
        assert_eq!(idx, vec![1, 2, 3, 4]);
        assert_eq!(sel, tokens);
    }

    #[test]
    fn top_k_rejects_oversized_k() {
        let scores = [0.5f64, 0.5];
        assert!(matches!(
            select_top_k(&scores, &[0.0, 0.0], 1, 3),
            Err(Error::KExceedsTokens { k: 3, n: 2 })
        ));
    }

    #[test]
    fn top_k_monotonicity_on_raised_score() {
        let mut scores = vec![0.5f64, 0.3, 0.15, 0.05];
        let tokens = vec![0.0f64; 4];
        let (before, _) = select_top_k(&scores, &tokens, 1, 2).unwrap();
        assert_eq!(before, vec![1, 2]);
        // Raise the unselected token 4 above the current k-th score (0.3):
        // it must enter and evict exactly the previous minimum.
        scores[3] = 0.35;
        let (after, _) = select_top_k(&scores, &tokens, 1, 2).unwrap();
        assert_eq!(after, vec![1, 4]);
    }

    #[test]
    fn top_k_permutation_equivariance() {
        let scores = [0.05f64, 0.4, 0.1, 0.25, 0.2];
        let tokens: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let (base_idx, _) = select_top_k(&scores, &tokens, 1, 2).unwrap();

        let perm = [3usize, 0, 4, 2, 1]; // new position p holds old index perm[p]
        let p_scores: Vec<f64> = perm.iter().map(|&o| scores[o]).collect();
        let p_tokens: Vec<f64> = perm.iter().map(|&o| tokens[o]).collect();
        let (perm_idx, _) = select_top_k(&p_scores, &p_tokens, 1, 2).unwrap();

        let mut mapped: Vec<usize> = perm_idx.iter().map(|&i| perm[i - 1] + 1).collect();
        mapped.sort_unstable();
        assert_eq!(mapped, base_idx);
    }

    #[test]
    fn score_set_distributions_sum_to_one() {
        let attn = [0.1f64, 0.3, 0.2, 0.25, 0.15];
        let f = vec![0.4f64, -0.3, 1.0, 0.2, -0.7, 0.05, 0.9, -1.1];
        let ins = [0.3f64, -0.6];
        let set = score_tokens(&attn, &f, &ins, 0.8).unwrap();
        for dist in [&set.vs, &set.ns, &set.as_scores] {
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(dist.iter().all(|&v| v >= 0.0));
        }
    }
}
