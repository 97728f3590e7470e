//! Selective state-space scan: a linear-time recurrence whose step size and
//! input/output maps depend on the current input token, plus a deliberately
//! naive reference implementation used as the equivalence oracle.
//!
//! Per channel `c` and state `s`, with `A[c][s] = -exp(a_log[c][s])`:
//!
//! ```text
//!   delta_t[c]    = softplus(delta_proj(x_t))[c]
//!   a_bar_t[c][s] = exp(delta_t[c] * A[c][s])        (floored at exp(-60))
//!   b_bar_t[c][s] = delta_t[c] * B_t[s]
//!   h_t[c][s]     = a_bar_t[c][s] * h_{t-1}[c][s] + b_bar_t[c][s] * x_t[c]
//!   y_t[c]        = <C_t, h_t[c]> + d_skip[c] * x_t[c]
//! ```
//!
//! where `B_t = b_proj(x_t)` and `C_t = c_proj(x_t)` are shared across
//! channels. A single scan is sequential over `t`; concurrency lives at the
//! sequence level.

use crate::{Error, Result, Scalar};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floor applied to `delta * A` before exponentiation, guarding overflow for
/// extreme step sizes; `exp(-60)` underflows to a full state reset.
pub const DELTA_A_FLOOR: f64 = -60.0;

/// Dense affine map `y = W x + b` with `W` stored row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Affine<F> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![F::zero(); in_dim * out_dim],
            bias: vec![F::zero(); out_dim],
        }
    }

    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        let mut a = Self::zeros(in_dim, out_dim);
        for w in &mut a.weight {
            *w = F::of(std * rng.sample::<f64, _>(StandardNormal));
        }
        a
    }

    pub fn apply(&self, x: &[F], y: &mut [F]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        for (o, out) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *out = crate::dot(row, x) + self.bias[o];
        }
    }
}

/// Trainable parameters of one scan direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<F> {
    pub channels: usize,
    pub state_dim: usize,
    /// `[channels * state_dim]`, storing `log(-A)` for the negative diagonal
    /// state matrix.
    pub a_log: Vec<F>,
    /// Token -> per-channel step sizes (softplus applied after).
    pub delta_proj: Affine<F>,
    /// Token -> per-step input vector `B` of length `state_dim`.
    pub b_proj: Affine<F>,
    /// Token -> per-step output vector `C` of length `state_dim`.
    pub c_proj: Affine<F>,
    /// Direct feedthrough, `[channels]`.
    pub d_skip: Vec<F>,
}

pub const DEFAULT_STATE_DIM: usize = 8;

impl<F: Scalar> SsmParams<F> {
    /// All-zero parameters (useful for isolating the skip path; note that
    /// zero `a_log` still means `A = -1`).
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        Self {
            channels,
            state_dim,
            a_log: vec![F::zero(); channels * state_dim],
            delta_proj: Affine::zeros(channels, channels),
            b_proj: Affine::zeros(channels, state_dim),
            c_proj: Affine::zeros(channels, state_dim),
            d_skip: vec![F::zero(); channels],
        }
    }

    /// Stable initialization: `-A = 1..=state_dim` per channel, step-size
    /// bias placed so `softplus(bias)` spans 0.01..0.1 geometrically across
    /// channels, small random projections, unit skip.
    pub fn init<R: Rng>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, state_dim);
        for c in 0..channels {
            for s in 0..state_dim {
                p.a_log[c * state_dim + s] = F::of(((s + 1) as f64).ln());
            }
        }
        let proj_std = 1.0 / (channels as f64).sqrt();
        p.delta_proj = Affine::random(channels, channels, 0.1 * proj_std, rng);
        for c in 0..channels {
            let t = if channels > 1 {
                c as f64 / (channels - 1) as f64
            } else {
                0.0
            };
            let dt = 0.01 * 10f64.powf(t);
            // Inverse softplus: ln(e^dt - 1).
            p.delta_proj.bias[c] = F::of((dt.exp() - 1.0).ln());
        }
        p.b_proj = Affine::random(channels, state_dim, proj_std, rng);
        p.c_proj = Affine::random(channels, state_dim, proj_std, rng);
        p.d_skip = vec![F::one(); channels];
        p
    }
}

/// A length-L sequence of width-`width` vectors, stored flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequence<F> {
    width: usize,
    data: Vec<F>,
}

impl<F: Scalar> ScanSequence<F> {
    pub fn new(width: usize, data: Vec<F>) -> Result<Self> {
        if width == 0 || data.is_empty() || data.len() % width != 0 {
            return Err(Error::ShapeMismatch(format!(
                "sequence of {} values is not a positive multiple of width {width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scan sequence".into()));
        }
        Ok(Self { width, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires length >= 1
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn step(&self, t: usize) -> &[F] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }
}

/// Zero-order-hold discretization of one diagonal entry: `a_bar =
/// exp(delta*a)` (floored), `b_bar = delta*b` (Euler step for the input map).
pub fn discretize<F: Scalar>(delta: F, a: F, b: F) -> (F, F) {
    debug_assert!(delta > F::zero(), "delta must be positive");
    debug_assert!(a < F::zero(), "a must be negative");
    let a_bar = (delta * a).max(F::of(DELTA_A_FLOOR)).exp();
    (a_bar, delta * b)
}

/// `softplus(x) = ln(1 + e^x)`, computed without overflow.
pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Per-step intermediates recorded during a scan, consumed by
/// backpropagation through time.
#[derive(Debug, Clone)]
pub(crate) struct ScanCache<F> {
    pub len: usize,
    /// Copy of the scan inputs, `[len * channels]`.
    pub x: Vec<F>,
    /// Softplus-activated step sizes, `[len * channels]`.
    pub delta: Vec<F>,
    /// `sigmoid(delta_raw)`, the softplus derivative, `[len * channels]`.
    pub dsig: Vec<F>,
    /// Input vectors `B_t`, `[len * state_dim]`.
    pub bvec: Vec<F>,
    /// Output vectors `C_t`, `[len * state_dim]`.
    pub cvec: Vec<F>,
    /// Discretized transitions, `[len * channels * state_dim]`.
    pub abar: Vec<F>,
    /// State trajectory, `[len * channels * state_dim]`.
    pub h: Vec<F>,
}

impl<F: Scalar> ScanCache<F> {
    pub(crate) fn empty() -> Self {
        Self::with_capacity(0, 0, 0)
    }

    fn with_capacity(len: usize, channels: usize, state_dim: usize) -> Self {
        Self {
            len,
            x: Vec::with_capacity(len * channels),
            delta: Vec::with_capacity(len * channels),
            dsig: Vec::with_capacity(len * channels),
            bvec: Vec::with_capacity(len * state_dim),
            cvec: Vec::with_capacity(len * state_dim),
            abar: Vec::with_capacity(len * channels * state_dim),
            h: Vec::with_capacity(len * channels * state_dim),
        }
    }
}

/// Core recurrence over a flat `[len * channels]` input buffer. Optionally
/// records intermediates for the backward pass.
pub(crate) fn scan_core<F: Scalar>(
    inputs: &[F],
    len: usize,
    params: &SsmParams<F>,
    mut cache: Option<&mut ScanCache<F>>,
) -> Vec<F> {
    let ch = params.channels;
    let sd = params.state_dim;
    debug_assert_eq!(inputs.len(), len * ch);

    if let Some(c) = cache.as_deref_mut() {
        *c = ScanCache::with_capacity(len, ch, sd);
        c.x.extend_from_slice(inputs);
    }

    let floor = F::of(DELTA_A_FLOOR);
    let mut h = vec![F::zero(); ch * sd];
    let mut delta_raw = vec![F::zero(); ch];
    let mut bvec = vec![F::zero(); sd];
    let mut cvec = vec![F::zero(); sd];
    let mut out = vec![F::zero(); len * ch];

    for t in 0..len {
        let x = &inputs[t * ch..(t + 1) * ch];
        params.delta_proj.apply(x, &mut delta_raw);
        params.b_proj.apply(x, &mut bvec);
        params.c_proj.apply(x, &mut cvec);

        if let Some(c) = cache.as_deref_mut() {
            c.bvec.extend_from_slice(&bvec);
            c.cvec.extend_from_slice(&cvec);
        }

        for c in 0..ch {
            let delta = softplus(delta_raw[c]);
            if let Some(cc) = cache.as_deref_mut() {
                cc.delta.push(delta);
                cc.dsig.push(sigmoid(delta_raw[c]));
            }
            let xc = x[c];
            let mut y = params.d_skip[c] * xc;
            let hc = &mut h[c * sd..(c + 1) * sd];
            for s in 0..sd {
                let a = -params.a_log[c * sd + s].exp();
                let a_bar = (delta * a).max(floor).exp();
                let b_bar = delta * bvec[s];
                hc[s] = a_bar * hc[s] + b_bar * xc;
                y = y + cvec[s] * hc[s];
                if let Some(cc) = cache.as_deref_mut() {
                    cc.abar.push(a_bar);
                }
            }
            out[t * ch + c] = y;
        }
        if let Some(cc) = cache.as_deref_mut() {
            cc.h.extend_from_slice(&h);
        }
    }
    out
}

/// Runs the input-dependent scan over a sequence.
pub fn selective_scan<F: Scalar>(
    seq: &ScanSequence<F>,
    params: &SsmParams<F>,
) -> Result<ScanSequence<F>> {
    if seq.width() != params.channels {
        return Err(Error::ShapeMismatch(format!(
            "sequence width {} != channels {}",
            seq.width(),
            params.channels
        )));
    }
    let out = scan_core(seq.data(), seq.len(), params, None);
    ScanSequence::new(seq.width(), out)
}

/// Equivalence oracle for [`selective_scan`]: the most literal step-by-step
/// loop, one channel at a time, every intermediate recomputed in 64-bit
/// arithmetic regardless of the storage type.
pub fn reference_scan<F: Scalar>(
    seq: &ScanSequence<F>,
    params: &SsmParams<F>,
) -> Result<ScanSequence<F>> {
    if seq.width() != params.channels {
        return Err(Error::ShapeMismatch(format!(
            "sequence width {} != channels {}",
            seq.width(),
            params.channels
        )));
    }
    let ch = params.channels;
    let sd = params.state_dim;
    let len = seq.len();

    let wide = |v: &[F]| -> Vec<f64> { v.iter().map(|&x| x.to64()).collect() };
    let x = wide(seq.data());
    let a_log = wide(&params.a_log);
    let dw = wide(&params.delta_proj.weight);
    let db = wide(&params.delta_proj.bias);
    let bw = wide(&params.b_proj.weight);
    let bb = wide(&params.b_proj.bias);
    let cw = wide(&params.c_proj.weight);
    let cb = wide(&params.c_proj.bias);
    let d_skip = wide(&params.d_skip);

    let mut out = vec![F::zero(); len * ch];
    for c in 0..ch {
        let mut h = vec![0.0f64; sd];
        for t in 0..len {
            let xt = &x[t * ch..(t + 1) * ch];

            let mut raw = db[c];
            for k in 0..ch {
                raw += dw[c * ch + k] * xt[k];
            }
            let delta = raw.max(0.0) + (-raw.abs()).exp().ln_1p();

            let mut y = d_skip[c] * xt[c];
            for s in 0..sd {
                let mut b = bb[s];
                let mut co = cb[s];
                for k in 0..ch {
                    b += bw[s * ch + k] * xt[k];
                    co += cw[s * ch + k] * xt[k];
                }
                let a = -a_log[c * sd + s].exp();
                let a_bar = (delta * a).max(DELTA_A_FLOOR).exp();
                let b_bar = delta * b;
                h[s] = a_bar * h[s] + b_bar * xt[c];
                y += co * h[s];
            }
            out[t * ch + c] = F::of(y);
        }
    }
    ScanSequence::new(seq.width(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_seq<F: Scalar>(len: usize, width: usize, rng: &mut ChaCha8Rng) -> ScanSequence<F> {
        let data = (0..len * width)
            .map(|_| F::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        ScanSequence::new(width, data).unwrap()
    }

    fn max_abs_diff<F: Scalar>(a: &ScanSequence<F>, b: &ScanSequence<F>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x.to64() - y.to64()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn discretize_frozen_values() {
        // exp(-0.1) and exp(-1) from a scalar calculator.
        let (a_bar, b_bar) = discretize(0.1f64, -1.0, 1.0);
        assert!((a_bar - 0.904837418035960).abs() < 1e-12);
        assert!((b_bar - 0.1).abs() < 1e-15);

        let (a_bar, b_bar) = discretize(0.5f64, -2.0, 3.0);
        assert!((a_bar - 0.367879441171442).abs() < 1e-12);
        assert!((b_bar - 1.5).abs() < 1e-15);
    }

    #[test]
    fn discretize_clamps_to_full_reset() {
        let (a_bar, _) = discretize(1.0f64, -1e9, 1.0);
        assert!((a_bar - DELTA_A_FLOOR.exp()).abs() < 1e-40);
        assert!(a_bar > 0.0 && a_bar < 1e-20);
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = SsmParams::<f64>::init(6, 4, &mut rng);
        let seq = ScanSequence::new(6, vec![0.0; 6 * 9]).unwrap();
        let out = selective_scan(&seq, &params).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_collapses_to_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = SsmParams::<f64>::init(5, 3, &mut rng);
        let seq = random_seq::<f64>(1, 5, &mut rng);
        let out = selective_scan(&seq, &params).unwrap();

        let x = seq.step(0);
        let mut delta_raw = vec![0.0; 5];
        let mut bvec = vec![0.0; 3];
        let mut cvec = vec![0.0; 3];
        params.delta_proj.apply(x, &mut delta_raw);
        params.b_proj.apply(x, &mut bvec);
        params.c_proj.apply(x, &mut cvec);
        for c in 0..5 {
            let delta = softplus(delta_raw[c]);
            let mut expect = params.d_skip[c] * x[c];
            for s in 0..3 {
                let a = -params.a_log[c * 3 + s].exp();
                let (_, b_bar) = discretize(delta, a, bvec[s]);
                expect += cvec[s] * b_bar * x[c];
            }
            assert!((out.step(0)[c] - expect).abs() < 1e-12, "channel {c}");
        }
    }

    #[test]
    fn matches_reference_on_seeded_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = SsmParams::<f64>::init(8, 4, &mut rng);
        let seq = random_seq::<f64>(257, 8, &mut rng);
        let fast = selective_scan(&seq, &params).unwrap();
        let slow = reference_scan(&seq, &params).unwrap();
        assert!(max_abs_diff(&fast, &slow) < 1e-6);
    }

    #[test]
    fn matches_reference_fuzz_f64_and_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..20 {
            let ch = 1 + (case % 7);
            let sd = 1 + (case % 5);
            let len = 1 + (case * 37) % 300;

            let params64 = SsmParams::<f64>::init(ch, sd, &mut rng);
            let seq64 = random_seq::<f64>(len, ch, &mut rng);
            let d64 = max_abs_diff(
                &selective_scan(&seq64, &params64).unwrap(),
                &reference_scan(&seq64, &params64).unwrap(),
            );
            assert!(d64 < 1e-6, "case {case}: f64 diff {d64}");

            let params32 = SsmParams::<f32>::init(ch, sd, &mut rng);
            let seq32 = random_seq::<f32>(len, ch, &mut rng);
            let d32 = max_abs_diff(
                &selective_scan(&seq32, &params32).unwrap(),
                &reference_scan(&seq32, &params32).unwrap(),
            );
            assert!(d32 < 1e-3, "case {case}: f32 diff {d32}");
        }
    }

    #[test]
    fn forward_scan_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = SsmParams::<f64>::init(4, 3, &mut rng);
        let seq = random_seq::<f64>(40, 4, &mut rng);
        let base = selective_scan(&seq, &params).unwrap();

        let t_perturb = 17;
        let mut data = seq.data().to_vec();
        data[t_perturb * 4 + 1] += 0.5;
        let perturbed =
            selective_scan(&ScanSequence::new(4, data).unwrap(), &params).unwrap();

        for t in 0..40 {
            let changed = base.step(t) != perturbed.step(t);
            if t < t_perturb {
                assert!(!changed, "output at {t} changed before perturbation");
            }
        }
        assert_ne!(base.step(t_perturb), perturbed.step(t_perturb));
    }

    #[test]
    fn bounded_inputs_keep_states_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = SsmParams::<f64>::init(3, 4, &mut rng);
        let seq = random_seq::<f64>(200, 3, &mut rng);

        let mut cache = ScanCache::empty();
        scan_core(seq.data(), seq.len(), &params, Some(&mut cache));

        // Recover the geometric-series bound from the recorded quantities.
        let mut max_abar: f64 = 0.0;
        let mut max_drive: f64 = 0.0;
        for t in 0..200 {
            for c in 0..3 {
                let delta = cache.delta[t * 3 + c];
                let xc = cache.x[t * 3 + c];
                for s in 0..4 {
                    max_abar = max_abar.max(cache.abar[(t * 3 + c) * 4 + s]);
                    max_drive = max_drive.max((delta * cache.bvec[t * 4 + s] * xc).abs());
                }
            }
        }
        assert!(max_abar < 1.0);
        let bound = max_drive / (1.0 - max_abar);
        let max_state = cache.h.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(
            max_state <= bound + 1e-12,
            "state {max_state} exceeds bound {bound}"
        );
    }

    #[test]
    fn rejects_non_finite_and_mismatched_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = SsmParams::<f64>::init(4, 2, &mut rng);
        assert!(ScanSequence::new(4, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(ScanSequence::<f64>::new(4, vec![]).is_err());
        let wrong_width = random_seq::<f64>(3, 5, &mut rng);
        assert!(selective_scan(&wrong_width, &params).is_err());
    }
}
