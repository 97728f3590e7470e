//! Desk-scale training of the fusion parameters on a planted-saliency task.
//!
//! A handful of tokens per sample are shifted along a hidden direction; the
//! class attention is synthesized to be mildly informative about them, so the
//! visual expert helps but cannot solve the task alone. The selection
//! cross-entropy is applied to the aggregated scores (before top-k, which is
//! not differentiable), training the same parameters the fusion and scoring
//! stages use at inference.

pub mod backward;
pub mod gradcheck;

pub use backward::{toy_loss_forward, toy_loss_grads, toy_loss_value, LossTrace};
pub use gradcheck::{check_gradients, GradCheckReport};

use crate::fusion::{FusionParams, ScanMode};
use crate::selection::{effective_lambda, select_top_k, WarmupSchedule};
use crate::tokens::TokenGrid;
use crate::{Error, Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;

/// Epsilon inside the cross-entropy log, keeping zero-mass truths finite.
pub const LOSS_EPS: f64 = 1e-12;

/// Log-normal spread of the synthesized attention mass. Salient tokens get
/// twice the mass before normalization, so attention is informative but
/// noisy.
const ATTN_LOG_STD: f64 = 0.35;

const DIRECTION_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Planted-saliency task description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ToyTaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub n_salient: usize,
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            grid_h: 6,
            grid_w: 6,
            channels: 16,
            n_salient: 4,
            signal_strength: 3.0,
            seed: 17,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("toy grid must be non-empty".into()));
        }
        if self.n_salient > self.grid_h * self.grid_w {
            return Err(Error::InvalidConfig(format!(
                "n_salient {} exceeds grid size {}",
                self.n_salient,
                self.grid_h * self.grid_w
            )));
        }
        if !self.signal_strength.is_finite() || self.signal_strength < 0.0 {
            return Err(Error::InvalidConfig(
                "signal_strength must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// The hidden unit direction the planted signal points along. Derived
    /// from the seed; kept out of the model's inputs.
    pub(crate) fn hidden_direction<F: Scalar>(&self) -> Vec<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ DIRECTION_SALT);
        let raw: Vec<f64> = (0..self.channels)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        raw.into_iter().map(|v| F::of(v / norm)).collect()
    }

}

/// Deterministically generates `batch` samples: unit-variance noise grids
/// with `n_salient` tokens shifted by `signal_strength` along the hidden
/// direction, plus synthesized class attention where salient tokens carry
/// twice the mass before normalization. Truth sets hold 1-based raster
/// indices.
pub fn gen_toy_batch<F: Scalar>(
    spec: &ToyTaskSpec,
    batch: usize,
) -> Result<Vec<(TokenGrid<F>, Vec<usize>)>> {
    spec.validate()?;
    let n = spec.grid_h * spec.grid_w;
    let ch = spec.channels;
    let direction = spec.hidden_direction::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut tokens: Vec<f64> = (0..n * ch)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut salient = rand::seq::index::sample(&mut rng, n, spec.n_salient).into_vec();
        salient.sort_unstable();
        for &idx in &salient {
            for k in 0..ch {
                tokens[idx * ch + k] += spec.signal_strength * direction[k];
            }
        }

        let cls_token: Vec<f64> = (0..ch).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        let mut mass: Vec<f64> = (0..n + 1)
            .map(|_| (ATTN_LOG_STD * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        for &idx in &salient {
            mass[idx + 1] *= 2.0;
        }
        let total: f64 = mass.iter().sum();
        let attention: Vec<F> = mass.into_iter().map(|m| F::of(m / total)).collect();

        let grid = TokenGrid::new(
            spec.grid_h,
            spec.grid_w,
            ch,
            tokens.into_iter().map(F::of).collect(),
            cls_token.into_iter().map(F::of).collect(),
            attention,
        )?;
        let truth: Vec<usize> = salient.into_iter().map(|i| i + 1).collect();
        out.push((grid, truth));
    }
    Ok(out)
}

/// Cross-entropy of the aggregated score distribution against the uniform
/// distribution over the truth indices.
pub fn selection_loss<F: Scalar>(as_scores: &[F], truth: &[usize]) -> Result<F> {
    if truth.is_empty() {
        return Err(Error::InvalidConfig("truth set must be nonempty".into()));
    }
    let n = as_scores.len();
    let eps = F::of(LOSS_EPS);
    let mut total = F::zero();
    for &idx in truth {
        if idx == 0 || idx > n {
            return Err(Error::InvalidConfig(format!(
                "truth index {idx} outside [1, {n}]"
            )));
        }
        total = total - (as_scores[idx - 1] + eps).ln();
    }
    Ok(total / F::of(truth.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    #[default]
    AdamW,
    /// SGD with momentum.
    Momentum,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate; decays to zero on a cosine schedule.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Selection budget used for recall.
    pub k: usize,
    pub lambda_target: f64,
    /// Native-expert warmup length in optimizer steps; `None` means one
    /// epoch.
    pub warmup_steps: Option<usize>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub window: usize,
    pub scan_mode: ScanMode,
    pub state_dim: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub momentum: f64,
    pub param_seed: u64,
    /// Line-delimited metrics records (step, loss, lambda_eff, recall) land
    /// here when set.
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            k: 4,
            lambda_target: 0.8,
            warmup_steps: None,
            train_samples: 4096,
            eval_samples: 128,
            window: 3,
            scan_mode: ScanMode::LocalToSingle,
            state_dim: 8,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            momentum: 0.9,
            param_seed: 1,
            metrics_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &ToyTaskSpec) -> Result<()> {
        spec.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.train_samples {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} must lie in [1, train_samples={}]",
                self.batch_size, self.train_samples
            )));
        }
        if self.k == 0 || self.k > spec.grid_h * spec.grid_w {
            return Err(Error::InvalidConfig(format!(
                "k {} must lie in [1, {}]",
                self.k,
                spec.grid_h * spec.grid_w
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_target) {
            return Err(Error::InvalidConfig(format!(
                "lambda_target must lie in [0, 1], got {}",
                self.lambda_target
            )));
        }
        if self.window % 2 == 0 {
            return Err(Error::InvalidConfig("window must be odd".into()));
        }
        if self.state_dim == 0 || self.eval_samples == 0 {
            return Err(Error::InvalidConfig(
                "state_dim and eval_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One metrics record per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lambda_eff: f64,
    /// Mean top-k recall over the training batch.
    pub recall: f64,
}

#[derive(Debug, Clone)]
pub struct TrainMetrics {
    pub final_loss: f64,
    /// Mean top-k recall on the held-out eval set at `lambda_target`.
    pub selection_recall: f64,
    pub loss_curve: Vec<f64>,
    pub steps_per_epoch: usize,
    pub records: Vec<StepRecord>,
}

/// Fraction of the truth set recovered by top-k selection on one sample.
fn sample_recall<F: Scalar>(as_scores: &[F], f_tokens: &[F], ch: usize, k: usize, truth: &[usize]) -> f64 {
    let (indices, _) = select_top_k(as_scores, f_tokens, ch, k).expect("k validated");
    let hits = indices.iter().filter(|i| truth.contains(i)).count();
    hits as f64 / truth.len() as f64
}

/// Trains fusion parameters on the planted-saliency task and reports the
/// held-out selection recall.
pub fn train_toy<F: Scalar>(spec: &ToyTaskSpec, config: &TrainConfig) -> Result<(FusionParams<F>, TrainMetrics)> {
    config.validate(spec)?;
    // Train and eval share the planted direction (it is part of the task
    // definition) but never share samples: one deterministic stream, split.
    let mut stream = gen_toy_batch::<F>(spec, config.train_samples + config.eval_samples)?;
    let eval_set = stream.split_off(config.train_samples);
    let train_set = stream;

    let ch = spec.channels;
    let mut params = FusionParams::<F>::init(ch, ch, config.state_dim, config.param_seed);
    let steps_per_epoch = config.train_samples.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut warmup = WarmupSchedule::new(
        config.lambda_target,
        config.warmup_steps.unwrap_or(steps_per_epoch),
    )?;

    let mut opt = OptimizerState::new(&params, config);
    let mut writer = match &config.metrics_path {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => None,
    };

    let mut records = Vec::with_capacity(total_steps);
    let mut loss_curve = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        for chunk in train_set.chunks(config.batch_size) {
            let lambda_eff = effective_lambda(&warmup)?;
            let per_sample: Vec<Result<(f64, FusionParams<F>, f64)>> =
                crate::threads::pool().install(|| {
                    chunk
                        .par_iter()
                        .map(|(grid, truth)| {
                            let (trace, grads) = toy_loss_grads(
                                &params,
                                grid,
                                truth,
                                lambda_eff,
                                config.window,
                                config.scan_mode,
                            )?;
                            let recall = sample_recall(
                                &trace.as_scores,
                                &trace.fused.f_tokens,
                                ch,
                                config.k,
                                truth,
                            );
                            Ok((trace.loss.to64(), grads, recall))
                        })
                        .collect()
                });

            // Fixed-order reduction keeps runs bitwise reproducible no matter
            // how the batch was scheduled across workers.
            let mut grad_sum = FusionParams::<F>::zeros(ch, ch, config.state_dim);
            let mut loss_sum = 0.0;
            let mut recall_sum = 0.0;
            let batch_len = chunk.len();
            for item in per_sample {
                let (loss, grads, recall) = item?;
                loss_sum += loss;
                recall_sum += recall;
                backward::add_scaled(&mut grad_sum, &grads, F::of(1.0 / batch_len as f64));
            }
            let mean_loss = loss_sum / batch_len as f64;
            let mean_recall = recall_sum / batch_len as f64;

            if !mean_loss.is_finite() {
                let tail: Vec<f64> = loss_curve.iter().rev().take(8).copied().collect();
                let norms: Vec<String> = params
                    .param_tensors()
                    .iter()
                    .map(|(name, t)| {
                        let norm = t.iter().map(|v| v.to64() * v.to64()).sum::<f64>().sqrt();
                        format!("{name}={norm:.3e}")
                    })
                    .collect();
                return Err(Error::Diverged {
                    step,
                    detail: format!("recent losses {tail:?}; parameter norms: {}", norms.join(", ")),
                });
            }

            let lr = config.learning_rate * 0.5
                * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            opt.step(&mut params, &grad_sum, lr, config);

            warmup.advance();
            let record = StepRecord {
                step,
                loss: mean_loss,
                lambda_eff,
                recall: mean_recall,
            };
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, &record)
                    .map_err(|e| Error::Format(format!("metrics record: {e}")))?;
                w.write_all(b"\n")?;
            }
            loss_curve.push(mean_loss);
            records.push(record);
            step += 1;
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }

    // Held-out recall at the configured target weight (inference uses
    // lambda_target directly, no schedule).
    let selection_recall = eval_recall(&params, &eval_set, config.lambda_target, config)?;

    let final_loss = *loss_curve.last().expect("at least one step");
    Ok((
        params,
        TrainMetrics {
            final_loss,
            selection_recall,
            loss_curve,
            steps_per_epoch,
            records,
        },
    ))
}

/// Mean top-k recall of `params` over a labelled sample set.
pub fn eval_recall<F: Scalar>(
    params: &FusionParams<F>,
    samples: &[(TokenGrid<F>, Vec<usize>)],
    lambda_eff: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let ch = params.channels;
    let recalls: Vec<Result<f64>> = crate::threads::pool().install(|| {
        samples
            .par_iter()
            .map(|(grid, truth)| {
                let trace = toy_loss_forward(
                    params,
                    grid,
                    truth,
                    lambda_eff,
                    config.window,
                    config.scan_mode,
                )?;
                Ok(sample_recall(
                    &trace.as_scores,
                    &trace.fused.f_tokens,
                    ch,
                    config.k,
                    truth,
                ))
            })
            .collect()
    });
    let mut total = 0.0;
    for r in &recalls {
        match r {
            Ok(v) => total += v,
            Err(_) => {
                return Err(Error::InvalidConfig("eval sample failed".into()));
            }
        }
    }
    Ok(total / samples.len() as f64)
}

struct OptimizerState<F> {
    m: FusionParams<F>,
    v: FusionParams<F>,
    t: usize,
}

impl<F: Scalar> OptimizerState<F> {
    fn new(params: &FusionParams<F>, config: &TrainConfig) -> Self {
        let zeros = || FusionParams::zeros(params.channels, params.out_width, config.state_dim);
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut FusionParams<F>, grads: &FusionParams<F>, lr: f64, config: &TrainConfig) {
        self.t += 1;
        match config.optimizer {
            OptimizerKind::AdamW => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                let g_tensors = grads.param_tensors();
                let m_tensors = self.m.param_tensors_mut();
                for ((_, m), (_, g)) in m_tensors.into_iter().zip(&g_tensors) {
                    for (mi, &gi) in m.iter_mut().zip(g.iter()) {
                        *mi = F::of(b1) * *mi + F::of(1.0 - b1) * gi;
                    }
                }
                let v_tensors = self.v.param_tensors_mut();
                for ((_, v), (_, g)) in v_tensors.into_iter().zip(&g_tensors) {
                    for (vi, &gi) in v.iter_mut().zip(g.iter()) {
                        *vi = F::of(b2) * *vi + F::of(1.0 - b2) * gi * gi;
                    }
                }
                let m_now = self.m.param_tensors();
                let v_now = self.v.param_tensors();
                for (((_, p), (_, m)), (_, v)) in params
                    .param_tensors_mut()
                    .into_iter()
                    .zip(m_now)
                    .zip(v_now)
                {
                    for ((pi, &mi), &vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                        let mhat = mi.to64() / bc1;
                        let vhat = vi.to64() / bc2;
                        let update = lr * (mhat / (vhat.sqrt() + eps) + config.weight_decay * pi.to64());
                        *pi = *pi - F::of(update);
                    }
                }
            }
            OptimizerKind::Momentum => {
                let mu = F::of(config.momentum);
                let g_tensors = grads.param_tensors();
                for ((_, m), (_, g)) in self.m.param_tensors_mut().into_iter().zip(&g_tensors) {
                    for (mi, &gi) in m.iter_mut().zip(g.iter()) {
                        *mi = mu * *mi + gi;
                    }
                }
                let m_now = self.m.param_tensors();
                for ((_, p), (_, m)) in params.param_tensors_mut().into_iter().zip(m_now) {
                    for (pi, &mi) in p.iter_mut().zip(m.iter()) {
                        *pi = *pi - F::of(lr) * mi - F::of(lr * config.weight_decay) * *pi;
                    }
                }
            }
        }
    }
}
