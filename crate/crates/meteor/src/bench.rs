//! Benchmark harness: scan-length scaling, throughput versus retention
//! budget, and the scan/expert ablation grid.
//!
//! Timing uses wall-clock medians over repeated trials. The throughput mode
//! pairs compression with a synthetic token sink whose cost is linear in the
//! number of emitted tokens, standing in for a downstream model's per-token
//! decode cost, so the budget-versus-throughput ordering is observable
//! without one.

use crate::fusion::{FusionParams, ScanMode};
use crate::pipeline::{compress_image, PipelineConfig, SyntheticEncoder};
use crate::selection::{select_top_k, visual_scores};
use crate::ssm::{selective_scan, ScanSequence, SsmParams};
use crate::tokens::{CompressedOutput, ImageMeta};
use crate::train::{gen_toy_batch, train_toy, TrainConfig, ToyTaskSpec};
use crate::{Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::hint::black_box;
use std::time::Instant;

pub fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub len: usize,
    pub median_secs: f64,
    /// Runtime ratio against the previous (half-length) point.
    pub ratio_vs_prev: Option<f64>,
}

/// Times the selective scan at each length and reports doubling ratios.
/// A linear-time scan keeps ratios near 2.
pub fn scan_scaling(
    lens: &[usize],
    trials: usize,
    channels: usize,
    state_dim: usize,
    seed: u64,
) -> Vec<ScalingPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SsmParams::<f32>::init(channels, state_dim, &mut rng);

    let mut points: Vec<ScalingPoint> = Vec::with_capacity(lens.len());
    for &len in lens {
        let data: Vec<f32> = (0..len * channels)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let seq = ScanSequence::new(channels, data).expect("finite inputs");
        // Short sequences get repeated per trial so every trial is long
        // enough to time reliably; reported time is per scan.
        let reps = ((1 << 16) / len).max(1);
        let _warm = selective_scan(&seq, &params).expect("scan");

        let mut times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let start = Instant::now();
            for _ in 0..reps {
                black_box(selective_scan(black_box(&seq), &params).expect("scan"));
            }
            times.push(start.elapsed().as_secs_f64() / reps as f64);
        }
        let median_secs = median(times);
        let ratio_vs_prev = points
            .last()
            .map(|prev: &ScalingPoint| median_secs / prev.median_secs);
        points.push(ScalingPoint {
            len,
            median_secs,
            ratio_vs_prev,
        });
    }
    points
}

#[derive(Debug, Clone, Serialize)]
pub struct TpsPoint {
    pub k_per_view: usize,
    pub tokens_emitted: usize,
    pub median_secs: f64,
    /// Generated tokens per second through compression plus the sink.
    pub tps: f64,
}

/// Tokens the synthetic sink "generates" per image.
pub const SINK_GENERATED_TOKENS: usize = 32;
/// Work multiplier of the sink; each generated token costs
/// `passes * emitted * D` multiply-adds.
pub const SINK_PASSES: usize = 16;

/// Linear-cost stand-in for a downstream model: every generated token
/// attends over all emitted tokens.
pub fn token_sink(outputs: &[CompressedOutput<f32>], weight: &[f32]) -> f32 {
    let mut acc = 0f32;
    for g in 0..SINK_GENERATED_TOKENS {
        let bias = g as f32 * 1e-3;
        for _ in 0..SINK_PASSES {
            for out in outputs {
                for token in out.selected.chunks_exact(out.width) {
                    let mut dot = bias;
                    for (t, w) in token.iter().zip(weight) {
                        dot += t * w;
                    }
                    acc += dot;
                }
            }
        }
    }
    acc
}

/// Times compression + sink on a fixed 7-view synthetic image across
/// retention budgets.
pub fn tps_bench(ks: &[usize], trials: usize, seed: u64) -> Result<Vec<TpsPoint>> {
    let channels = 16;
    let out_width = 64;
    let meta = ImageMeta::new(1008, 672)?;
    let encoder = SyntheticEncoder::new(seed).with_dims(336, channels);
    let params = FusionParams::<f32>::init(channels, out_width, 8, seed);
    let weight: Vec<f32> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
        (0..out_width)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect()
    };

    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let config = PipelineConfig {
            k_per_view: k,
            output_width: out_width,
            ..PipelineConfig::default()
        };
        // Warm the thread pool and caches outside the timed region.
        let warm = compress_image(meta, &encoder, &params, &config)?;
        black_box(token_sink(&warm, &weight));
        let tokens_emitted: usize = warm.iter().map(|o| o.report.tokens_out).sum();

        let mut times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let start = Instant::now();
            let outputs = compress_image(meta, &encoder, &params, &config)?;
            black_box(token_sink(black_box(&outputs), &weight));
            times.push(start.elapsed().as_secs_f64());
        }
        let median_secs = median(times);
        points.push(TpsPoint {
            k_per_view: k,
            tokens_emitted,
            median_secs,
            tps: SINK_GENERATED_TOKENS as f64 / median_secs,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub label: String,
    pub recall: f64,
    /// Variance of the per-step loss over the first training epoch, for the
    /// trained cells.
    pub first_epoch_loss_variance: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub scan: Vec<AblationCell>,
    pub experts: Vec<AblationCell>,
}

fn first_epoch_variance(loss_curve: &[f64], steps_per_epoch: usize) -> f64 {
    let first = &loss_curve[..steps_per_epoch.min(loss_curve.len())];
    let mean = first.iter().sum::<f64>() / first.len() as f64;
    first.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / first.len() as f64
}

/// Recall of the visual expert alone on the held-out split (the blend at
/// lambda = 1 is exactly the visual distribution, independent of
/// parameters).
fn visual_only_recall(spec: &ToyTaskSpec, config: &TrainConfig) -> Result<f64> {
    let mut stream = gen_toy_batch::<f64>(spec, config.train_samples + config.eval_samples)?;
    let eval = stream.split_off(config.train_samples);
    let mut total = 0.0;
    for (grid, truth) in &eval {
        let vs = visual_scores(grid.cls_attention())?;
        let placeholder = vec![0.0f64; grid.n_tokens()];
        let (indices, _) = select_top_k(&vs, &placeholder, 1, config.k)?;
        let hits = indices.iter().filter(|i| truth.contains(i)).count();
        total += hits as f64 / truth.len() as f64;
    }
    Ok(total / eval.len() as f64)
}

/// Trains and evaluates the scan-strategy and expert-strategy grid on the
/// planted-saliency task with fixed seeds.
pub fn ablation(spec: &ToyTaskSpec, config: &TrainConfig) -> Result<AblationReport> {
    let run = |label: &str, cfg: TrainConfig| -> Result<AblationCell> {
        let (_, metrics) = train_toy::<f64>(spec, &cfg)?;
        Ok(AblationCell {
            label: label.to_string(),
            recall: metrics.selection_recall,
            first_epoch_loss_variance: Some(first_epoch_variance(
                &metrics.loss_curve,
                metrics.steps_per_epoch,
            )),
        })
    };

    let single = run(
        "single",
        TrainConfig {
            scan_mode: ScanMode::Single,
            ..config.clone()
        },
    )?;
    let local_to_single = run(
        "local_to_single",
        TrainConfig {
            scan_mode: ScanMode::LocalToSingle,
            ..config.clone()
        },
    )?;

    let visual = AblationCell {
        label: "visual".to_string(),
        recall: visual_only_recall(spec, config)?,
        first_epoch_loss_variance: None,
    };
    let native = run(
        "native",
        TrainConfig {
            lambda_target: 0.0,
            ..config.clone()
        },
    )?;
    // The visual-native cell shares the local-to-single training run.
    let visual_native = AblationCell {
        label: "visual_native".to_string(),
        ..local_to_single.clone()
    };

    Ok(AblationReport {
        scan: vec![single, local_to_single],
        experts: vec![visual, native, visual_native],
    })
}
