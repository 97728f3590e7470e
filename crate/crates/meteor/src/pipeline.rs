//! End-to-end compression: partition, encode each view through a pluggable
//! encoder, fuse, score, select, project, and assemble outputs in
//! deterministic view order (global view first, then slices row-major).

use crate::fusion::{fuse_with_mode, FusionParams, ScanMode};
use crate::io::GridBundle;
use crate::selection::{score_tokens, select_top_k};
use crate::tokens::{
    partition_image, CompressedOutput, CompressionReport, ImageMeta, Rect, TokenGrid,
    DEFAULT_ENCODER_SIDE, DEFAULT_MAX_SLICES,
};
use crate::{Error, Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// ViT-style patch size assumed by the built-in encoders: a view of side `s`
/// pixels becomes an `s/14 x s/14` token grid.
pub const PATCH_SIZE: u32 = 14;

/// One encoder invocation target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// The image resized to the encoder's native input.
    Global,
    /// One sub-image tile; `index` is row-major from 0.
    Slice { index: usize, rect: Rect },
}

impl View {
    /// Stable view id: 0 for the global view, `index + 1` for slices.
    pub fn id(&self) -> usize {
        match self {
            View::Global => 0,
            View::Slice { index, .. } => index + 1,
        }
    }
}

/// Anything that can turn a view into a token grid. Implementations must be
/// deterministic for the pipeline's reproducibility contract to hold.
pub trait Encoder<F: Scalar>: Sync {
    fn encode(&self, view: &View) -> Result<TokenGrid<F>>;
    fn channels(&self) -> usize;
    fn encoder_side(&self) -> u32;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k_per_view: usize,
    pub lambda_target: f64,
    pub window: usize,
    pub scan_mode: ScanMode,
    pub max_slices: usize,
    pub encoder_side: u32,
    /// Width `D` of the projected output tokens.
    pub output_width: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_per_view: 32,
            lambda_target: 0.8,
            window: 3,
            scan_mode: ScanMode::LocalToSingle,
            max_slices: DEFAULT_MAX_SLICES,
            encoder_side: DEFAULT_ENCODER_SIDE,
            output_width: 64,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_per_view == 0 {
            return Err(Error::InvalidConfig("k_per_view must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_target) {
            return Err(Error::InvalidConfig(format!(
                "lambda_target must lie in [0, 1], got {}",
                self.lambda_target
            )));
        }
        if self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "window must be odd, got {}",
                self.window
            )));
        }
        if self.encoder_side == 0 {
            return Err(Error::InvalidConfig("encoder_side must be >= 1".into()));
        }
        if self.output_width == 0 {
            return Err(Error::InvalidConfig("output_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic pseudo-random encoder: every view becomes a seeded
/// `side/14 x side/14` grid of unit normals with a synthesized class
/// attention distribution.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    pub seed: u64,
    pub encoder_side: u32,
    pub channels: usize,
}

impl SyntheticEncoder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            encoder_side: DEFAULT_ENCODER_SIDE,
            channels: 64,
        }
    }

    pub fn with_dims(mut self, encoder_side: u32, channels: usize) -> Self {
        self.encoder_side = encoder_side;
        self.channels = channels;
        self
    }

    fn grid_side(&self) -> usize {
        ((self.encoder_side / PATCH_SIZE) as usize).max(1)
    }
}

impl<F: Scalar> Encoder<F> for SyntheticEncoder {
    fn encode(&self, view: &View) -> Result<TokenGrid<F>> {
        let side = self.grid_side();
        let n = side * side;
        let ch = self.channels;
        let view_seed = self
            .seed
            .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(view.id() as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(view_seed);

        let tokens: Vec<F> = (0..n * ch)
            .map(|_| F::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let cls_token: Vec<F> = (0..ch)
            .map(|_| F::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mass: Vec<f64> = (0..n + 1)
            .map(|_| (0.5 * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let total: f64 = mass.iter().sum();
        let attention: Vec<F> = mass.into_iter().map(|m| F::of(m / total)).collect();

        TokenGrid::new(side, side, ch, tokens, cls_token, attention)
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn encoder_side(&self) -> u32 {
        self.encoder_side
    }
}

/// Encoder backed by a pre-exported grid bundle.
pub struct FileEncoder {
    bundle: GridBundle,
}

impl FileEncoder {
    pub fn open(path: &std::path::Path) -> Result<Self> {
        Ok(Self {
            bundle: crate::io::read_bundle(path)?,
        })
    }

    pub fn from_bundle(bundle: GridBundle) -> Self {
        Self { bundle }
    }

    pub fn bundle(&self) -> &GridBundle {
        &self.bundle
    }

    pub fn image_meta(&self) -> Result<ImageMeta> {
        self.bundle.image_meta()
    }
}

impl Encoder<f32> for FileEncoder {
    fn encode(&self, view: &View) -> Result<TokenGrid<f32>> {
        let id = view.id();
        let record = self
            .bundle
            .manifest
            .views
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("bundle holds no view {id}")))?;
        if let View::Slice { rect, .. } = view {
            if record.rect != Some(*rect) {
                return Err(Error::InvalidConfig(format!(
                    "bundle view {id} was exported for rect {:?}, requested {rect:?} \
                     (partition settings differ)",
                    record.rect
                )));
            }
        }
        Ok(self.bundle.grids[id].clone())
    }

    fn channels(&self) -> usize {
        self.bundle.manifest.channels as usize
    }

    fn encoder_side(&self) -> u32 {
        self.bundle.manifest.encoder_side
    }
}

/// The view sequence for an image under a config: global first, slices
/// row-major.
pub fn plan_views(meta: ImageMeta, config: &PipelineConfig) -> Result<Vec<View>> {
    let grid = partition_image(meta, config.encoder_side, config.max_slices)?;
    let mut views = vec![View::Global];
    views.extend(
        grid.slice_rects
            .iter()
            .enumerate()
            .map(|(index, &rect)| View::Slice { index, rect }),
    );
    Ok(views)
}

/// Compresses one encoded view: fuse, score with the configured blend
/// weight, keep the top k, project to the output width.
pub fn compress_view<F: Scalar>(
    grid: &TokenGrid<F>,
    params: &FusionParams<F>,
    config: &PipelineConfig,
) -> Result<CompressedOutput<F>> {
    config.validate()?;
    let n = grid.n_tokens();
    let ch = grid.channels();
    if config.k_per_view > n {
        return Err(Error::KExceedsTokens {
            k: config.k_per_view,
            n,
        });
    }
    if params.channels != ch {
        return Err(Error::ShapeMismatch(format!(
            "params expect {} channels, grid has {ch}",
            params.channels
        )));
    }
    if params.out_width != config.output_width {
        return Err(Error::InvalidConfig(format!(
            "params project to width {}, config asks for {}",
            params.out_width, config.output_width
        )));
    }

    // Inference path: no schedule, the blend weight is the target itself.
    let lambda_eff = config.lambda_target;
    let fused = fuse_with_mode(grid, params, config.window, config.scan_mode)?;
    let scores = score_tokens(grid.cls_attention(), &fused.f_tokens, &fused.ins_out, lambda_eff)?;
    let (indices, kept) = select_top_k(&scores.as_scores, &fused.f_tokens, ch, config.k_per_view)?;

    let d = params.out_width;
    let mut selected = vec![F::zero(); indices.len() * d];
    for (i, token) in kept.chunks_exact(ch).enumerate() {
        params
            .out_proj
            .apply(token, &mut selected[i * d..(i + 1) * d]);
    }

    let report = CompressionReport {
        tokens_in: n,
        tokens_out: config.k_per_view,
        compression_ratio: 1.0 - config.k_per_view as f64 / n as f64,
        effective_lambda: lambda_eff,
    };
    CompressedOutput::new(selected, d, indices, report)
}

/// Full-image compression: global view first, then slices row-major. Views
/// are processed in parallel and assembled in view order; failures name the
/// offending view.
pub fn compress_image<F: Scalar, E: Encoder<F>>(
    meta: ImageMeta,
    encoder: &E,
    params: &FusionParams<F>,
    config: &PipelineConfig,
) -> Result<Vec<CompressedOutput<F>>> {
    config.validate()?;
    if encoder.encoder_side() != config.encoder_side {
        return Err(Error::InvalidConfig(format!(
            "encoder produces side {}, config expects {}",
            encoder.encoder_side(),
            config.encoder_side
        )));
    }
    let views = plan_views(meta, config)?;
    crate::threads::pool().install(|| {
        views
            .par_iter()
            .map(|view| {
                let run = || -> Result<CompressedOutput<F>> {
                    let grid = encoder.encode(view)?;
                    compress_view(&grid, params, config)
                };
                run().map_err(|e| Error::View {
                    view: view.id(),
                    source: Box::new(e),
                })
            })
            .collect()
    })
}

/// Encodes every view of an image (used for exporting bundles).
pub fn encode_views<F: Scalar, E: Encoder<F>>(
    meta: ImageMeta,
    encoder: &E,
    config: &PipelineConfig,
) -> Result<Vec<(View, TokenGrid<F>)>> {
    let views = plan_views(meta, config)?;
    views
        .into_iter()
        .map(|view| {
            let grid = encoder.encode(&view).map_err(|e| Error::View {
                view: view.id(),
                source: Box::new(e),
            })?;
            Ok((view, grid))
        })
        .collect()
}

/// Packages encoder outputs as a bundle (f32 storage).
pub fn export_bundle(
    meta: ImageMeta,
    encoder: &impl Encoder<f32>,
    config: &PipelineConfig,
) -> Result<GridBundle> {
    let views = encode_views::<f32, _>(meta, encoder, config)?;
    let first = &views[0].1;
    let manifest = crate::io::BundleManifest {
        image_width: meta.width,
        image_height: meta.height,
        encoder_side: config.encoder_side,
        channels: first.channels() as u32,
        grid_h: first.h_u() as u32,
        grid_w: first.w_u() as u32,
        views: views
            .iter()
            .map(|(view, _)| crate::io::BundleViewRecord {
                view_id: view.id() as u32,
                rect: match view {
                    View::Global => None,
                    View::Slice { rect, .. } => Some(*rect),
                },
                encoder_side: config.encoder_side,
            })
            .collect(),
    };
    Ok(GridBundle {
        manifest,
        grids: views.into_iter().map(|(_, g)| g).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::token_budget;

    fn test_config(k: usize, channels: usize) -> (PipelineConfig, FusionParams<f32>) {
        let config = PipelineConfig {
            k_per_view: k,
            output_width: 16,
            ..PipelineConfig::default()
        };
        let params = FusionParams::<f32>::init(channels, 16, 4, 5);
        (config, params)
    }

    #[test]
    fn default_view_hits_paper_compression_ratio() {
        let encoder = SyntheticEncoder::new(7).with_dims(336, 16);
        let grid: TokenGrid<f32> = encoder.encode(&View::Global).unwrap();
        assert_eq!(grid.n_tokens(), 576);

        let (config, params) = test_config(32, 16);
        let out = compress_view(&grid, &params, &config).unwrap();
        assert_eq!(out.report.tokens_in, 576);
        assert_eq!(out.report.tokens_out, 32);
        assert!((out.report.compression_ratio - 0.944444).abs() < 1e-4);
        assert_eq!(out.indices.len(), 32);
        assert_eq!(out.selected.len(), 32 * 16);

        let (config, params) = test_config(144, 16);
        let out = compress_view(&grid, &params, &config).unwrap();
        assert!((out.report.compression_ratio - 0.75).abs() < 1e-12);

        let (config, params) = test_config(576, 16);
        let out = compress_view(&grid, &params, &config).unwrap();
        assert_eq!(out.report.compression_ratio, 0.0);
        let all: Vec<usize> = (1..=576).collect();
        assert_eq!(out.indices, all);
    }

    #[test]
    fn image_budget_identity() {
        let encoder = SyntheticEncoder::new(3).with_dims(336, 16);
        let (config, params) = test_config(32, 16);

        let meta = ImageMeta::new(672, 1008).unwrap();
        let outs = compress_image(meta, &encoder, &params, &config).unwrap();
        assert_eq!(outs.len(), 7);
        let total: usize = outs.iter().map(|o| o.report.tokens_out).sum();
        assert_eq!(total, token_budget(6, 32));
        assert_eq!(total, 224);

        let meta = ImageMeta::new(300, 300).unwrap();
        let outs = compress_image(meta, &encoder, &params, &config).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].report.tokens_out, 32);
    }

    #[test]
    fn synthetic_pipeline_is_bitwise_deterministic() {
        let (config, params) = test_config(32, 16);
        let meta = ImageMeta::new(672, 1008).unwrap();
        let encoder = SyntheticEncoder::new(11).with_dims(336, 16);
        let a = compress_image(meta, &encoder, &params, &config).unwrap();
        let b = compress_image(meta, &encoder, &params, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn views_are_independent() {
        let (config, params) = test_config(8, 6);
        let encoder = SyntheticEncoder::new(23).with_dims(336, 6);
        let meta = ImageMeta::new(672, 672).unwrap();
        let mut bundle = export_bundle(meta, &encoder, &config).unwrap();
        let base = compress_image(meta, &FileEncoder::from_bundle(bundle.clone()), &params, &config)
            .unwrap();

        // Rewrite slice 2's tokens entirely; every other view must be
        // untouched bit for bit.
        let gh = bundle.manifest.grid_h as usize;
        let gw = bundle.manifest.grid_w as usize;
        let ch = bundle.manifest.channels as usize;
        let edited = TokenGrid::new(
            gh,
            gw,
            ch,
            vec![0.25f32; gh * gw * ch],
            bundle.grids[2].cls_token().to_vec(),
            bundle.grids[2].cls_attention().to_vec(),
        )
        .unwrap();
        bundle.grids[2] = edited;
        let after = compress_image(meta, &FileEncoder::from_bundle(bundle), &params, &config)
            .unwrap();

        for (i, (a, b)) in base.iter().zip(&after).enumerate() {
            if i == 2 {
                assert_ne!(a, b, "edited view did not change");
            } else {
                assert_eq!(a, b, "view {i} changed by an edit to view 2");
            }
        }
    }

    #[test]
    fn k_exceeding_view_tokens_is_rejected() {
        let encoder = SyntheticEncoder::new(7).with_dims(336, 16);
        let grid: TokenGrid<f32> = encoder.encode(&View::Global).unwrap();
        let (config, params) = test_config(700, 16);
        assert!(matches!(
            compress_view(&grid, &params, &config),
            Err(Error::KExceedsTokens { k: 700, n: 576 })
        ));
    }

    #[test]
    fn degenerate_attention_surfaces_as_view_error() {
        let (config, params) = test_config(2, 4);
        let encoder = SyntheticEncoder::new(5).with_dims(336, 4);
        let meta = ImageMeta::new(300, 300).unwrap();
        let mut bundle = export_bundle(meta, &encoder, &config).unwrap();
        let n = bundle.grids[0].n_tokens();
        // All attention mass on the class token: valid grid, useless expert.
        let mut attn = vec![0.0f32; n + 1];
        attn[0] = 1.0;
        bundle.grids[0] = TokenGrid::new(
            bundle.manifest.grid_h as usize,
            bundle.manifest.grid_w as usize,
            4,
            bundle.grids[0].tokens().to_vec(),
            bundle.grids[0].cls_token().to_vec(),
            attn,
        )
        .unwrap();
        let err = compress_image(meta, &FileEncoder::from_bundle(bundle), &params, &config)
            .unwrap_err();
        match err {
            Error::View { view, source } => {
                assert_eq!(view, 0);
                assert!(matches!(*source, Error::DegenerateAttention));
            }
            other => panic!("expected view error, got {other}"),
        }
    }

    #[test]
    fn file_encoder_round_trips_through_disk() {
        let (config, _) = test_config(8, 6);
        let encoder = SyntheticEncoder::new(29).with_dims(336, 6);
        let meta = ImageMeta::new(500, 400).unwrap();
        let bundle = export_bundle(meta, &encoder, &config).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grids.mgrb");
        crate::io::write_bundle(&path, &bundle).unwrap();
        let loaded = FileEncoder::open(&path).unwrap();
        assert_eq!(loaded.bundle(), &bundle);
        assert_eq!(loaded.image_meta().unwrap(), meta);

        // Served grids match the synthetic originals bit for bit.
        for view in plan_views(meta, &config).unwrap() {
            let direct: TokenGrid<f32> = encoder.encode(&view).unwrap();
            let from_file = loaded.encode(&view).unwrap();
            assert_eq!(direct, from_file);
        }
    }
}
