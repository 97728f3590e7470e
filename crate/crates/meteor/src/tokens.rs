//! Token grid data model, high-resolution slice partitioning, and token
//! budget arithmetic.
//!
//! Token indices are 1-based raster indices throughout: token `i` lives at
//! `(row, col)` with `i = 1 + row*w_u + col`.

use crate::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

pub const DEFAULT_ENCODER_SIDE: u32 = 336;
pub const DEFAULT_MAX_SLICES: usize = 6;

/// Tolerance for the class-attention normalization invariant.
pub const ATTENTION_SUM_TOL: f64 = 1e-5;

/// Score ties closer than this are resolved by the fewer-slices rule.
const DEVIATION_TIE_EPS: f64 = 1e-9;

/// Pixel dimensions of an input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub width: u32,
    pub height: u32,
}

impl ImageMeta {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "zero-sized image: {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }
}

/// Pixel rectangle of one sub-image, in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }
}

/// Slicing decision for one image: a `rows x cols` grid of pixel rectangles
/// tiling the image exactly, plus the always-present resized global view.
///
/// `rows == cols == 0` means the image fits the encoder natively and only the
/// global view is used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major slice rectangles; empty when unsliced.
    pub slice_rects: Vec<Rect>,
}

impl SliceGrid {
    pub fn n_slices(&self) -> usize {
        self.rows * self.cols
    }

    /// The resized global view always accompanies the slices.
    pub fn includes_global(&self) -> bool {
        true
    }
}

/// Picks the slice grid for an image: searches all `rows x cols` layouts with
/// `rows*cols <= max_slices` and keeps the one minimizing
///
/// ```text
/// |ln((width/cols)/(height/rows))| + |ln(width*height / (rows*cols*side^2))|
/// ```
///
/// (slice aspect deviation from the square encoder plus slice area deviation
/// from the encoder's native area). Ties go to fewer slices, then fewer rows.
/// Images that fit the encoder natively are not sliced at all.
pub fn partition_image(meta: ImageMeta, encoder_side: u32, max_slices: usize) -> Result<SliceGrid> {
    if meta.width == 0 || meta.height == 0 {
        return Err(Error::InvalidImage(format!(
            "zero-sized image: {}x{}",
            meta.width, meta.height
        )));
    }
    if encoder_side == 0 {
        return Err(Error::InvalidConfig("encoder_side must be >= 1".into()));
    }

    if max_slices == 0 || (meta.width <= encoder_side && meta.height <= encoder_side) {
        return Ok(SliceGrid {
            rows: 0,
            cols: 0,
            slice_rects: Vec::new(),
        });
    }

    let mut best: Option<(f64, usize, usize)> = None;
    for rows in 1..=max_slices {
        for cols in 1..=max_slices {
            if rows * cols > max_slices {
                continue;
            }
            let score = grid_deviation(meta, encoder_side, rows, cols);
            let replace = match best {
                None => true,
                Some((best_score, best_rows, best_cols)) => {
                    if score < best_score - DEVIATION_TIE_EPS {
                        true
                    } else if (score - best_score).abs() <= DEVIATION_TIE_EPS {
                        let (n, best_n) = (rows * cols, best_rows * best_cols);
                        n < best_n || (n == best_n && rows < best_rows)
                    } else {
                        false
                    }
                }
            };
            if replace {
                best = Some((score, rows, cols));
            }
        }
    }

    let (_, rows, cols) = best.expect("max_slices >= 1 guarantees a candidate");
    Ok(SliceGrid {
        rows,
        cols,
        slice_rects: slice_rects(meta, rows, cols),
    })
}

/// Deviation score of one candidate grid; lower is better.
fn grid_deviation(meta: ImageMeta, encoder_side: u32, rows: usize, cols: usize) -> f64 {
    let w = f64::from(meta.width);
    let h = f64::from(meta.height);
    let side = f64::from(encoder_side);
    let (r, c) = (rows as f64, cols as f64);
    // Encoder aspect is 1 (square), so ln(encoder_aspect) = 0.
    let aspect_dev = ((w / c) / (h / r)).ln().abs();
    let area_dev = ((w * h) / (r * c * side * side)).ln().abs();
    aspect_dev + area_dev
}

/// Exact tiling with remainder pixels handed out one per slice from the
/// left/top.
fn slice_rects(meta: ImageMeta, rows: usize, cols: usize) -> Vec<Rect> {
    let spans = |total: u32, parts: usize| -> Vec<(u32, u32)> {
        let base = total / parts as u32;
        let rem = (total % parts as u32) as usize;
        let mut offset = 0;
        (0..parts)
            .map(|i| {
                let len = base + u32::from(i < rem);
                let span = (offset, len);
                offset += len;
                span
            })
            .collect()
    };
    let col_spans = spans(meta.width, cols);
    let row_spans = spans(meta.height, rows);

    let mut rects = Vec::with_capacity(rows * cols);
    for &(y, h) in &row_spans {
        for &(x, w) in &col_spans {
            rects.push(Rect { x, y, w, h });
        }
    }
    rects
}

/// Total tokens handed to the downstream model: `k_per_view` for the global
/// view plus `k_per_view` per slice.
pub fn token_budget(n_slices: usize, k_per_view: usize) -> usize {
    assert!(k_per_view >= 1, "k_per_view must be >= 1");
    k_per_view * (n_slices + 1)
}

/// 1-based raster index of the token at `(row, col)` in a grid `w_u` wide.
pub fn raster_index(row: usize, col: usize, w_u: usize) -> Result<usize> {
    if w_u == 0 || col >= w_u {
        return Err(Error::InvalidConfig(format!(
            "raster coordinates out of range: col={col}, w_u={w_u}"
        )));
    }
    Ok(1 + row * w_u + col)
}

/// One encoded view: `h_u * w_u` visual tokens of width `channels` in
/// row-major raster order, the encoder's class token, and the class token's
/// attention distribution (entry 0 is the class token's self-attention,
/// entries `1..=n` align with raster order).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<F> {
    h_u: usize,
    w_u: usize,
    channels: usize,
    tokens: Vec<F>,
    cls_token: Vec<F>,
    cls_attention: Vec<F>,
}

impl<F: Scalar> TokenGrid<F> {
    pub fn new(
        h_u: usize,
        w_u: usize,
        channels: usize,
        tokens: Vec<F>,
        cls_token: Vec<F>,
        cls_attention: Vec<F>,
    ) -> Result<Self> {
        if h_u == 0 || w_u == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "empty grid: h_u={h_u}, w_u={w_u}, channels={channels}"
            )));
        }
        let n = h_u * w_u;
        if tokens.len() != n * channels {
            return Err(Error::ShapeMismatch(format!(
                "tokens length {} != {n}x{channels}",
                tokens.len()
            )));
        }
        if cls_token.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "cls_token length {} != channels {channels}",
                cls_token.len()
            )));
        }
        if cls_attention.len() != 1 + n {
            return Err(Error::ShapeMismatch(format!(
                "cls_attention length {} != 1 + {n}",
                cls_attention.len()
            )));
        }
        if tokens.iter().chain(&cls_token).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token grid".into()));
        }
        let mut sum = 0.0;
        for &a in &cls_attention {
            if !a.is_finite() || a < F::zero() {
                return Err(Error::InvalidImage(
                    "cls_attention entries must be finite and nonnegative".into(),
                ));
            }
            sum += a.to64();
        }
        if (sum - 1.0).abs() > ATTENTION_SUM_TOL {
            return Err(Error::InvalidImage(format!(
                "cls_attention sums to {sum}, expected 1 +/- {ATTENTION_SUM_TOL}"
            )));
        }
        Ok(Self {
            h_u,
            w_u,
            channels,
            tokens,
            cls_token,
            cls_attention,
        })
    }

    pub fn h_u(&self) -> usize {
        self.h_u
    }

    pub fn w_u(&self) -> usize {
        self.w_u
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_tokens(&self) -> usize {
        self.h_u * self.w_u
    }

    /// Flat `[n_tokens * channels]` row-major token matrix.
    pub fn tokens(&self) -> &[F] {
        &self.tokens
    }

    /// Token at 0-based raster position `idx`.
    pub fn token(&self, idx: usize) -> &[F] {
        &self.tokens[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn cls_token(&self) -> &[F] {
        &self.cls_token
    }

    pub fn cls_attention(&self) -> &[F] {
        &self.cls_attention
    }

    /// 1-based raster index with full bounds checking.
    pub fn raster_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.h_u {
            return Err(Error::InvalidConfig(format!(
                "raster coordinates out of range: row={row}, h_u={}",
                self.h_u
            )));
        }
        raster_index(row, col, self.w_u)
    }
}

/// Per-view compression summary attached to every [`CompressedOutput`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub compression_ratio: f64,
    pub effective_lambda: f64,
}

/// The retained tokens of one view after output projection, with their
/// 1-based source raster indices in ascending (spatial) order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedOutput<F> {
    /// Flat `[k * width]` projected token matrix, ascending index order.
    pub selected: Vec<F>,
    /// Output width `D`.
    pub width: usize,
    /// Strictly ascending 1-based raster indices of the retained tokens.
    pub indices: Vec<usize>,
    pub report: CompressionReport,
}

impl<F: Scalar> CompressedOutput<F> {
    pub fn new(
        selected: Vec<F>,
        width: usize,
        indices: Vec<usize>,
        report: CompressionReport,
    ) -> Result<Self> {
        let k = indices.len();
        if selected.len() != k * width {
            return Err(Error::ShapeMismatch(format!(
                "selected length {} != {k}x{width}",
                selected.len()
            )));
        }
        if !indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::ShapeMismatch(
                "indices must be strictly ascending".into(),
            ));
        }
        if indices.first().is_some_and(|&i| i < 1)
            || indices.last().is_some_and(|&i| i > report.tokens_in)
        {
            return Err(Error::ShapeMismatch(format!(
                "indices must lie in [1, {}]",
                report.tokens_in
            )));
        }
        if report.tokens_out != k {
            return Err(Error::ShapeMismatch(format!(
                "report.tokens_out {} != k {k}",
                report.tokens_out
            )));
        }
        let ratio = 1.0 - report.tokens_out as f64 / report.tokens_in as f64;
        if (report.compression_ratio - ratio).abs() > 1e-12 || !(0.0..1.0).contains(&ratio) {
            return Err(Error::ShapeMismatch(format!(
                "compression_ratio {} inconsistent with {}/{}",
                report.compression_ratio, report.tokens_out, report.tokens_in
            )));
        }
        Ok(Self {
            selected,
            width,
            indices,
            report,
        })
    }
}
