//! Visual token compression built from two stages: a global fusion pass that
//! enriches every token with holistic context through a bidirectional
//! selective state-space scan (with a learnable instruction token spliced into
//! the sequence), and a dual-expert selection pass that scores tokens by
//! encoder class-token attention and by instruction relevance, then keeps the
//! top-k per view.
//!
//! The crate is encoder-agnostic: anything that can produce a token grid with
//! a class-attention vector plugs in through [`pipeline::Encoder`]. A
//! synthetic encoder and a file-backed encoder are built in.
//!
//! Start with the runnable examples (`cargo run --release --example
//! compress_synthetic`) or the `meteor` binary (`meteor compress --help`).

pub mod bench;
pub mod cli;
pub mod fusion;
pub mod io;
pub mod pipeline;
pub mod selection;
pub mod ssm;
pub mod tokens;
pub mod train;

mod threads;

pub use threads::max_threads;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for all numeric paths.
///
/// `f32` is the production storage type; `f64` is the wide mode used by the
/// oracle and gradient tests.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn to64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate attention: non-class attention mass is zero")]
    DegenerateAttention,

    #[error("k exceeds tokens per view: k={k}, tokens={n}")]
    KExceedsTokens { k: usize, n: usize },

    #[error("view {view}: {source}")]
    View {
        view: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
