//! Black-box model access.
//!
//! A [`Model`] maps a pair of modality inputs to pre-softmax logits over a
//! fixed number of classes. Two implementations ship with the crate: the
//! in-process [`Mlp`] used for the synthetic task and [`ExternalModel`],
//! which talks to any process speaking the line-delimited JSON protocol in
//! [`wire`].

mod external;
mod mlp;
pub mod stub;
mod train;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use external::{ExternalModel, SessionOptions};
pub use mlp::{mlp_forward, Mlp, MlpLayer, SYNTHETIC_LAYOUT};
pub use train::{accuracy, loss_and_gradient, mean_loss, mlp_train, EpochStats, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("pair {index}: {message}")]
    Shape { index: usize, message: String },
    #[error("failed to start model process: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("model process sent no handshake within {0:?}")]
    HandshakeTimeout(std::time::Duration),
    #[error("bad handshake: {0}")]
    Handshake(String),
    #[error("batch {batch}: schema mismatch: {message}")]
    SchemaMismatch { batch: u64, message: String },
    #[error("batch {batch}: protocol error: {message}")]
    Protocol { batch: u64, message: String },
    #[error("batch {batch}: model process exited")]
    Crashed { batch: u64 },
    #[error("batch {batch}: no response within {timeout:?}")]
    Timeout {
        batch: u64,
        timeout: std::time::Duration,
    },
    #[error("model session is dead after an earlier failure")]
    SessionDead,
    #[error("model I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Dense,
    Tokens,
    Grid,
}

impl std::fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModalityKind::Dense => "dense",
            ModalityKind::Tokens => "tokens",
            ModalityKind::Grid => "grid",
        })
    }
}

/// Row-major raster of pixel intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<f64>,
}

impl Raster {
    pub fn new(rows: usize, cols: usize, cells: Vec<f64>) -> Result<Self, String> {
        if rows == 0 || cols == 0 {
            return Err("raster must have at least one row and column".into());
        }
        if cells.len() != rows * cols {
            return Err(format!(
                "raster {rows}x{cols} needs {} cells, got {}",
                rows * cols,
                cells.len()
            ));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.cells[r * self.cols + c]
    }
}

/// One modality's input. Serializes to the wire encoding: a number array,
/// a string array, or a `{rows, cols, cells}` object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModalityValue {
    Dense(Vec<f64>),
    Tokens(Vec<String>),
    Grid(Raster),
}

impl ModalityValue {
    /// Whitespace-tokenized text.
    pub fn from_text(text: &str) -> Self {
        ModalityValue::Tokens(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn kind(&self) -> ModalityKind {
        match self {
            ModalityValue::Dense(_) => ModalityKind::Dense,
            ModalityValue::Tokens(_) => ModalityKind::Tokens,
            ModalityValue::Grid(_) => ModalityKind::Grid,
        }
    }

    /// Number of atomic elements: dimensions, tokens or pixels.
    pub fn len(&self) -> usize {
        match self {
            ModalityValue::Dense(v) => v.len(),
            ModalityValue::Tokens(t) => t.len(),
            ModalityValue::Grid(r) => r.cells.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_dense(&self) -> Option<&[f64]> {
        match self {
            ModalityValue::Dense(v) => Some(v),
            _ => None,
        }
    }
}

/// Pre-softmax class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(pub Vec<f64>);

impl LogitVector {
    pub fn zeros(classes: usize) -> Self {
        LogitVector(vec![0.0; classes])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Index of the largest logit (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

pub type Pair<'a> = (&'a ModalityValue, &'a ModalityValue);

/// A two-modality classifier returning pre-softmax logits.
///
/// Implementations must be deterministic: equal inputs give bit-identical
/// logits regardless of batch composition.
pub trait Model: Send + Sync {
    fn classes(&self) -> usize;

    fn evaluate_batch(&self, pairs: &[Pair<'_>]) -> Result<Vec<LogitVector>, GatewayError>;

    fn evaluate(&self, x1: &ModalityValue, x2: &ModalityValue) -> Result<LogitVector, GatewayError> {
        let mut out = self.evaluate_batch(&[(x1, x2)])?;
        Ok(out.pop().expect("one pair in, one logit vector out"))
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn classes(&self) -> usize {
        (**self).classes()
    }

    fn evaluate_batch(&self, pairs: &[Pair<'_>]) -> Result<Vec<LogitVector>, GatewayError> {
        (**self).evaluate_batch(pairs)
    }
}

impl<M: Model + ?Sized> Model for Box<M> {
    fn classes(&self) -> usize {
        (**self).classes()
    }

    fn evaluate_batch(&self, pairs: &[Pair<'_>]) -> Result<Vec<LogitVector>, GatewayError> {
        (**self).evaluate_batch(pairs)
    }
}

/// Wraps a model and counts every pair it evaluates.
pub struct CountingModel<M> {
    inner: M,
    evaluations: AtomicU64,
}

impl<M: Model> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            evaluations: AtomicU64::new(0),
        }
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.evaluations.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: Model> Model for CountingModel<M> {
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn evaluate_batch(&self, pairs: &[Pair<'_>]) -> Result<Vec<LogitVector>, GatewayError> {
        self.evaluations
            .fetch_add(pairs.len() as u64, Ordering::SeqCst);
        self.inner.evaluate_batch(pairs)
    }
}

/// Model defined by a closure over one pair; handy for toy and test models.
pub struct FnModel<F> {
    classes: usize,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&ModalityValue, &ModalityValue) -> Vec<f64> + Send + Sync,
{
    pub fn new(classes: usize, f: F) -> Self {
        Self { classes, f }
    }
}

impl<F> Model for FnModel<F>
where
    F: Fn(&ModalityValue, &ModalityValue) -> Vec<f64> + Send + Sync,
{
    fn classes(&self) -> usize {
        self.classes
    }

    fn evaluate_batch(&self, pairs: &[Pair<'_>]) -> Result<Vec<LogitVector>, GatewayError> {
        pairs
            .iter()
            .enumerate()
            .map(|(index, (a, b))| {
                let v = (self.f)(a, b);
                if v.len() != self.classes {
                    return Err(GatewayError::Shape {
                        index,
                        message: format!("expected {} logits, got {}", self.classes, v.len()),
                    });
                }
                Ok(LogitVector(v))
            })
            .collect()
    }
}
