//! LIME-style local linear surrogates over one modality.
//!
//! An input is split into interpretable features, random binary masks switch
//! features off, and a kernel-weighted ridge model maps masks to a target
//! logit. Masked dense dimensions and grid cells are set to zero and masked
//! tokens are dropped, so perturbations never depend on a background dataset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disentangle::Side;
use crate::gateway::{GatewayError, ModalityKind, ModalityValue, Raster};
use crate::numerics::{weighted_ridge, Matrix, NumericsError, Rng};

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("cannot explain an empty {0} input")]
    EmptyInput(ModalityKind),
    #[error("grid segmentation requested for a {0} input")]
    GridOnNonRaster(ModalityKind),
    #[error("grid {grid_rows}x{grid_cols} does not fit a {rows}x{cols} raster")]
    BadGrid {
        grid_rows: usize,
        grid_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("input does not match its feature space: {0}")]
    FeatureMismatch(String),
    #[error("invalid surrogate config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Uniform partition of a raster into `rows × cols` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

/// One interpretable unit of an input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Feature {
    Dimension {
        index: usize,
    },
    Token {
        position: usize,
        text: String,
    },
    /// Pixels `row_start..row_end × col_start..col_end` of a raster.
    Cell {
        grid_row: usize,
        grid_col: usize,
        row_start: usize,
        row_end: usize,
        col_start: usize,
        col_end: usize,
    },
}

impl std::fmt::Display for Feature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Feature::Dimension { index } => write!(f, "dim {index}"),
            Feature::Token { position, text } => write!(f, "{text:?}@{position}"),
            Feature::Cell { grid_row, grid_col, .. } => write!(f, "cell ({grid_row},{grid_col})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub kind: ModalityKind,
    pub features: Vec<Feature>,
}

impl FeatureSpace {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Bounds of part `i` of `n` equal parts of `0..len`.
fn partition(len: usize, n: usize, i: usize) -> (usize, usize) {
    (i * len / n, (i + 1) * len / n)
}

/// Splits `v` into features. Rasters default to one feature per pixel when
/// no grid is given.
pub fn segment(v: &ModalityValue, grid: Option<GridSpec>) -> Result<FeatureSpace, SurrogateError> {
    let kind = v.kind();
    if grid.is_some() && kind != ModalityKind::Grid {
        return Err(SurrogateError::GridOnNonRaster(kind));
    }
    if v.is_empty() {
        return Err(SurrogateError::EmptyInput(kind));
    }
    let features = match v {
        ModalityValue::Dense(x) => (0..x.len()).map(|index| Feature::Dimension { index }).collect(),
        ModalityValue::Tokens(t) => t
            .iter()
            .enumerate()
            .map(|(position, text)| Feature::Token {
                position,
                text: text.clone(),
            })
            .collect(),
        ModalityValue::Grid(r) => {
            let g = grid.unwrap_or(GridSpec { rows: r.rows, cols: r.cols });
            if g.rows == 0 || g.cols == 0 || g.rows > r.rows || g.cols > r.cols {
                return Err(SurrogateError::BadGrid {
                    grid_rows: g.rows,
                    grid_cols: g.cols,
                    rows: r.rows,
                    cols: r.cols,
                });
            }
            let mut cells = Vec::with_capacity(g.rows * g.cols);
            for grid_row in 0..g.rows {
                let (row_start, row_end) = partition(r.rows, g.rows, grid_row);
                for grid_col in 0..g.cols {
                    let (col_start, col_end) = partition(r.cols, g.cols, grid_col);
                    cells.push(Feature::Cell {
                        grid_row,
                        grid_col,
                        row_start,
                        row_end,
                        col_start,
                        col_end,
                    });
                }
            }
            cells
        }
    };
    Ok(FeatureSpace { kind, features })
}

/// `v` with every feature whose mask bit is false switched off.
pub fn apply_mask(v: &ModalityValue, fs: &FeatureSpace, mask: &[bool]) -> Result<ModalityValue, SurrogateError> {
    if mask.len() != fs.len() {
        return Err(SurrogateError::FeatureMismatch(format!(
            "mask has {} bits for {} features",
            mask.len(),
            fs.len()
        )));
    }
    if v.kind() != fs.kind {
        return Err(SurrogateError::FeatureMismatch(format!(
            "{} input for a {} feature space",
            v.kind(),
            fs.kind
        )));
    }
    let out = match v {
        ModalityValue::Dense(x) => {
            let mut x = x.clone();
            for (feature, &keep) in fs.features.iter().zip(mask) {
                if let (Feature::Dimension { index }, false) = (feature, keep) {
                    *x.get_mut(*index)
                        .ok_or_else(|| SurrogateError::FeatureMismatch(format!("no dimension {index}")))? = 0.0;
                }
            }
            ModalityValue::Dense(x)
        }
        ModalityValue::Tokens(t) => {
            let mut drop = vec![false; t.len()];
            for (feature, &keep) in fs.features.iter().zip(mask) {
                if let (Feature::Token { position, .. }, false) = (feature, keep) {
                    *drop
                        .get_mut(*position)
                        .ok_or_else(|| SurrogateError::FeatureMismatch(format!("no token {position}")))? = true;
                }
            }
            ModalityValue::Tokens(
                t.iter()
                    .zip(&drop)
                    .filter(|(_, d)| !**d)
                    .map(|(w, _)| w.clone())
                    .collect(),
            )
        }
        ModalityValue::Grid(r) => {
            let mut cells = r.cells.clone();
            for (feature, &keep) in fs.features.iter().zip(mask) {
                if let (
                    Feature::Cell {
                        row_start,
                        row_end,
                        col_start,
                        col_end,
                        ..
                    },
                    false,
                ) = (feature, keep)
                {
                    if *row_end > r.rows || *col_end > r.cols {
                        return Err(SurrogateError::FeatureMismatch("cell outside raster".into()));
                    }
                    for row in *row_start..*row_end {
                        cells[row * r.cols + col_start..row * r.cols + col_end]
                            .iter_mut()
                            .for_each(|c| *c = 0.0);
                    }
                }
            }
            ModalityValue::Grid(Raster {
                rows: r.rows,
                cols: r.cols,
                cells,
            })
        }
    };
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    /// Perturbations per explanation, including the unperturbed point.
    pub samples: usize,
    pub keep_prob: f64,
    pub kernel_width: f64,
    pub lambda: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            keep_prob: 0.5,
            kernel_width: 0.25,
            lambda: 1e-3,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: String| Err(SurrogateError::InvalidConfig(m));
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep_prob must be in (0, 1], got {}", self.keep_prob));
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return bad(format!("kernel_width must be positive, got {}", self.kernel_width));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Random masks of one input with their realized values and kernel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBatch {
    /// Row 0 is the all-ones mask.
    pub masks: Vec<Vec<bool>>,
    pub realized: Vec<ModalityValue>,
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl PerturbationBatch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn features(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }
}

/// `exp(−(d/F)² / width²)` for Hamming distance `d` from the all-ones mask.
pub fn kernel_weight(mask: &[bool], width: f64) -> f64 {
    let off = mask.iter().filter(|b| !**b).count() as f64;
    let d = off / mask.len() as f64;
    (-(d * d) / (width * width)).exp()
}

pub fn perturb(
    v: &ModalityValue,
    fs: &FeatureSpace,
    config: &SurrogateConfig,
    seed: u64,
) -> Result<PerturbationBatch, SurrogateError> {
    config.validate()?;
    let f = fs.len();
    if config.samples < f + 2 {
        return Err(SurrogateError::InvalidConfig(format!(
            "need at least {} samples for {f} features, got {}",
            f + 2,
            config.samples
        )));
    }
    let mut rng = Rng::new(seed);
    let mut masks = Vec::with_capacity(config.samples);
    masks.push(vec![true; f]);
    while masks.len() < config.samples {
        let mask: Vec<bool> = (0..f).map(|_| rng.bernoulli(config.keep_prob)).collect();
        // The unperturbed point appears once; redraw duplicates of it unless
        // nothing else can be drawn.
        if config.keep_prob < 1.0 && mask.iter().all(|b| *b) {
            continue;
        }
        masks.push(mask);
    }
    let realized = masks
        .iter()
        .map(|m| apply_mask(v, fs, m))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = masks.iter().map(|m| kernel_weight(m, config.kernel_width)).collect();
    Ok(PerturbationBatch {
        masks,
        realized,
        weights,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Kernel-weighted coefficient of determination.
    pub r2: f64,
    /// Regularization actually used (raised once if the first solve failed).
    pub lambda: f64,
}

fn weighted_r2(batch: &PerturbationBatch, targets: &[f64], predict: impl Fn(usize) -> f64) -> f64 {
    let total: f64 = batch.weights.iter().sum();
    let mean: f64 = batch.weights.iter().zip(targets).map(|(w, t)| w * t).sum::<f64>() / total;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (s, (w, t)) in batch.weights.iter().zip(targets).enumerate() {
        ss_res += w * (t - predict(s)).powi(2);
        ss_tot += w * (t - mean).powi(2);
    }
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    }
}

/// Kernel-weighted ridge fit of `targets` on the batch's masks.
pub fn fit(batch: &PerturbationBatch, targets: &[f64], lambda: f64) -> Result<LinearFit, SurrogateError> {
    if targets.len() != batch.len() {
        return Err(NumericsError::LengthMismatch {
            left: batch.len(),
            right: targets.len(),
        }
        .into());
    }
    let f = batch.features();
    if batch.masks.iter().all(|m| *m == batch.masks[0]) {
        log::warn!("all {} perturbation masks are identical; explanation weights are zero", batch.len());
        let total: f64 = batch.weights.iter().sum();
        let intercept = batch.weights.iter().zip(targets).map(|(w, t)| w * t).sum::<f64>() / total;
        let r2 = weighted_r2(batch, targets, |_| intercept);
        return Ok(LinearFit {
            weights: vec![0.0; f],
            intercept,
            r2,
            lambda,
        });
    }
    let mut design = Matrix::zeros(batch.len(), f);
    for (s, mask) in batch.masks.iter().enumerate() {
        for (j, &bit) in mask.iter().enumerate() {
            design.set(s, j, if bit { 1.0 } else { 0.0 });
        }
    }
    let (ridge, used) = match weighted_ridge(&design, targets, &batch.weights, lambda) {
        Ok(r) => (r, lambda),
        Err(NumericsError::Singular { .. }) => {
            let raised = (lambda * 1e3).max(1e-6);
            log::warn!("singular surrogate fit at lambda = {lambda}; retrying with {raised}");
            (weighted_ridge(&design, targets, &batch.weights, raised)?, raised)
        }
        Err(e) => return Err(e.into()),
    };
    let r2 = weighted_r2(batch, targets, |s| ridge.predict(design.row(s)));
    Ok(LinearFit {
        weights: ridge.coefficients,
        intercept: ridge.intercept,
        r2,
        lambda: used,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ExplanationKind {
    Uc,
    Mi,
    Full,
}

impl std::fmt::Display for ExplanationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExplanationKind::Uc => "UC",
            ExplanationKind::Mi => "MI",
            ExplanationKind::Full => "LIME",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Seed of the perturbation batch.
    pub seed: u64,
    /// Size of the sample set behind the decomposition, if any.
    pub n_samples: Option<usize>,
    pub lime_samples: usize,
    pub keep_prob: f64,
    pub kernel_width: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub kind: ExplanationKind,
    pub modality: Side,
    pub class: usize,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
    pub provenance: Provenance,
}

impl Explanation {
    pub fn from_fit(
        kind: ExplanationKind,
        modality: Side,
        class: usize,
        fit: LinearFit,
        batch: &PerturbationBatch,
        config: &SurrogateConfig,
        n_samples: Option<usize>,
    ) -> Self {
        Self {
            kind,
            modality,
            class,
            weights: fit.weights,
            intercept: fit.intercept,
            r2: fit.r2,
            provenance: Provenance {
                seed: batch.seed,
                n_samples,
                lime_samples: batch.len(),
                keep_prob: config.keep_prob,
                kernel_width: config.kernel_width,
                lambda: fit.lambda,
            },
        }
    }

    /// Feature indices sorted by decreasing absolute weight.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.weights.len()).collect();
        idx.sort_by(|&a, &b| self.weights[b].abs().total_cmp(&self.weights[a].abs()).then(a.cmp(&b)));
        idx
    }
}

/// Plain LIME on one modality: perturb `v`, score each perturbation with
/// `target`, fit.
pub fn explain_modality<F>(
    mut target: F,
    v: &ModalityValue,
    fs: &FeatureSpace,
    config: &SurrogateConfig,
    seed: u64,
    modality: Side,
    class: usize,
) -> Result<Explanation, SurrogateError>
where
    F: FnMut(&ModalityValue) -> Result<f64, SurrogateError>,
{
    let batch = perturb(v, fs, config, seed)?;
    let targets = batch
        .realized
        .iter()
        .map(&mut target)
        .collect::<Result<Vec<_>, _>>()?;
    let lin = fit(&batch, &targets, config.lambda)?;
    Ok(Explanation::from_fit(
        ExplanationKind::Full,
        modality,
        class,
        lin,
        &batch,
        config,
        None,
    ))
}
