//! The four disentangled explanations per point, plus plain LIME baselines.
//!
//! For each modality one perturbation batch is drawn. Every perturbed input
//! is pushed through the cached logit table, which yields full, unimodal and
//! interaction logits at once; three surrogates are then fit on the same
//! masks and kernel weights, so `LIME = UC + MI` holds by linearity.

mod validate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disentangle::{
    build_logit_table, decompose_perturbed, decompose_point, DecomposedLogits, DisentangleError, LogitTable,
    SampleSet, Side,
};
use crate::gateway::Model;
use crate::numerics::derive_seed;
use crate::surrogate::{
    fit, perturb, segment, Explanation, ExplanationKind, FeatureSpace, GridSpec, SurrogateConfig, SurrogateError,
};

pub use validate::{
    swap_test, topk_report, validate_rq1, Rq1Check, Rq1Table, Rq1Thresholds, PointCorrelations, SwapOutcome,
    SwapResult, TopkTable, EXPLAINED_CLASS, RQ1_COLUMNS, RQ1_ROWS,
};

#[derive(Debug, Error)]
pub enum DimeError {
    #[error("class {class} out of range for a {classes}-class model")]
    BadClass { class: usize, classes: usize },
    #[error("invalid DIME config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Disentangle(#[from] DisentangleError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

impl From<crate::gateway::GatewayError> for DimeError {
    fn from(e: crate::gateway::GatewayError) -> Self {
        DimeError::Disentangle(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimeConfig {
    pub seed: u64,
    /// Size `N` of the sample set behind the decomposition.
    pub n_samples: usize,
    pub surrogate: SurrogateConfig,
    /// Segmentation applied to raster modalities; `None` means one feature per pixel.
    pub grid: Option<GridSpec>,
    /// Threads used for model evaluations. Results do not depend on it.
    pub workers: usize,
}

impl Default for DimeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 32,
            surrogate: SurrogateConfig::default(),
            grid: None,
            workers: 1,
        }
    }
}

impl DimeConfig {
    pub fn validate(&self) -> Result<(), DimeError> {
        if self.n_samples < 2 {
            return Err(DimeError::InvalidConfig(format!(
                "n_samples must be at least 2, got {}",
                self.n_samples
            )));
        }
        if self.workers == 0 {
            return Err(DimeError::InvalidConfig("workers must be positive".into()));
        }
        self.surrogate.validate()?;
        Ok(())
    }
}

/// Seed for the perturbation batch of one modality of one sample.
pub fn perturbation_seed(root: u64, sample_id: &str, side: Side) -> u64 {
    derive_seed(root, &format!("perturb/{sample_id}/side{}", side.number()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimeReport {
    pub point: usize,
    pub sample_id: String,
    pub class: usize,
    pub logits: DecomposedLogits,
    pub features1: FeatureSpace,
    pub features2: FeatureSpace,
    pub uc1: Explanation,
    pub mi1: Explanation,
    pub lime1: Explanation,
    pub uc2: Explanation,
    pub mi2: Explanation,
    pub lime2: Explanation,
}

impl DimeReport {
    pub fn uc(&self, side: Side) -> &Explanation {
        match side {
            Side::First => &self.uc1,
            Side::Second => &self.uc2,
        }
    }

    pub fn mi(&self, side: Side) -> &Explanation {
        match side {
            Side::First => &self.mi1,
            Side::Second => &self.mi2,
        }
    }

    pub fn lime(&self, side: Side) -> &Explanation {
        match side {
            Side::First => &self.lime1,
            Side::Second => &self.lime2,
        }
    }

    /// The six explanations in table column order: UC₁, MI₁, LIME₁, UC₂, MI₂, LIME₂.
    pub fn explanations(&self) -> [&Explanation; 6] {
        [&self.uc1, &self.mi1, &self.lime1, &self.uc2, &self.mi2, &self.lime2]
    }
}

/// The three explanations of one modality, fit on a shared batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SideExplanations {
    pub features: FeatureSpace,
    pub uc: Explanation,
    pub mi: Explanation,
    pub lime: Explanation,
}

/// Explains points of one sample set, building its logit table on first use.
pub struct DimeExplainer<'m, M: Model + ?Sized> {
    model: &'m M,
    samples: SampleSet,
    table: Option<LogitTable>,
    config: DimeConfig,
}

impl<'m, M: Model + ?Sized> DimeExplainer<'m, M> {
    pub fn new(model: &'m M, samples: SampleSet, config: DimeConfig) -> Result<Self, DimeError> {
        config.validate()?;
        Ok(Self {
            model,
            samples,
            table: None,
            config,
        })
    }

    /// Reuses a table built earlier for the same samples and model.
    pub fn with_table(
        model: &'m M,
        samples: SampleSet,
        table: LogitTable,
        config: DimeConfig,
    ) -> Result<Self, DimeError> {
        config.validate()?;
        if table.n() != samples.len() || table.sample_ids() != samples.ids() {
            return Err(DimeError::InvalidConfig("logit table was built for a different sample set".into()));
        }
        if table.classes() != model.classes() {
            return Err(DisentangleError::ClassCount {
                expected: model.classes(),
                got: table.classes(),
            }
            .into());
        }
        Ok(Self {
            model,
            samples,
            table: Some(table),
            config,
        })
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    pub fn config(&self) -> &DimeConfig {
        &self.config
    }

    pub fn table(&mut self) -> Result<&LogitTable, DimeError> {
        if self.table.is_none() {
            self.table = Some(build_logit_table(self.model, &self.samples)?);
        }
        Ok(self.table.as_ref().expect("just built"))
    }

    pub fn into_table(self) -> Option<LogitTable> {
        self.table
    }

    pub fn explain(&mut self, k: usize, class: usize) -> Result<DimeReport, DimeError> {
        self.check_point(k, class)?;
        let table = self.table.as_ref().expect("built by check_point");
        let logits = decompose_point(table, k)?;
        let first = self.side_explanations(table, k, Side::First, class)?;
        let second = self.side_explanations(table, k, Side::Second, class)?;
        Ok(DimeReport {
            point: k,
            sample_id: self.samples.id(k).to_string(),
            class,
            logits,
            features1: first.features,
            features2: second.features,
            uc1: first.uc,
            mi1: first.mi,
            lime1: first.lime,
            uc2: second.uc,
            mi2: second.mi,
            lime2: second.lime,
        })
    }

    /// Only one modality's explanations; costs `S·N` evaluations when warm.
    pub fn explain_side(&mut self, k: usize, side: Side, class: usize) -> Result<SideExplanations, DimeError> {
        self.check_point(k, class)?;
        let table = self.table.as_ref().expect("built by check_point");
        self.side_explanations(table, k, side, class)
    }

    fn check_point(&mut self, k: usize, class: usize) -> Result<(), DimeError> {
        if class >= self.model.classes() {
            return Err(DimeError::BadClass {
                class,
                classes: self.model.classes(),
            });
        }
        if k >= self.samples.len() {
            return Err(DisentangleError::IndexOutOfRange {
                index: k,
                n: self.samples.len(),
            }
            .into());
        }
        self.table()?;
        Ok(())
    }

    fn side_explanations(&self, table: &LogitTable, k: usize, side: Side, class: usize) -> Result<SideExplanations, DimeError> {
        let cfg = &self.config.surrogate;
        let v = self.samples.value(k, side);
        let grid = if v.kind() == crate::gateway::ModalityKind::Grid {
            self.config.grid
        } else {
            None
        };
        let features = segment(v, grid)?;
        let seed = perturbation_seed(self.config.seed, self.samples.id(k), side);
        let batch = perturb(v, &features, cfg, seed)?;

        let decomposed = self.evaluate_perturbations(table, k, side, &batch.realized)?;
        let full: Vec<f64> = decomposed.iter().map(|d| d.full.get(class)).collect();
        let uc: Vec<f64> = decomposed.iter().map(|d| d.uc.get(class)).collect();
        let mi: Vec<f64> = decomposed.iter().map(|d| d.mi.get(class)).collect();

        let explanation = |kind, targets: &[f64]| -> Result<Explanation, DimeError> {
            let lin = fit(&batch, targets, cfg.lambda)?;
            Ok(Explanation::from_fit(
                kind,
                side,
                class,
                lin,
                &batch,
                cfg,
                Some(self.samples.len()),
            ))
        };
        Ok(SideExplanations {
            uc: explanation(ExplanationKind::Uc, &uc)?,
            mi: explanation(ExplanationKind::Mi, &mi)?,
            lime: explanation(ExplanationKind::Full, &full)?,
            features,
        })
    }

    /// Decomposes every perturbation, in order, spreading the work over the
    /// configured number of threads.
    fn evaluate_perturbations(
        &self,
        table: &LogitTable,
        k: usize,
        side: Side,
        realized: &[crate::gateway::ModalityValue],
    ) -> Result<Vec<DecomposedLogits>, DimeError> {
        let one = |z| decompose_perturbed(table, &self.samples, k, side, z, self.model);
        let workers = self.config.workers.min(realized.len()).max(1);
        if workers == 1 {
            return Ok(realized.iter().map(one).collect::<Result<Vec<_>, _>>()?);
        }
        let chunk = realized.len().div_ceil(workers);
        let parts: Vec<Result<Vec<DecomposedLogits>, DisentangleError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = realized
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>, _>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(realized.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }
}

/// Cold-start convenience: builds the table for `samples` and explains point `k`.
pub fn dime_explain<M: Model + ?Sized>(
    model: &M,
    samples: &SampleSet,
    k: usize,
    class: usize,
    config: &DimeConfig,
) -> Result<DimeReport, DimeError> {
    DimeExplainer::new(model, samples.clone(), config.clone())?.explain(k, class)
}
