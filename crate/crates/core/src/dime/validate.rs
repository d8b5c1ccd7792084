//! Validation pipelines on the synthetic task: ground-truth correlations,
//! the modality-swap test and top-k weight summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{DimeConfig, DimeError, DimeExplainer, DimeReport};
use crate::data::{ground_truth, DatasetSplits, SyntheticPoint};
use crate::disentangle::{SampleSet, Side};
use crate::gateway::{ModalityValue, Model};
use crate::numerics::{cosine_distance, pearson, topk_mean_abs, NumericsError, Rng};

/// The synthetic task is explained on its positive class.
pub const EXPLAINED_CLASS: usize = 1;

pub const RQ1_ROWS: [&str; 3] = ["d1", "d2", "d1*d2"];
pub const RQ1_COLUMNS: [&str; 6] = ["UC1", "MI1", "LIME1", "UC2", "MI2", "LIME2"];

/// LIME fits below this R² are flagged (not excluded).
const LOW_R2: f64 = 0.1;

/// Correlations of one point's six explanations with the three ground truths.
/// `None` where the correlation is undefined (constant weights or truth).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCorrelations {
    /// Index into the test split.
    pub index: usize,
    pub corr: [[Option<f64>; 6]; 3],
    pub lime_r2: [f64; 2],
}

impl PointCorrelations {
    pub fn low_r2(&self) -> bool {
        self.lime_r2.iter().any(|r| *r < LOW_R2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq1Table {
    /// Mean correlation per (ground truth, explanation) cell.
    pub table: [[Option<f64>; 6]; 3],
    pub n_points: usize,
    /// Points left out of each cell's mean.
    pub excluded: [[usize; 6]; 3],
    /// Points whose LIME fit on either modality has R² below 0.1.
    pub low_r2_points: usize,
    pub per_point: Vec<PointCorrelations>,
    pub config: DimeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rq1Thresholds {
    pub uc_min: f64,
    pub mi_min: f64,
    pub off_target_max: f64,
    pub lime_min: f64,
    pub lime_max: f64,
}

impl Default for Rq1Thresholds {
    fn default() -> Self {
        Self {
            uc_min: 0.90,
            mi_min: 0.80,
            off_target_max: 0.15,
            lime_min: 0.40,
            lime_max: 0.90,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq1Check {
    pub cell: String,
    pub value: Option<f64>,
    pub rule: String,
    pub pass: bool,
}

impl Rq1Table {
    pub fn cell(&self, row: usize, col: usize) -> Option<f64> {
        self.table[row][col]
    }

    /// One check per table cell. Matching UC and MI cells have lower bounds,
    /// LIME cells on their own modality and on the interaction must sit in
    /// a band, and every remaining cell must be near zero.
    pub fn check(&self, t: &Rq1Thresholds) -> Vec<Rq1Check> {
        let mut out = Vec::with_capacity(18);
        for (row, row_name) in RQ1_ROWS.iter().enumerate() {
            for (col, col_name) in RQ1_COLUMNS.iter().enumerate() {
                let value = self.table[row][col];
                let side = col / 3;
                let own_truth = row == side;
                let interaction = row == 2;
                let (rule, pass): (String, Box<dyn Fn(f64) -> bool>) = match col % 3 {
                    0 if own_truth => (format!(">= {}", t.uc_min), Box::new(|v| v >= t.uc_min)),
                    1 if interaction => (format!(">= {}", t.mi_min), Box::new(|v| v >= t.mi_min)),
                    2 if own_truth || interaction => (
                        format!("in [{}, {}]", t.lime_min, t.lime_max),
                        Box::new(|v| v >= t.lime_min && v <= t.lime_max),
                    ),
                    _ => (
                        format!("|corr| <= {}", t.off_target_max),
                        Box::new(|v: f64| v.abs() <= t.off_target_max),
                    ),
                };
                out.push(Rq1Check {
                    cell: format!("corr({col_name}, {row_name})"),
                    value,
                    pass: value.is_some_and(&pass),
                    rule,
                });
            }
        }
        out
    }

    pub fn passes(&self, t: &Rq1Thresholds) -> bool {
        self.check(t).iter().all(|c| c.pass)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Mean Pearson correlation over {} test points", self.n_points);
        let _ = write!(s, "{:<8}", "truth");
        for c in RQ1_COLUMNS {
            let _ = write!(s, "{c:>9}");
        }
        s.push('\n');
        for (row, name) in RQ1_ROWS.iter().enumerate() {
            let _ = write!(s, "{name:<8}");
            for v in &self.table[row] {
                match v {
                    Some(v) => {
                        let _ = write!(s, "{v:>9.3}");
                    }
                    None => {
                        let _ = write!(s, "{:>9}", "n/a");
                    }
                }
            }
            s.push('\n');
        }
        let excluded: usize = self.excluded.iter().flatten().sum();
        if excluded > 0 {
            let _ = writeln!(s, "excluded (undefined correlation): {excluded} cell values");
        }
        if self.low_r2_points > 0 {
            let _ = writeln!(s, "points with LIME R² < {LOW_R2}: {}", self.low_r2_points);
        }
        s
    }
}

pub(crate) fn dense_pair(p: &SyntheticPoint) -> (ModalityValue, ModalityValue) {
    (ModalityValue::Dense(p.d1.clone()), ModalityValue::Dense(p.d2.clone()))
}

fn sample_set(points: &[SyntheticPoint], indices: &[usize]) -> Result<SampleSet, DimeError> {
    Ok(SampleSet::with_ids(
        indices.iter().map(|&i| dense_pair(&points[i])).collect(),
        indices.iter().map(|i| format!("test/{i}")).collect(),
    )?)
}

/// One decomposition sample set and the members of it to explain.
struct Group {
    members: Vec<usize>,
    explain: usize,
}

/// Chunks the explained points into sample sets of `n`; the last chunk is
/// topped up with other test points that are not themselves explained.
fn plan_groups(order: &[usize], n_points: usize, n: usize) -> Vec<Group> {
    let mut groups = Vec::new();
    for chunk in order[..n_points].chunks(n) {
        let mut members = chunk.to_vec();
        let explain = members.len();
        let mut fill = order[n_points..].iter().chain(order[..n_points].iter());
        while members.len() < n {
            let next = *fill.next().expect("test split holds at least n points");
            if !members.contains(&next) {
                members.push(next);
            }
        }
        groups.push(Group { members, explain });
    }
    groups
}

fn correlations(report: &DimeReport, point: &SyntheticPoint, index: usize) -> Result<PointCorrelations, DimeError> {
    let truth = ground_truth(point);
    let truths = [&truth.uc1, &truth.uc2, &truth.mi];
    let mut corr = [[None; 6]; 3];
    for (row, t) in truths.iter().enumerate() {
        for (col, e) in report.explanations().iter().enumerate() {
            corr[row][col] = match pearson(&e.weights, t) {
                Ok(r) => Some(r),
                Err(NumericsError::UndefinedCorrelation) => None,
                Err(e) => return Err(e.into()),
            };
        }
    }
    Ok(PointCorrelations {
        index,
        corr,
        lime_r2: [report.lime1.r2, report.lime2.r2],
    })
}

fn run_group<M: Model + ?Sized>(
    model: &M,
    test: &[SyntheticPoint],
    group: &Group,
    config: &DimeConfig,
) -> Result<Vec<PointCorrelations>, DimeError> {
    let samples = sample_set(test, &group.members)?;
    let mut explainer = DimeExplainer::new(
        model,
        samples,
        DimeConfig {
            workers: 1,
            ..config.clone()
        },
    )?;
    (0..group.explain)
        .map(|k| {
            let report = explainer.explain(k, EXPLAINED_CLASS)?;
            let index = group.members[k];
            correlations(&report, &test[index], index)
        })
        .collect()
}

/// Explains `n_points` random test points and averages the correlation of
/// each explanation with each ground-truth vector.
pub fn validate_rq1<M: Model + ?Sized>(
    model: &M,
    splits: &DatasetSplits,
    n_points: usize,
    config: &DimeConfig,
) -> Result<Rq1Table, DimeError> {
    config.validate()?;
    let test = &splits.test;
    let n = config.n_samples;
    if n_points == 0 || n_points > test.len() || test.len() < n {
        return Err(DimeError::InvalidConfig(format!(
            "cannot explain {n_points} points with N = {n} from a test split of {}",
            test.len()
        )));
    }
    let mut order: Vec<usize> = (0..test.len()).collect();
    Rng::derived(config.seed, "validate/select").shuffle(&mut order);
    let groups = plan_groups(&order, n_points, n);

    let workers = config.workers.min(groups.len()).max(1);
    let results: Vec<Result<Vec<PointCorrelations>, DimeError>> = if workers == 1 {
        groups
            .iter()
            .enumerate()
            .map(|(g, group)| {
                log::info!("rq1: sample set {}/{}", g + 1, groups.len());
                run_group(model, test, group, config)
            })
            .collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let groups = &groups;
                    scope.spawn(move || {
                        (w..groups.len())
                            .step_by(workers)
                            .map(|g| (g, run_group(model, test, &groups[g], config)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut slots: Vec<Option<Result<Vec<PointCorrelations>, DimeError>>> =
                (0..groups.len()).map(|_| None).collect();
            for h in handles {
                for (g, r) in h.join().expect("worker panicked") {
                    slots[g] = Some(r);
                }
            }
            slots.into_iter().map(|s| s.expect("every group ran")).collect()
        })
    };
    let mut per_point = Vec::with_capacity(n_points);
    for r in results {
        per_point.extend(r?);
    }
    per_point.sort_by_key(|p| p.index);

    let mut table = [[None; 6]; 3];
    let mut excluded = [[0; 6]; 3];
    for row in 0..3 {
        for col in 0..6 {
            let values: Vec<f64> = per_point.iter().filter_map(|p| p.corr[row][col]).collect();
            excluded[row][col] = per_point.len() - values.len();
            if !values.is_empty() {
                table[row][col] = Some(values.iter().sum::<f64>() / values.len() as f64);
            }
        }
    }
    let low_r2_points = per_point.iter().filter(|p| p.low_r2()).count();
    Ok(Rq1Table {
        table,
        n_points: per_point.len(),
        excluded,
        low_r2_points,
        per_point,
        config: config.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapOutcome {
    pub point: usize,
    pub uc_distance: Option<f64>,
    pub mi_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapResult {
    /// Mean over pairs where the distance is defined.
    pub uc_distance: Option<f64>,
    pub mi_distance: Option<f64>,
    pub excluded_uc: usize,
    pub excluded_mi: usize,
    pub pairs: Vec<SwapOutcome>,
}

fn distance(a: &[f64], b: &[f64]) -> Result<Option<f64>, DimeError> {
    match cosine_distance(a, b) {
        Ok(d) => Ok(Some(d)),
        Err(NumericsError::DegenerateVector) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut count, mut missing) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                count += 1;
            }
            None => missing += 1,
        }
    }
    ((count > 0).then(|| sum / count as f64), missing)
}

/// For each `(k, replacement)`, compares modality-1 explanations of point `k`
/// before and after its modality-2 value is swapped out, with the same
/// perturbation seeds and otherwise the same sample set.
pub fn swap_test<M: Model + ?Sized>(
    model: &M,
    samples: &SampleSet,
    pairs: &[(usize, ModalityValue)],
    class: usize,
    config: &DimeConfig,
) -> Result<SwapResult, DimeError> {
    let mut before = DimeExplainer::new(model, samples.clone(), config.clone())?;
    let mut outcomes = Vec::with_capacity(pairs.len());
    for (k, replacement) in pairs {
        let a = before.explain_side(*k, Side::First, class)?;
        let swapped = samples.with_replaced(*k, Side::Second, replacement.clone());
        let b = DimeExplainer::new(model, swapped, config.clone())?.explain_side(*k, Side::First, class)?;
        outcomes.push(SwapOutcome {
            point: *k,
            uc_distance: distance(&a.uc.weights, &b.uc.weights)?,
            mi_distance: distance(&a.mi.weights, &b.mi.weights)?,
        });
    }
    let (uc_distance, excluded_uc) = mean_defined(outcomes.iter().map(|o| o.uc_distance));
    let (mi_distance, excluded_mi) = mean_defined(outcomes.iter().map(|o| o.mi_distance));
    if excluded_uc + excluded_mi > 0 {
        log::warn!("swap test: {excluded_uc} UC and {excluded_mi} MI distances undefined (zero weights)");
    }
    Ok(SwapResult {
        uc_distance,
        mi_distance,
        excluded_uc,
        excluded_mi,
        pairs: outcomes,
    })
}

/// Mean top-k absolute weight, rows UC / MI, columns modality 1 / 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkTable {
    pub k: usize,
    pub table: [[f64; 2]; 2],
    pub reports: usize,
}

/// `k` is capped at each explanation's feature count.
pub fn topk_report(reports: &[DimeReport], k: usize) -> Result<TopkTable, DimeError> {
    if reports.is_empty() || k == 0 {
        return Err(DimeError::InvalidConfig("top-k report needs reports and k >= 1".into()));
    }
    let mut table = [[0.0; 2]; 2];
    for r in reports {
        for (col, side) in Side::BOTH.into_iter().enumerate() {
            for (row, e) in [r.uc(side), r.mi(side)].into_iter().enumerate() {
                table[row][col] += topk_mean_abs(&e.weights, k.min(e.weights.len()))?;
            }
        }
    }
    for v in table.iter_mut().flatten() {
        *v /= reports.len() as f64;
    }
    Ok(TopkTable {
        k,
        table,
        reports: reports.len(),
    })
}
