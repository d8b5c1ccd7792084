//! Splitting a model's output into unimodal contributions and interactions.
//!
//! Over a fixed sample set of `N` points the model is evaluated on every
//! cross pairing, giving a table `L[i][j] = M(x1_i, x2_j)`. With uniform
//! empirical expectations the unimodal part at point `k` is
//!
//! ```text
//! UC_k = mean_j L[k][j] + mean_i L[i][k] − mean_ij L[i][j]
//! MI_k = L[k][k] − UC_k
//! ```
//!
//! For an additive model `f(x1) + g(x2)` this reproduces `f + g` exactly on
//! the grid and leaves `MI = 0`. Perturbing one modality of point `k` only
//! touches row `k` (modality 1) or column `k` (modality 2), so a perturbed
//! decomposition costs `N` evaluations plus `O(N·C)` bookkeeping.
//!
//! All sums run in ascending index order so that a "perturbation" equal to
//! the original input reproduces the cached decomposition bit for bit.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, LogitVector, ModalityValue, Model, Pair};

#[derive(Debug, Error)]
pub enum DisentangleError {
    #[error("sample set needs at least 2 points, got {0}")]
    TooFewSamples(usize),
    #[error("point index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("{0} sample ids for {1} points")]
    IdCount(usize, usize),
    #[error("model returned {got} classes, expected {expected}")]
    ClassCount { expected: usize, got: usize },
    #[error("invalid logit table dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which modality of a pair is being perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Side {
    First,
    Second,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::First, Side::Second];

    pub fn number(self) -> u8 {
        match self {
            Side::First => 1,
            Side::Second => 2,
        }
    }
}

impl From<Side> for u8 {
    fn from(s: Side) -> u8 {
        s.number()
    }
}

impl TryFrom<u8> for Side {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Side::First),
            2 => Ok(Side::Second),
            other => Err(format!("modality must be 1 or 2, got {other}")),
        }
    }
}

/// The `N` points whose cross pairings define the empirical expectations.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    points: Vec<(ModalityValue, ModalityValue)>,
    ids: Vec<String>,
}

impl SampleSet {
    /// Points are identified by their position.
    pub fn new(points: Vec<(ModalityValue, ModalityValue)>) -> Result<Self, DisentangleError> {
        let ids = (0..points.len()).map(|i| i.to_string()).collect();
        Self::with_ids(points, ids)
    }

    pub fn with_ids(
        points: Vec<(ModalityValue, ModalityValue)>,
        ids: Vec<String>,
    ) -> Result<Self, DisentangleError> {
        if points.len() < 2 {
            return Err(DisentangleError::TooFewSamples(points.len()));
        }
        if ids.len() != points.len() {
            return Err(DisentangleError::IdCount(ids.len(), points.len()));
        }
        Ok(Self { points, ids })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, k: usize) -> &(ModalityValue, ModalityValue) {
        &self.points[k]
    }

    pub fn value(&self, k: usize, side: Side) -> &ModalityValue {
        match side {
            Side::First => &self.points[k].0,
            Side::Second => &self.points[k].1,
        }
    }

    pub fn id(&self, k: usize) -> &str {
        &self.ids[k]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Copy with one modality of point `k` replaced.
    pub fn with_replaced(&self, k: usize, side: Side, value: ModalityValue) -> Self {
        let mut out = self.clone();
        match side {
            Side::First => out.points[k].0 = value,
            Side::Second => out.points[k].1 = value,
        }
        out
    }

    fn check_index(&self, k: usize) -> Result<(), DisentangleError> {
        if k >= self.len() {
            return Err(DisentangleError::IndexOutOfRange { index: k, n: self.len() });
        }
        Ok(())
    }
}

/// Model outputs on all `N×N` cross pairings, with cached sums.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTable {
    n: usize,
    classes: usize,
    sample_ids: Vec<String>,
    /// `values[(i * n + j) * classes + c]`.
    values: Vec<f64>,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    grand_sum: Vec<f64>,
}

/// Full logits at a point and their unimodal / interaction split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposedLogits {
    pub full: LogitVector,
    pub uc: LogitVector,
    pub mi: LogitVector,
}

/// `row/N + col/N − grand/N²`, shared by the cached and perturbed paths.
fn unimodal(row_sum: f64, col_sum: f64, grand_sum: f64, n: usize) -> f64 {
    let nf = n as f64;
    row_sum / nf + col_sum / nf - grand_sum / (nf * nf)
}

fn decomposition(full: Vec<f64>, uc: Vec<f64>) -> DecomposedLogits {
    let mi = full.iter().zip(&uc).map(|(f, u)| f - u).collect();
    DecomposedLogits {
        full: LogitVector(full),
        uc: LogitVector(uc),
        mi: LogitVector(mi),
    }
}

impl LogitTable {
    /// Builds the table from raw row-major values, computing all sums.
    pub fn from_values(
        n: usize,
        classes: usize,
        sample_ids: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self, DisentangleError> {
        if n < 2 {
            return Err(DisentangleError::TooFewSamples(n));
        }
        if sample_ids.len() != n {
            return Err(DisentangleError::IdCount(sample_ids.len(), n));
        }
        if classes == 0 || values.len() != n * n * classes {
            return Err(DisentangleError::BadDump(format!(
                "{} values for N = {n}, C = {classes}",
                values.len()
            )));
        }
        let mut row_sums = vec![0.0; n * classes];
        let mut col_sums = vec![0.0; n * classes];
        for i in 0..n {
            for j in 0..n {
                for c in 0..classes {
                    let v = values[(i * n + j) * classes + c];
                    row_sums[i * classes + c] += v;
                    col_sums[j * classes + c] += v;
                }
            }
        }
        let mut grand_sum = vec![0.0; classes];
        for i in 0..n {
            for c in 0..classes {
                grand_sum[c] += row_sums[i * classes + c];
            }
        }
        Ok(Self {
            n,
            classes,
            sample_ids,
            values,
            row_sums,
            col_sums,
            grand_sum,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.n + j) * self.classes;
        &self.values[start..start + self.classes]
    }

    pub fn row_mean(&self, i: usize) -> Vec<f64> {
        self.scaled(&self.row_sums[i * self.classes..(i + 1) * self.classes], self.n)
    }

    pub fn col_mean(&self, j: usize) -> Vec<f64> {
        self.scaled(&self.col_sums[j * self.classes..(j + 1) * self.classes], self.n)
    }

    pub fn grand_mean(&self) -> Vec<f64> {
        self.scaled(&self.grand_sum, self.n * self.n)
    }

    fn scaled(&self, sums: &[f64], count: usize) -> Vec<f64> {
        sums.iter().map(|s| s / count as f64).collect()
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), DisentangleError> {
        let dump = TableDump {
            format: TABLE_FORMAT.into(),
            n: self.n,
            classes: self.classes,
            sample_ids: self.sample_ids.clone(),
            values: self.values.clone(),
        };
        serde_json::to_writer(out, &dump).map_err(std::io::Error::from)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self, DisentangleError> {
        let dump: TableDump =
            serde_json::from_reader(input).map_err(|e| DisentangleError::BadDump(e.to_string()))?;
        if dump.format != TABLE_FORMAT {
            return Err(DisentangleError::BadDump(format!("unknown format {:?}", dump.format)));
        }
        Self::from_values(dump.n, dump.classes, dump.sample_ids, dump.values)
    }
}

const TABLE_FORMAT: &str = "dime-logit-table/1";

#[derive(Serialize, Deserialize)]
struct TableDump {
    format: String,
    n: usize,
    classes: usize,
    sample_ids: Vec<String>,
    /// Row-major `[i][j][c]`.
    values: Vec<f64>,
}

fn check_classes(expected: usize, logits: &[LogitVector]) -> Result<(), DisentangleError> {
    match logits.iter().find(|l| l.classes() != expected) {
        Some(bad) => Err(DisentangleError::ClassCount {
            expected,
            got: bad.classes(),
        }),
        None => Ok(()),
    }
}

/// Evaluates the model on all `N²` pairings, one batch per row.
pub fn build_logit_table<M: Model + ?Sized>(model: &M, samples: &SampleSet) -> Result<LogitTable, DisentangleError> {
    let n = samples.len();
    let classes = model.classes();
    let mut values = Vec::with_capacity(n * n * classes);
    for i in 0..n {
        let x1 = &samples.point(i).0;
        let pairs: Vec<Pair<'_>> = (0..n).map(|j| (x1, &samples.point(j).1)).collect();
        let row = model.evaluate_batch(&pairs)?;
        check_classes(classes, &row)?;
        for l in &row {
            values.extend_from_slice(l.values());
        }
    }
    LogitTable::from_values(n, classes, samples.ids().to_vec(), values)
}

/// Decomposition of the diagonal entry `L[k][k]`.
pub fn decompose_point(table: &LogitTable, k: usize) -> Result<DecomposedLogits, DisentangleError> {
    if k >= table.n {
        return Err(DisentangleError::IndexOutOfRange { index: k, n: table.n });
    }
    let c = table.classes;
    let uc = (0..c)
        .map(|ci| {
            unimodal(
                table.row_sums[k * c + ci],
                table.col_sums[k * c + ci],
                table.grand_sum[ci],
                table.n,
            )
        })
        .collect();
    Ok(decomposition(table.entry(k, k).to_vec(), uc))
}

/// Decomposition at point `k` after replacing its `side` modality with
/// `perturbed`, using `N` fresh evaluations against the other modality of
/// every sample. The table itself is left untouched.
pub fn decompose_perturbed<M: Model + ?Sized>(
    table: &LogitTable,
    samples: &SampleSet,
    k: usize,
    side: Side,
    perturbed: &ModalityValue,
    model: &M,
) -> Result<DecomposedLogits, DisentangleError> {
    samples.check_index(k)?;
    let n = table.n;
    if samples.len() != n {
        return Err(DisentangleError::IdCount(samples.len(), n));
    }
    let pairs: Vec<Pair<'_>> = match side {
        Side::First => (0..n).map(|j| (perturbed, &samples.point(j).1)).collect(),
        Side::Second => (0..n).map(|i| (&samples.point(i).0, perturbed)).collect(),
    };
    let fresh = model.evaluate_batch(&pairs)?;
    check_classes(table.classes, &fresh)?;
    Ok(overlay_decomposition(table, k, side, &fresh))
}

/// Decomposition of a table whose row (or column) `k` is replaced by `fresh`.
fn overlay_decomposition(table: &LogitTable, k: usize, side: Side, fresh: &[LogitVector]) -> DecomposedLogits {
    let (n, c) = (table.n, table.classes);
    let mut uc = Vec::with_capacity(c);
    for ci in 0..c {
        // Sum of the replaced line, and of the crossing line through (k, k)
        // with its diagonal entry swapped for the fresh one.
        let mut fresh_sum = 0.0;
        for l in fresh {
            fresh_sum += l.get(ci);
        }
        let mut cross_sum = 0.0;
        for m in 0..n {
            cross_sum += if m == k {
                fresh[k].get(ci)
            } else {
                match side {
                    Side::First => table.entry(m, k)[ci],
                    Side::Second => table.entry(k, m)[ci],
                }
            };
        }
        let (old_line, row_sum, col_sum) = match side {
            Side::First => (table.row_sums[k * c + ci], fresh_sum, cross_sum),
            Side::Second => (table.col_sums[k * c + ci], cross_sum, fresh_sum),
        };
        let grand = table.grand_sum[ci] + (fresh_sum - old_line);
        uc.push(unimodal(row_sum, col_sum, grand, n));
    }
    let full = fresh[k].values().to_vec();
    decomposition(full, uc)
}

/// Interaction part of every table entry:
/// `L[i][j] − rowmean_i − colmean_j + grandmean`.
pub fn mi_grid(table: &LogitTable) -> Vec<f64> {
    let (n, c) = (table.n, table.classes);
    let nf = n as f64;
    let mut out = Vec::with_capacity(n * n * c);
    for i in 0..n {
        for j in 0..n {
            for ci in 0..c {
                let v = table.entry(i, j)[ci];
                out.push(
                    v - table.row_sums[i * c + ci] / nf - table.col_sums[j * c + ci] / nf
                        + table.grand_sum[ci] / (nf * nf),
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CountingModel, FnModel};
    use crate::numerics::Rng;

    fn scalar(v: f64) -> ModalityValue {
        ModalityValue::Dense(vec![v])
    }

    fn product_model() -> FnModel<impl Fn(&ModalityValue, &ModalityValue) -> Vec<f64> + Send + Sync> {
        FnModel::new(1, |a: &ModalityValue, b: &ModalityValue| {
            vec![a.as_dense().unwrap()[0] * b.as_dense().unwrap()[0]]
        })
    }

    fn pm1_samples() -> SampleSet {
        SampleSet::new(vec![(scalar(1.0), scalar(1.0)), (scalar(-1.0), scalar(-1.0))]).unwrap()
    }

    fn random_samples(rng: &mut Rng, n: usize, dim: usize) -> SampleSet {
        SampleSet::new(
            (0..n)
                .map(|_| {
                    let a = (0..dim).map(|_| rng.normal()).collect();
                    let b = (0..dim).map(|_| rng.normal()).collect();
                    (ModalityValue::Dense(a), ModalityValue::Dense(b))
                })
                .collect(),
        )
        .unwrap()
    }

    /// Unrelated nonlinear two-class model.
    fn tangled() -> FnModel<impl Fn(&ModalityValue, &ModalityValue) -> Vec<f64> + Send + Sync> {
        FnModel::new(2, |a: &ModalityValue, b: &ModalityValue| {
            let (a, b) = (a.as_dense().unwrap(), b.as_dense().unwrap());
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let s: f64 = a.iter().sum::<f64>() - 0.5 * b.iter().sum::<f64>();
            vec![dot.tanh() + s, (a[0] * b[1]).sin() - s * s]
        })
    }

    #[test]
    fn product_table_and_decomposition_enumerated() {
        let table = build_logit_table(&product_model(), &pm1_samples()).unwrap();
        assert_eq!(table.entry(0, 0), &[1.0]);
        assert_eq!(table.entry(0, 1), &[-1.0]);
        assert_eq!(table.entry(1, 0), &[-1.0]);
        assert_eq!(table.entry(1, 1), &[1.0]);
        let d = decompose_point(&table, 0).unwrap();
        assert_eq!(d.uc.values(), &[0.0]);
        assert_eq!(d.mi.values(), &[1.0]);
        assert_eq!(mi_grid(&table), vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn table_matches_direct_evaluations() {
        let mut rng = Rng::new(1);
        let samples = random_samples(&mut rng, 2, 3);
        let m = tangled();
        let table = build_logit_table(&m, &samples).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let direct = m.evaluate(&samples.point(i).0, &samples.point(j).1).unwrap();
                assert_eq!(table.entry(i, j), direct.values());
            }
        }
    }

    #[test]
    fn build_costs_n_squared_evaluations() {
        let mut rng = Rng::new(2);
        let samples = random_samples(&mut rng, 6, 2);
        let m = CountingModel::new(tangled());
        build_logit_table(&m, &samples).unwrap();
        assert_eq!(m.evaluations(), 36);
    }

    #[test]
    fn constant_model_is_all_unimodal() {
        let m = FnModel::new(2, |_: &ModalityValue, _: &ModalityValue| vec![2.5, -1.0]);
        let mut rng = Rng::new(3);
        let samples = random_samples(&mut rng, 5, 2);
        let table = build_logit_table(&m, &samples).unwrap();
        for k in 0..5 {
            let d = decompose_point(&table, k).unwrap();
            assert_eq!(d.uc.values(), &[2.5, -1.0]);
            assert_eq!(d.mi.values(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn additive_table_satisfies_exchange_identity() {
        let m = FnModel::new(1, |a: &ModalityValue, b: &ModalityValue| {
            let (a, b) = (a.as_dense().unwrap(), b.as_dense().unwrap());
            vec![a[0].exp() + (b[0] * 3.0).cos()]
        });
        let mut rng = Rng::new(4);
        let samples = random_samples(&mut rng, 4, 1);
        let t = build_logit_table(&m, &samples).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    for l in 0..4 {
                        let lhs = t.entry(i, j)[0] + t.entry(k, l)[0];
                        let rhs = t.entry(i, l)[0] + t.entry(k, j)[0];
                        assert!((lhs - rhs).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cached_means_match_recomputation() {
        let mut rng = Rng::new(5);
        let samples = random_samples(&mut rng, 7, 3);
        let t = build_logit_table(&tangled(), &samples).unwrap();
        for i in 0..7 {
            for c in 0..2 {
                let row: f64 = (0..7).map(|j| t.entry(i, j)[c]).sum::<f64>() / 7.0;
                let col: f64 = (0..7).map(|j| t.entry(j, i)[c]).sum::<f64>() / 7.0;
                assert!((t.row_mean(i)[c] - row).abs() < 1e-12);
                assert!((t.col_mean(i)[c] - col).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noop_perturbation_is_bit_identical() {
        let mut rng = Rng::new(6);
        let samples = random_samples(&mut rng, 9, 3);
        let m = tangled();
        let table = build_logit_table(&m, &samples).unwrap();
        for k in 0..9 {
            let base = decompose_point(&table, k).unwrap();
            for side in Side::BOTH {
                let same = samples.value(k, side).clone();
                let d = decompose_perturbed(&table, &samples, k, side, &same, &m).unwrap();
                assert_eq!(d, base, "k = {k}, side = {side:?}");
            }
        }
    }

    #[test]
    fn perturbation_matches_naive_rebuild() {
        let mut rng = Rng::new(7);
        let samples = random_samples(&mut rng, 6, 3);
        let m = CountingModel::new(tangled());
        let table = build_logit_table(&m, &samples).unwrap();
        for trial in 0..20 {
            let k = trial % 6;
            let side = Side::BOTH[trial % 2];
            let z = ModalityValue::Dense((0..3).map(|_| rng.normal()).collect());
            m.reset();
            let fast = decompose_perturbed(&table, &samples, k, side, &z, &m).unwrap();
            assert_eq!(m.evaluations(), 6);
            let rebuilt = build_logit_table(&m, &samples.with_replaced(k, side, z)).unwrap();
            let naive = decompose_point(&rebuilt, k).unwrap();
            for c in 0..2 {
                assert!((fast.uc.get(c) - naive.uc.get(c)).abs() < 1e-9);
                assert!((fast.mi.get(c) - naive.mi.get(c)).abs() < 1e-9);
                assert_eq!(fast.full.get(c), naive.full.get(c));
            }
        }
    }

    #[test]
    fn additive_model_perturbations_keep_mi_zero() {
        let m = FnModel::new(2, |a: &ModalityValue, b: &ModalityValue| {
            let (a, b) = (a.as_dense().unwrap(), b.as_dense().unwrap());
            let f: f64 = a.iter().map(|x| x.sin()).sum();
            let g: f64 = b.iter().map(|x| x * x).sum();
            vec![f + g, 2.0 * f - g]
        });
        let mut rng = Rng::new(8);
        let samples = random_samples(&mut rng, 5, 4);
        let table = build_logit_table(&m, &samples).unwrap();
        for k in 0..5 {
            for side in Side::BOTH {
                let z = ModalityValue::Dense((0..4).map(|_| rng.normal() * 2.0).collect());
                let d = decompose_perturbed(&table, &samples, k, side, &z, &m).unwrap();
                assert!(d.mi.values().iter().all(|v| v.abs() < 1e-9), "{d:?}");
            }
        }
    }

    #[test]
    fn mi_grid_is_doubly_centered() {
        let mut rng = Rng::new(9);
        let samples = random_samples(&mut rng, 8, 3);
        let t = build_logit_table(&tangled(), &samples).unwrap();
        let g = mi_grid(&t);
        for a in 0..8 {
            for c in 0..2 {
                let row: f64 = (0..8).map(|b| g[(a * 8 + b) * 2 + c]).sum();
                let col: f64 = (0..8).map(|b| g[(b * 8 + a) * 2 + c]).sum();
                assert!(row.abs() / 8.0 < 1e-9 && col.abs() / 8.0 < 1e-9);
            }
        }
    }

    #[test]
    fn dump_round_trip_preserves_means() {
        let mut rng = Rng::new(10);
        let samples = random_samples(&mut rng, 5, 2);
        let t = build_logit_table(&tangled(), &samples).unwrap();
        let mut buf = Vec::new();
        t.write_json(&mut buf).unwrap();
        let back = LogitTable::read_json(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        for i in 0..5 {
            for c in 0..2 {
                assert!((back.row_mean(i)[c] - t.row_mean(i)[c]).abs() < 1e-12);
            }
        }
        assert!(LogitTable::read_json(&b"{\"format\":\"x\",\"n\":2,\"classes\":1,\"sample_ids\":[\"a\",\"b\"],\"values\":[1,2,3,4]}"[..]).is_err());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            SampleSet::new(vec![(scalar(0.0), scalar(0.0))]),
            Err(DisentangleError::TooFewSamples(1))
        ));
        let t = build_logit_table(&product_model(), &pm1_samples()).unwrap();
        assert!(matches!(decompose_point(&t, 2), Err(DisentangleError::IndexOutOfRange { .. })));
        let wrong = FnModel::new(1, |_: &ModalityValue, _: &ModalityValue| vec![0.0]);
        let text = SampleSet::new(vec![
            (ModalityValue::from_text("a"), scalar(0.0)),
            (ModalityValue::from_text("b"), scalar(1.0)),
        ])
        .unwrap();
        assert!(build_logit_table(&wrong, &text).is_ok());
        assert!(matches!(
            build_logit_table(&crate::gateway::Mlp::zeros(&[2, 1]), &text),
            Err(DisentangleError::Gateway(GatewayError::Shape { .. }))
        ));
    }

    #[test]
    fn side_serializes_as_number() {
        assert_eq!(serde_json::to_string(&Side::Second).unwrap(), "2");
        assert_eq!(serde_json::from_str::<Side>("1").unwrap(), Side::First);
        assert!(serde_json::from_str::<Side>("3").is_err());
    }
}
