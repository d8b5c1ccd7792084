//! Krippendorff's alpha at the nominal measurement level.

use std::collections::BTreeMap;

use super::NumericsError;

/// Annotator × item matrix of nominal categories; `None` marks a missing rating.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingsMatrix {
    ratings: Vec<Vec<Option<u32>>>,
    items: usize,
}

impl RatingsMatrix {
    pub fn new(ratings: Vec<Vec<Option<u32>>>) -> Result<Self, NumericsError> {
        if ratings.len() < 2 {
            return Err(NumericsError::InsufficientData(
                "at least two annotators are required".into(),
            ));
        }
        let items = ratings[0].len();
        if let Some(bad) = ratings.iter().find(|r| r.len() != items) {
            return Err(NumericsError::LengthMismatch {
                left: items,
                right: bad.len(),
            });
        }
        let m = Self { ratings, items };
        if !(0..items).any(|u| m.unit_values(u).len() >= 2) {
            return Err(NumericsError::InsufficientData(
                "no item carries two or more ratings".into(),
            ));
        }
        Ok(m)
    }

    /// Complete matrix, no missing cells.
    pub fn complete(ratings: Vec<Vec<u32>>) -> Result<Self, NumericsError> {
        Self::new(
            ratings
                .into_iter()
                .map(|r| r.into_iter().map(Some).collect())
                .collect(),
        )
    }

    pub fn annotators(&self) -> usize {
        self.ratings.len()
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn get(&self, annotator: usize, item: usize) -> Option<u32> {
        self.ratings[annotator][item]
    }

    fn unit_values(&self, item: usize) -> Vec<u32> {
        self.ratings.iter().filter_map(|r| r[item]).collect()
    }
}

/// Nominal alpha from the coincidence matrix:
/// `α = 1 − (n − 1) · Σ_{c≠k} o_ck / Σ_{c≠k} n_c n_k`.
///
/// When every pairable value falls in one category there is no expected
/// disagreement; that case is perfect agreement and yields 1.
pub fn krippendorff_alpha_nominal(r: &RatingsMatrix) -> Result<f64, NumericsError> {
    let mut coincidence: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for u in 0..r.items() {
        let values = r.unit_values(u);
        let m = values.len();
        if m < 2 {
            continue;
        }
        let share = 1.0 / (m - 1) as f64;
        for (i, &a) in values.iter().enumerate() {
            for (j, &b) in values.iter().enumerate() {
                if i != j {
                    *coincidence.entry((a, b)).or_default() += share;
                }
            }
        }
    }
    if coincidence.is_empty() {
        return Err(NumericsError::InsufficientData(
            "no pairable ratings".into(),
        ));
    }

    let mut marginals: BTreeMap<u32, f64> = BTreeMap::new();
    let mut observed = 0.0;
    for (&(c, k), &o) in &coincidence {
        *marginals.entry(c).or_default() += o;
        if c != k {
            observed += o;
        }
    }
    let n: f64 = marginals.values().sum();
    let total_sq: f64 = marginals.values().map(|v| v * v).sum();
    let expected = n * n - total_sq;
    if expected == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}
