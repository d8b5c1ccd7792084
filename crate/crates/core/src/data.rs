//! Synthetic two-modality task with known unimodal and interaction structure.
//!
//! Each point holds two 10-dimensional standard-normal vectors. The score is
//! the sum of all entries of both vectors plus their dot product, so the
//! sums are purely unimodal and the dot product is a pure cross-modal
//! interaction. Points with `|score| < 0.01` are discarded and the label is
//! the sign of the score.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

pub const DIM: usize = 10;
pub const SCORE_MARGIN: f64 = 0.01;
pub const MIN_POINTS: usize = 10;
pub const GENERATOR_VERSION: &str = "dime-synthetic/1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least {MIN_POINTS} points, got {0}")]
    TooFewPoints(usize),
    #[error("malformed record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoint {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub label: u8,
}

impl SyntheticPoint {
    pub fn score(&self) -> f64 {
        score(&self.d1, &self.d2)
    }
}

/// Σd1 + Σd2 + d1·d2.
pub fn score(d1: &[f64], d2: &[f64]) -> f64 {
    let s1: f64 = d1.iter().sum();
    let s2: f64 = d2.iter().sum();
    let dot: f64 = d1.iter().zip(d2).map(|(a, b)| a * b).sum();
    s1 + s2 + dot
}

/// Per-feature targets a faithful explanation should correlate with.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub uc1: Vec<f64>,
    pub uc2: Vec<f64>,
    pub mi: Vec<f64>,
}

pub fn ground_truth(p: &SyntheticPoint) -> GroundTruth {
    GroundTruth {
        uc1: p.d1.clone(),
        uc2: p.d2.clone(),
        mi: p.d1.iter().zip(&p.d2).map(|(a, b)| a * b).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<SyntheticPoint>,
    pub valid: Vec<SyntheticPoint>,
    pub test: Vec<SyntheticPoint>,
}

impl DatasetSplits {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `n` retained points and splits them 8/1/1 in generation order.
pub fn generate(seed: u64, n: usize) -> Result<DatasetSplits, DataError> {
    if n < MIN_POINTS {
        return Err(DataError::TooFewPoints(n));
    }
    let mut rng = Rng::new(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let d1: Vec<f64> = (0..DIM).map(|_| rng.normal()).collect();
        let d2: Vec<f64> = (0..DIM).map(|_| rng.normal()).collect();
        let s = score(&d1, &d2);
        if s.abs() < SCORE_MARGIN {
            continue;
        }
        points.push(SyntheticPoint {
            d1,
            d2,
            label: u8::from(s > 0.0),
        });
    }
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let test = points.split_off(n_train + n_valid);
    let valid = points.split_off(n_train);
    Ok(DatasetSplits {
        train: points,
        valid,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub generator: String,
    pub seed: u64,
    pub split: String,
    pub count: usize,
}

/// Writes a header line followed by one JSON record per point.
pub fn write_split<W: Write>(
    mut out: W,
    header: &SplitHeader,
    points: &[SyntheticPoint],
) -> Result<(), DataError> {
    serde_json::to_writer(&mut out, header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for p in points {
        serde_json::to_writer(&mut out, p).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_split<R: BufRead>(input: R) -> Result<(SplitHeader, Vec<SyntheticPoint>), DataError> {
    let mut lines = input.lines();
    let header_line = lines.next().ok_or_else(|| DataError::Malformed {
        line: 1,
        message: "missing header".into(),
    })??;
    let header: SplitHeader =
        serde_json::from_str(&header_line).map_err(|e| DataError::Malformed {
            line: 1,
            message: e.to_string(),
        })?;
    let mut points = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: SyntheticPoint = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: i + 2,
            message: e.to_string(),
        })?;
        if p.d1.len() != DIM || p.d2.len() != DIM || p.label > 1 {
            return Err(DataError::Malformed {
                line: i + 2,
                message: format!("expected two {DIM}-vectors and a 0/1 label"),
            });
        }
        points.push(p);
    }
    if points.len() != header.count {
        return Err(DataError::Malformed {
            line: points.len() + 1,
            message: format!("header says {} records, found {}", header.count, points.len()),
        });
    }
    Ok((header, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; DIM];
        v[i] = 1.0;
        v
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&e(0), &e(0)), 3.0);
        assert_eq!(score(&[0.0; DIM], &[0.0; DIM]), 0.0);
        assert!((score(&[0.1; DIM], &[-0.2; DIM]) + 1.2).abs() < 1e-12);
    }

    #[test]
    fn score_is_symmetric() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let a: Vec<f64> = (0..DIM).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..DIM).map(|_| rng.normal()).collect();
            assert!((score(&a, &b) - score(&b, &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn ground_truth_examples() {
        let p = SyntheticPoint { d1: e(0), d2: e(1), label: 1 };
        assert_eq!(ground_truth(&p).mi, vec![0.0; DIM]);

        let p = SyntheticPoint { d1: vec![1.0; DIM], d2: vec![1.0; DIM], label: 1 };
        assert_eq!(ground_truth(&p).mi, vec![1.0; DIM]);

        let mut d1 = vec![0.0; DIM];
        let mut d2 = vec![0.0; DIM];
        d1[..3].copy_from_slice(&[1.0, 2.0, 0.0]);
        d2[..3].copy_from_slice(&[3.0, -1.0, 5.0]);
        let gt = ground_truth(&SyntheticPoint { d1: d1.clone(), d2: d2.clone(), label: 1 });
        assert_eq!(&gt.mi[..3], &[3.0, -2.0, 0.0]);
        assert_eq!(gt.uc1, d1);
        assert_eq!(gt.uc2, d2);
    }

    #[test]
    fn generated_points_satisfy_invariants() {
        let splits = generate(11, 1000).unwrap();
        assert_eq!(
            (splits.train.len(), splits.valid.len(), splits.test.len()),
            (800, 100, 100)
        );
        for p in splits.train.iter().chain(&splits.valid).chain(&splits.test) {
            let s = p.score();
            assert!(s.abs() >= SCORE_MARGIN);
            assert_eq!(p.label, u8::from(s > 0.0));
        }
    }

    #[test]
    fn split_sizes_use_floor_then_remainder() {
        let s = generate(1, 25).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (20, 2, 3));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(3, 200).unwrap(), generate(3, 200).unwrap());
        assert_ne!(generate(3, 200).unwrap(), generate(4, 200).unwrap());
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(matches!(generate(0, 5), Err(DataError::TooFewPoints(5))));
    }

    #[test]
    fn split_file_round_trip() {
        let splits = generate(2, 50).unwrap();
        let header = SplitHeader {
            generator: GENERATOR_VERSION.into(),
            seed: 2,
            split: "test".into(),
            count: splits.test.len(),
        };
        let mut buf = Vec::new();
        write_split(&mut buf, &header, &splits.test).unwrap();
        let (h, pts) = read_split(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(pts, splits.test);
    }

    #[test]
    fn truncated_split_file_rejected() {
        let splits = generate(2, 50).unwrap();
        let header = SplitHeader {
            generator: GENERATOR_VERSION.into(),
            seed: 2,
            split: "test".into(),
            count: splits.test.len() + 1,
        };
        let mut buf = Vec::new();
        write_split(&mut buf, &header, &splits.test).unwrap();
        assert!(matches!(read_split(buf.as_slice()), Err(DataError::Malformed { .. })));
    }
}
