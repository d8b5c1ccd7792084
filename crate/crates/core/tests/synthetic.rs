//! The synthetic task end to end: data, a quickly trained MLP and its
//! explanations against known ground truth.

use dime::data::{generate, ground_truth, DatasetSplits};
use dime::dime::{dime_explain, DimeConfig};
use dime::disentangle::SampleSet;
use dime::gateway::{mlp_train, ModalityValue, Mlp, TrainConfig};
use dime::numerics::{pearson, Rng};
use std::sync::OnceLock;

#[test]
fn label_balance_at_full_scale() {
    let splits = generate(0, 100_000).unwrap();
    let all: Vec<_> = splits.train.iter().chain(&splits.valid).chain(&splits.test).collect();
    let positive = all.iter().filter(|p| p.label == 1).count() as f64 / all.len() as f64;
    // The interaction term is skewed; positives sit near 47.5%.
    assert!((0.465..=0.485).contains(&positive), "positive fraction {positive}");
    assert!(all.iter().all(|p| p.score().abs() >= 0.01));
    assert!(all.iter().all(|p| (p.score() > 0.0) == (p.label == 1)));
}

fn trained() -> &'static (DatasetSplits, Mlp) {
    static MODEL: OnceLock<(DatasetSplits, Mlp)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let splits = generate(3, 20_000).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            ..TrainConfig::default()
        };
        let (mlp, report) = mlp_train(&splits, &cfg).unwrap();
        assert!(report.test_accuracy > 0.9, "{report:?}");
        (splits, mlp)
    })
}

fn test_samples(splits: &DatasetSplits, n: usize) -> SampleSet {
    SampleSet::new(
        splits.test[..n]
            .iter()
            .map(|p| (ModalityValue::Dense(p.d1.clone()), ModalityValue::Dense(p.d2.clone())))
            .collect(),
    )
    .unwrap()
}

#[test]
fn unimodal_explanations_track_their_inputs() {
    let (splits, mlp) = trained();
    let samples = test_samples(splits, 16);
    let cfg = DimeConfig {
        n_samples: 16,
        ..DimeConfig::default()
    };
    let mut uc1 = Vec::new();
    let mut mi1 = Vec::new();
    for k in 0..4 {
        let r = dime_explain(mlp, &samples, k, 1, &cfg).unwrap();
        let truth = ground_truth(&splits.test[k]);
        uc1.push(pearson(&r.uc1.weights, &truth.uc1).unwrap());
        mi1.push(pearson(&r.mi1.weights, &truth.mi).unwrap());
    }
    for r in &uc1 {
        assert!(*r >= 0.9, "{uc1:?}");
    }
    let mean_mi = mi1.iter().sum::<f64>() / mi1.len() as f64;
    assert!(mean_mi >= 0.6, "{mi1:?}");
}

#[test]
fn strongest_interaction_coordinate_tops_mi_ranking() {
    let (splits, mlp) = trained();
    // Pick the test point whose largest |d1*d2| entry stands out most,
    // among entries in the range the network saw plenty of in training.
    let margin = |i: usize| {
        let mut v: Vec<f64> = ground_truth(&splits.test[i]).mi.iter().map(|x| x.abs()).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        if v[0] > 2.5 {
            f64::NEG_INFINITY
        } else {
            v[0] - v[1]
        }
    };
    let point = (0..200).max_by(|&a, &b| margin(a).total_cmp(&margin(b))).unwrap();
    let truth = ground_truth(&splits.test[point]);
    let top = (0..truth.mi.len()).max_by(|&a, &b| truth.mi[a].abs().total_cmp(&truth.mi[b].abs())).unwrap();

    let mut rng = Rng::new(5);
    let mut members = vec![point];
    members.extend(rng.sample_indices(splits.test.len(), 40).into_iter().filter(|&i| i != point).take(31));
    let samples = SampleSet::new(
        members
            .iter()
            .map(|&i| {
                let p = &splits.test[i];
                (ModalityValue::Dense(p.d1.clone()), ModalityValue::Dense(p.d2.clone()))
            })
            .collect(),
    )
    .unwrap();
    let r = dime_explain(mlp, &samples, 0, 1, &DimeConfig::default()).unwrap();
    assert_eq!(r.mi1.ranking()[0], top, "weights {:?}, truth {:?}", r.mi1.weights, truth.mi);
}
