mod common;

use liprcp::conformal::{
    calibrate, conformal_quantile, empirical_coverage, prediction_set, quantile_rank,
    true_label_scores,
};
use liprcp::datasets::{make_gaussian_mixture, split, SplitPlan};
use liprcp::lipnet::LipschitzClassifier;
use liprcp::scores::{score, ScoreSpec};
use proptest::prelude::*;

/// Fixed random orthogonal network on a 4-class mixture.
fn logits_task(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let data = make_gaussian_mixture(n, 8, 4, 3.0, seed).unwrap();
    let model = LipschitzClassifier::orthogonal(&[8, 8, 4], 99).unwrap();
    (
        model.forward_batch(data.features()).unwrap(),
        data.labels().to_vec(),
    )
}

fn coverage_once(
    logits: &[Vec<f64>],
    labels: &[usize],
    n_cal: usize,
    alpha: f64,
    spec: ScoreSpec,
) -> f64 {
    let cal_scores = true_label_scores(&spec, &logits[..n_cal], &labels[..n_cal]).unwrap();
    let rec = calibrate(&cal_scores, alpha, spec, 1.0).unwrap();
    let sets: Vec<_> = logits[n_cal..]
        .iter()
        .map(|l| prediction_set(&rec, l))
        .collect();
    empirical_coverage(&sets, &labels[n_cal..]).unwrap()
}

#[test]
fn mean_coverage_tracks_nominal_level() {
    let spec = ScoreSpec::softmax(1.0).unwrap();
    for alpha in [0.05, 0.1, 0.2] {
        let covs: Vec<f64> = (0..100)
            .map(|seed| {
                let (l, y) = logits_task(2000, 1000 + seed);
                coverage_once(&l, &y, 1000, alpha, spec)
            })
            .collect();
        let mean = covs.iter().sum::<f64>() / covs.len() as f64;
        assert!(
            mean >= 1.0 - alpha - 0.01 && mean <= 1.0 - alpha + 0.015,
            "alpha {alpha}: mean coverage {mean}"
        );
    }
}

#[test]
fn permutation_spread_is_binomial() {
    // Re-splitting one fixed pool: the coverage spread should match the
    // variance α(1−α)(1/n_test + 1/(n_cal+2)) of split conformal coverage.
    let (n_cal, n_test, alpha) = (500usize, 500usize, 0.1);
    let data = make_gaussian_mixture(n_cal + n_test, 8, 4, 3.0, 5).unwrap();
    let model = LipschitzClassifier::orthogonal(&[8, 8, 4], 99).unwrap();
    let spec = ScoreSpec::sigmoid(1.0, 0.0).unwrap();
    let covs: Vec<f64> = (0..50)
        .map(|seed| {
            let plan = SplitPlan {
                cal: 0.5,
                eval: 0.0,
                test: 0.5,
                seed,
            };
            let s = split(&data, &plan).unwrap();
            let cal_logits = model.forward_batch(s.cal.features()).unwrap();
            let test_logits = model.forward_batch(s.test.features()).unwrap();
            let mut l = cal_logits;
            l.extend(test_logits);
            let mut y = s.cal.labels().to_vec();
            y.extend_from_slice(s.test.labels());
            coverage_once(&l, &y, n_cal, alpha, spec)
        })
        .collect();
    let mean = covs.iter().sum::<f64>() / 50.0;
    let sd = (covs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 49.0).sqrt();
    let theory =
        (alpha * (1.0 - alpha) * (1.0 / n_test as f64 + 1.0 / (n_cal as f64 + 2.0))).sqrt();
    assert!(
        sd > 0.5 * theory && sd < 1.6 * theory,
        "sd {sd} vs {theory}"
    );
}

#[test]
fn in_sample_coverage_is_conservative() {
    let (l, y) = logits_task(300, 77);
    let spec = ScoreSpec::sigmoid(1.0, 0.0).unwrap();
    let s = true_label_scores(&spec, &l, &y).unwrap();
    let rec = calibrate(&s, 0.1, spec, 1.0).unwrap();
    let sets: Vec<_> = l.iter().map(|x| prediction_set(&rec, x)).collect();
    assert!(empirical_coverage(&sets, &y).unwrap() >= 0.9);
}

proptest! {
    #[test]
    fn rank_matches_exact_rational(n in 1usize..2000, num in 1u64..1000) {
        let den = 1000u64;
        let alpha = num as f64 / den as f64;
        if (num as usize) * (n + 1) >= den as usize {
            let r = quantile_rank(n, alpha).unwrap();
            prop_assert_eq!(r, common::oracles::exact_rank(n, num, den).clamp(1, n));
        } else {
            prop_assert!(quantile_rank(n, alpha).is_err());
        }
    }

    #[test]
    fn quantile_is_the_ranked_order_statistic(
        scores in prop::collection::vec(0.0f64..1.0, 1..60), a in 0.0f64..1.0,
    ) {
        let n = scores.len();
        let alpha = 1.0 / (n as f64 + 1.0) + a * (1.0 - 1.0 / (n as f64 + 1.0)) * 0.999;
        let q = conformal_quantile(&scores, alpha).unwrap();
        let r = quantile_rank(n, alpha).unwrap();
        prop_assert_eq!(q, common::oracles::quantile_at_rank(&scores, r));
        // At least r scores are ≤ q, and fewer than r are < q.
        prop_assert!(scores.iter().filter(|&&s| s <= q).count() >= r);
        prop_assert!(scores.iter().filter(|&&s| s < q).count() < r);
    }

    #[test]
    fn smaller_risk_gives_larger_sets(
        scores in prop::collection::vec(0.0f64..1.0, 20..80),
        logits in prop::collection::vec(-3.0f64..3.0, 2..6),
        a1 in 0.05f64..0.9, a2 in 0.05f64..0.9,
    ) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let spec = ScoreSpec::sigmoid(1.0, 0.0).unwrap();
        let strict = calibrate(&scores, lo, spec, 1.0).unwrap();
        let loose = calibrate(&scores, hi, spec, 1.0).unwrap();
        prop_assert!(strict.q_alpha >= loose.q_alpha);
        prop_assert!(prediction_set(&loose, &logits).is_subset(&prediction_set(&strict, &logits)));
    }

    #[test]
    fn membership_is_threshold_consistent(
        logits in prop::collection::vec(-4.0f64..4.0, 2..8), q in 0.0f64..1.0, softmax in any::<bool>(),
    ) {
        let spec = if softmax { ScoreSpec::softmax(0.9).unwrap() } else { ScoreSpec::sigmoid(0.9, 0.3).unwrap() };
        let rec = liprcp::conformal::CalibrationRecord {
            q_alpha: q,
            alpha: 0.5,
            n_cal: 10,
            epsilon_calibrated: 0.0,
            lipschitz_product: 1.0,
            score_spec: spec,
            num_classes: None,
        };
        let set = prediction_set(&rec, &logits);
        for y in 0..logits.len() {
            prop_assert_eq!(set.contains(y), score(&spec, &logits, y).unwrap() <= q);
        }
    }
}
