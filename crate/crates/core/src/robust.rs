//! Conservative and restrictive prediction sets.
//!
//! With the vanilla threshold `q_α`:
//!
//! * conservative set `{y : s̲_ε(x, y) ≤ q_α}` keeps every label that some point
//!   of the ε-ball could admit, so it covers the true label with probability
//!   `≥ 1 − α` even when `x` was adversarially perturbed within `ε`;
//! * restrictive set `{y : s̄_ε(x, y) ≤ q_α}` keeps only labels admitted by every
//!   point of the ball.
//!
//! Robust inference is "vanilla threshold, lower-bounded scores". Under the
//! global Lipschitz bound this is the same as calibrating on scores inflated by
//! `L·ε` and testing with plain scores, because the conformal quantile commutes
//! with a constant shift; [`robust_calibrate`] provides that second route.

use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_quantile, CalibrationRecord, PredictionSet};
use crate::error::{Error, Result};
use crate::scores::{self, BoundMethod, BoundSide, ScoreSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustSetPair {
    pub conservative: PredictionSet,
    pub restrictive: PredictionSet,
    pub epsilon: f64,
    pub method: BoundMethod,
}

/// Default bound method for a score: tight when available at no extra cost.
pub fn default_method(_spec: &ScoreSpec) -> BoundMethod {
    BoundMethod::TightMonotone
}

fn member_mask(
    cal: &CalibrationRecord,
    logits: &[f64],
    epsilon: f64,
    method: BoundMethod,
    side: BoundSide,
) -> Result<PredictionSet> {
    let b = scores::class_bounds(
        method,
        side,
        &cal.score_spec,
        logits,
        epsilon,
        cal.lipschitz_product,
    )?;
    Ok(PredictionSet::from_mask(
        b.into_iter().map(|v| v <= cal.q_alpha),
    ))
}

pub fn conservative_set(
    cal: &CalibrationRecord,
    logits: &[f64],
    epsilon: f64,
    method: BoundMethod,
) -> Result<PredictionSet> {
    member_mask(cal, logits, epsilon, method, BoundSide::Lower)
}

pub fn restrictive_set(
    cal: &CalibrationRecord,
    logits: &[f64],
    epsilon: f64,
    method: BoundMethod,
) -> Result<PredictionSet> {
    member_mask(cal, logits, epsilon, method, BoundSide::Upper)
}

pub fn robust_set_pair(
    cal: &CalibrationRecord,
    logits: &[f64],
    epsilon: f64,
    method: BoundMethod,
) -> Result<RobustSetPair> {
    Ok(RobustSetPair {
        conservative: conservative_set(cal, logits, epsilon, method)?,
        restrictive: restrictive_set(cal, logits, epsilon, method)?,
        epsilon,
        method,
    })
}

/// Threshold computed on calibration scores shifted up by `L_total·ε`, where
/// `L_total = L_n·L_s`. Sets are then built with unshifted scores.
pub fn robust_calibrate(
    cal_scores: &[f64],
    alpha: f64,
    epsilon: f64,
    score_spec: ScoreSpec,
    lipschitz_product: f64,
) -> Result<CalibrationRecord> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    let ls = score_spec
        .score_lipschitz()
        .ok_or(Error::UnsupportedMethod {
            method: BoundMethod::GlobalLipschitz.name(),
            score: score_spec.kind.name(),
        })?;
    let shift = lipschitz_product * ls * epsilon;
    let shifted: Vec<f64> = cal_scores.iter().map(|s| s + shift).collect();
    let rec = CalibrationRecord {
        q_alpha: conformal_quantile(&shifted, alpha)?,
        alpha,
        n_cal: cal_scores.len(),
        epsilon_calibrated: epsilon,
        lipschitz_product,
        score_spec,
        num_classes: None,
    };
    rec.validate()?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{calibrate, prediction_set};

    fn spec() -> ScoreSpec {
        ScoreSpec::sigmoid(1.0, 0.0).unwrap()
    }

    fn record(q: f64) -> CalibrationRecord {
        CalibrationRecord {
            q_alpha: q,
            alpha: 0.1,
            n_cal: 100,
            epsilon_calibrated: 0.0,
            lipschitz_product: 1.0,
            score_spec: spec(),
            num_classes: None,
        }
    }

    fn logit_for_score(s: f64) -> f64 {
        scores::sigmoid_inverse_threshold(&spec(), s).unwrap()
    }

    #[test]
    fn zero_radius_matches_vanilla() {
        let cal = record(0.4);
        let logits = [0.9, -0.2, 0.3, 2.0];
        let vanilla = prediction_set(&cal, &logits);
        for m in [BoundMethod::GlobalLipschitz, BoundMethod::TightMonotone] {
            assert_eq!(conservative_set(&cal, &logits, 0.0, m).unwrap(), vanilla);
            assert_eq!(restrictive_set(&cal, &logits, 0.0, m).unwrap(), vanilla);
        }
    }

    #[test]
    fn two_class_arithmetic() {
        // Scores (0.3, 0.6); L_n·L_s·ε = 0.25 · 0.6 = 0.15.
        let cal = record(0.5);
        let logits = [logit_for_score(0.3), logit_for_score(0.6)];
        let cons = conservative_set(&cal, &logits, 0.6, BoundMethod::GlobalLipschitz).unwrap();
        assert_eq!(cons.members, vec![0, 1]);
        let rest = restrictive_set(&cal, &logits, 0.6, BoundMethod::GlobalLipschitz).unwrap();
        assert_eq!(rest.members, vec![0]);
    }

    #[test]
    fn pair_matches_individual_sets() {
        let cal = record(0.45);
        let logits = [0.1, -0.4, 0.6];
        let p = robust_set_pair(&cal, &logits, 0.3, BoundMethod::TightMonotone).unwrap();
        assert_eq!(
            p.conservative,
            conservative_set(&cal, &logits, 0.3, BoundMethod::TightMonotone).unwrap()
        );
        assert_eq!(
            p.restrictive,
            restrictive_set(&cal, &logits, 0.3, BoundMethod::TightMonotone).unwrap()
        );
        assert!(p.restrictive.is_subset(&p.conservative));
    }

    #[test]
    fn robust_calibration_shift() {
        let scores = [0.1, 0.2, 0.3, 0.4];
        let rec = robust_calibrate(&scores, 0.5, 0.1, spec(), 1.0).unwrap();
        assert!((rec.q_alpha - 0.325).abs() < 1e-15);
        assert_eq!(rec.epsilon_calibrated, 0.1);
        let zero = robust_calibrate(&scores, 0.5, 0.0, spec(), 1.0).unwrap();
        assert_eq!(zero, calibrate(&scores, 0.5, spec(), 1.0).unwrap());
        let softmax = ScoreSpec::softmax(1.0).unwrap();
        assert!(robust_calibrate(&scores, 0.5, 0.1, softmax, 1.0).is_err());
    }
}
