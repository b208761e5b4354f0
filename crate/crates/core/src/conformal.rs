//! Split conformal prediction.
//!
//! Calibration keeps the `⌈(n+1)(1−α)⌉`-th smallest calibration score as the
//! threshold `q_α`; a label belongs to the prediction set when its score is at
//! most `q_α`. Under exchangeability the true label is covered with probability
//! at least `1 − α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::{self, ScoreSpec};

/// Slack used when rounding `(n+1)(1−α)` up and checking `α ≥ 1/(n+1)`, so that
/// products that are integers in exact arithmetic are not pushed up by a rounding
/// error in `1 − α`.
const RANK_SLACK: f64 = 1e-9;

/// 1-based rank `⌈(n+1)(1−α)⌉` of the conformal quantile.
pub fn quantile_rank(n: usize, alpha: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidArgument("no calibration scores".into()));
    }
    let min_alpha = 1.0 / (n as f64 + 1.0);
    if !(alpha < 1.0) || !(alpha >= min_alpha * (1.0 - RANK_SLACK)) {
        return Err(Error::InvalidRisk { alpha, n });
    }
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    let rank = (x - RANK_SLACK).ceil().max(1.0) as usize;
    Ok(rank.min(n))
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {bad}")));
    }
    Ok(())
}

/// Scores sorted ascending.
pub(crate) fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_scores(scores)?;
    let rank = quantile_rank(scores.len(), alpha)?;
    Ok(sorted(scores)[rank - 1])
}

/// Portable result of calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub q_alpha: f64,
    pub alpha: f64,
    pub n_cal: usize,
    /// Radius the threshold was inflated for; 0 for vanilla calibration.
    pub epsilon_calibrated: f64,
    pub lipschitz_product: f64,
    pub score_spec: ScoreSpec,
    /// Number of classes seen at calibration, when known. Lets consumers
    /// reject logits of the wrong width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl CalibrationRecord {
    pub fn validate(&self) -> Result<()> {
        self.score_spec.validated()?;
        quantile_rank(self.n_cal, self.alpha)?;
        if !self.q_alpha.is_finite() {
            return Err(Error::InvalidArgument("q_alpha must be finite".into()));
        }
        if !(self.epsilon_calibrated >= 0.0) || !self.epsilon_calibrated.is_finite() {
            return Err(Error::InvalidArgument(
                "epsilon_calibrated must be >= 0".into(),
            ));
        }
        if !(self.lipschitz_product > 0.0) || !self.lipschitz_product.is_finite() {
            return Err(Error::InvalidArgument(
                "lipschitz_product must be positive".into(),
            ));
        }
        if self.num_classes.is_some_and(|c| c < 2) {
            return Err(Error::InvalidArgument(
                "num_classes must be at least 2".into(),
            ));
        }
        Ok(())
    }

    /// Fails when `width` logits cannot belong to the calibrated label space.
    pub fn check_width(&self, width: usize) -> Result<()> {
        match self.num_classes {
            Some(c) if c != width => Err(Error::Dimension(format!(
                "class-count mismatch: record was calibrated for {c} classes, data has {width}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: CalibrationRecord = serde_json::from_str(text)?;
        rec.validate()?;
        Ok(rec)
    }
}

/// Vanilla calibration from true-label scores.
pub fn calibrate(
    cal_scores: &[f64],
    alpha: f64,
    score_spec: ScoreSpec,
    lipschitz_product: f64,
) -> Result<CalibrationRecord> {
    let rec = CalibrationRecord {
        q_alpha: conformal_quantile(cal_scores, alpha)?,
        alpha,
        n_cal: cal_scores.len(),
        epsilon_calibrated: 0.0,
        lipschitz_product,
        score_spec,
        num_classes: None,
    };
    rec.validate()?;
    Ok(rec)
}

/// True-label scores of a logits matrix.
pub fn true_label_scores(
    spec: &ScoreSpec,
    logits: &[Vec<f64>],
    labels: &[usize],
) -> Result<Vec<f64>> {
    if logits.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| scores::score(spec, l, y))
        .collect()
}

/// Class ids, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub members: Vec<usize>,
}

impl PredictionSet {
    pub fn from_mask(mask: impl IntoIterator<Item = bool>) -> Self {
        Self {
            members: mask
                .into_iter()
                .enumerate()
                .filter_map(|(i, keep)| keep.then_some(i))
                .collect(),
        }
    }

    pub fn contains(&self, y: usize) -> bool {
        self.members.binary_search(&y).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_subset(&self, other: &PredictionSet) -> bool {
        self.members.iter().all(|&y| other.contains(y))
    }
}

/// `{y : s(x, y) ≤ q_α}`.
pub fn prediction_set(cal: &CalibrationRecord, logits: &[f64]) -> PredictionSet {
    PredictionSet::from_mask(
        scores::class_scores(&cal.score_spec, logits)
            .into_iter()
            .map(|s| s <= cal.q_alpha),
    )
}

pub fn empirical_coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    if sets.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} sets for {} labels",
            sets.len(),
            labels.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::InvalidArgument("coverage of an empty sample".into()));
    }
    let hits = sets
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.contains(y))
        .count();
    Ok(hits as f64 / sets.len() as f64)
}

pub fn mean_set_size(sets: &[PredictionSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_examples() {
        let s = [0.4, 0.1, 0.3, 0.2];
        assert_eq!(conformal_quantile(&s, 0.5).unwrap(), 0.3);
        assert_eq!(conformal_quantile(&s, 0.2).unwrap(), 0.4);
        assert!(matches!(
            conformal_quantile(&s, 0.1),
            Err(Error::InvalidRisk { .. })
        ));
        assert!(conformal_quantile(&s, 1.0).is_err());
        assert!(conformal_quantile(&[], 0.5).is_err());
        assert!(conformal_quantile(&[0.1, f64::NAN], 0.5).is_err());
    }

    #[test]
    fn rank_is_exact_for_integral_products() {
        // 10 * 0.9 and 20 * 0.95 are integers in exact arithmetic.
        assert_eq!(quantile_rank(9, 0.1).unwrap(), 9);
        assert_eq!(quantile_rank(19, 0.05).unwrap(), 19);
        assert_eq!(quantile_rank(999, 0.1).unwrap(), 900);
        assert_eq!(quantile_rank(1000, 0.1).unwrap(), 901);
        assert_eq!(quantile_rank(4, 0.2).unwrap(), 4);
    }

    #[test]
    fn duplicate_scores_are_kept() {
        assert_eq!(conformal_quantile(&[0.5, 0.5, 0.5, 0.1], 0.5).unwrap(), 0.5);
    }

    fn record(q: f64) -> CalibrationRecord {
        CalibrationRecord {
            q_alpha: q,
            alpha: 0.1,
            n_cal: 100,
            epsilon_calibrated: 0.0,
            lipschitz_product: 1.0,
            score_spec: ScoreSpec::sigmoid(1.0, 0.0).unwrap(),
            num_classes: None,
        }
    }

    #[test]
    fn set_examples() {
        assert_eq!(
            prediction_set(&record(1.0), &[5.0, -3.0, 0.0]).members,
            vec![0, 1, 2]
        );
        assert!(prediction_set(&record(1e-9), &[1.0, -1.0]).is_empty());
        assert_eq!(prediction_set(&record(0.3), &[2.0, -2.0]).members, vec![0]);
    }

    #[test]
    fn coverage_examples() {
        let full = vec![
            PredictionSet {
                members: vec![0, 1]
            };
            3
        ];
        let empty = vec![PredictionSet::default(); 3];
        assert_eq!(empirical_coverage(&full, &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(empirical_coverage(&empty, &[0, 1, 1]).unwrap(), 0.0);
        assert!(empirical_coverage(&full, &[0]).is_err());
    }

    #[test]
    fn record_json_round_trip_and_validation() {
        let r = record(0.42);
        let back = CalibrationRecord::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut bad = r;
        bad.alpha = 0.001;
        assert!(CalibrationRecord::from_json(&bad.to_json().unwrap()).is_err());
        assert!(CalibrationRecord::from_json(r#"{"q_alpha":1}"#).is_err());
    }
}
