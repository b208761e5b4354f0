//! Calibration-time feature poisoning certificates.
//!
//! An attacker perturbs the features of at most `k` calibration points by at
//! most `ε` in ℓ2. With an `L_n`-Lipschitz model and an `L_s`-Lipschitz score,
//! each of those scores moves by at most `Δ = L_n·L_s·ε`. The conformal
//! quantile is the `r`-th order statistic with `r = ⌈(n+1)(1−α)⌉`, which is
//! non-decreasing in every score, so extreme shifts are optimal:
//!
//! The `r`-th statistic of the shifted scores is at least `v` exactly when
//! fewer than `r` of them stay below `v`. Counting which scores can be pushed
//! across `v` gives closed forms, with `s_(j)` the sorted scores:
//!
//! * `q_max = min(s_(r) + Δ, s_(r+k))`, reached by raising the `k` largest
//!   scores below that value;
//! * `q_min = max(s_(r) − Δ, s_(r−k))`, by lowering the `k` smallest above it.
//!
//! Out-of-range order statistics are dropped from the `min`/`max`.

use serde::{Deserialize, Serialize};

use crate::conformal::{quantile_rank, sorted, CalibrationRecord};
use crate::error::{Error, Result};
use crate::scores::ScoreSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoisonBudget {
    pub k: usize,
    pub epsilon: f64,
    /// Largest possible change of a single score, `L_n·L_s·ε`.
    pub delta_score: f64,
}

impl PoisonBudget {
    pub fn new(
        k: usize,
        epsilon: f64,
        lipschitz_product: f64,
        score_lipschitz: f64,
    ) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be >= 0, got {epsilon}"
            )));
        }
        if !(lipschitz_product > 0.0) || !(score_lipschitz > 0.0) {
            return Err(Error::InvalidArgument(
                "Lipschitz constants must be positive".into(),
            ));
        }
        Ok(Self {
            k,
            epsilon,
            delta_score: lipschitz_product * score_lipschitz * epsilon,
        })
    }

    /// Budget for a score spec with a known score-Lipschitz constant.
    pub fn for_spec(
        k: usize,
        epsilon: f64,
        lipschitz_product: f64,
        spec: &ScoreSpec,
    ) -> Result<Self> {
        let ls = spec.score_lipschitz().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no score-Lipschitz constant for {}; poisoning budget undefined",
                spec.kind.name()
            ))
        })?;
        Self::new(k, epsilon, lipschitz_product, ls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileShiftCertificate {
    pub q_min: f64,
    pub q_max: f64,
    pub q_nominal: f64,
    pub rank: usize,
    #[serde(flatten)]
    pub budget: PoisonBudget,
    /// Whether shifted scores were confined to `[0, 1]`.
    #[serde(skip)]
    pub clipped: bool,
}

/// Exact range of the conformal quantile under a `(k, Δ)` poisoning budget.
/// With `clip`, shifted scores are kept inside `[0, 1]`.
pub fn quantile_shift(
    scores: &[f64],
    alpha: f64,
    budget: &PoisonBudget,
    clip: bool,
) -> Result<QuantileShiftCertificate> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no calibration scores".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {bad}")));
    }
    let n = scores.len();
    if budget.k > n {
        return Err(Error::InvalidArgument(format!(
            "poisoning budget k={} exceeds n={n}",
            budget.k
        )));
    }
    if !(budget.delta_score >= 0.0) || !budget.delta_score.is_finite() {
        return Err(Error::InvalidArgument("delta_score must be >= 0".into()));
    }
    let r = quantile_rank(n, alpha)?;
    let s = sorted(scores);
    let q_nominal = s[r - 1];
    let d = budget.delta_score;

    let raise = |v: f64| if clip { (v + d).min(1.0).max(v) } else { v + d };
    let lower = |v: f64| if clip { (v - d).max(0.0).min(v) } else { v - d };

    let k = budget.k;
    let q_max = if k == 0 {
        q_nominal
    } else {
        let raised = raise(q_nominal);
        if r + k <= n {
            raised.min(s[r + k - 1])
        } else {
            raised
        }
    };
    let q_min = if k == 0 {
        q_nominal
    } else {
        let lowered = lower(q_nominal);
        if k < r {
            lowered.max(s[r - k - 1])
        } else {
            lowered
        }
    };

    Ok(QuantileShiftCertificate {
        q_min,
        q_max,
        q_nominal,
        rank: r,
        budget: *budget,
        clipped: clip,
    })
}

/// Calibration that uses the pessimistic quantile `q_max` of the (possibly
/// poisoned) scores. Since the clean scores lie within the budget of the
/// observed ones, the clean quantile never exceeds the returned threshold.
pub fn poison_robust_calibrate(
    scores: &[f64],
    alpha: f64,
    budget: &PoisonBudget,
    score_spec: ScoreSpec,
    lipschitz_product: f64,
) -> Result<CalibrationRecord> {
    let cert = quantile_shift(scores, alpha, budget, true)?;
    let rec = CalibrationRecord {
        q_alpha: cert.q_max,
        alpha,
        n_cal: scores.len(),
        epsilon_calibrated: 0.0,
        lipschitz_product,
        score_spec,
        num_classes: None,
    };
    rec.validate()?;
    Ok(rec)
}
