//! ℓ2 projected-gradient adversary against conformal membership.
//!
//! The attack ascends `logit(s(x̃, y))`, a strictly increasing transform of the
//! true-label score that does not saturate. Steps are ℓ2-normalised, every
//! iterate is projected back onto the ε-ball, and the best iterate over all
//! restarts is returned.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{prediction_set, CalibrationRecord};
use crate::datasets::{DatasetKind, LabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::lipnet::LipschitzClassifier;
use crate::rng::{self, Rng};
use crate::scores::{self, ScoreBound, ScoreKind, ScoreSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    /// Push the true label out of the prediction set.
    MaximizeTrueScore,
    MinimizeTrueScore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub seed: u64,
    pub objective: AttackObjective,
}

impl AttackConfig {
    /// 40 steps of size ε/4, 3 restarts, maximising the true-label score.
    pub fn new(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            steps: 40,
            step_size: epsilon / 4.0,
            restarts: 3,
            seed,
            objective: AttackObjective::MaximizeTrueScore,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "attack epsilon {}",
                self.epsilon
            )));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument(
                "attack step size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub input: Vec<f64>,
    pub logits: Vec<f64>,
    pub score: f64,
    /// Tight bound at the clean input for the same radius.
    pub bound: ScoreBound,
}

/// `logit(s)` of the true-label score and its gradient in the logits.
fn score_logit(spec: &ScoreSpec, logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let t = spec.temperature;
    let mut g = vec![0.0; logits.len()];
    match spec.kind {
        ScoreKind::LacSigmoid => {
            g[y] = -1.0 / t;
            ((spec.bias - logits[y]) / t, g)
        }
        ScoreKind::LacSoftmax => {
            // logit(1 − p_y) = logsumexp_{j≠y}(z_j) − z_y
            let z: Vec<f64> = logits.iter().map(|l| l / t).collect();
            let max = z
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return (f64::NEG_INFINITY, g);
            }
            let mut sum = 0.0;
            for (j, &v) in z.iter().enumerate() {
                if j != y {
                    g[j] = (v - max).exp();
                    sum += g[j];
                }
            }
            g.iter_mut().for_each(|w| *w /= sum * t);
            g[y] = -1.0 / t;
            (max + sum.ln() - z[y], g)
        }
    }
}

/// Scale `delta` so that `‖(x + δ) − x‖ ≤ ε` holds for the vector actually stored.
fn project(x: &[f64], delta: &mut [f64], epsilon: f64) -> Vec<f64> {
    let n = norm(delta);
    if n > epsilon {
        let s = epsilon / n;
        delta.iter_mut().for_each(|d| *d *= s);
    }
    loop {
        let xt: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
        let realised: Vec<f64> = xt.iter().zip(x).map(|(a, b)| a - b).collect();
        if norm(&realised) <= epsilon {
            return xt;
        }
        delta.iter_mut().for_each(|d| *d *= 1.0 - 1e-12);
    }
}

fn random_in_ball(rng: &mut Rng, dim: usize, epsilon: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&dir);
    if n == 0.0 {
        return vec![0.0; dim];
    }
    let radius = epsilon * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.into_iter().map(|d| d * radius / n).collect()
}

pub fn pgd_attack_with_rng(
    model: &LipschitzClassifier,
    spec: &ScoreSpec,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    let clean = model.forward(x)?;
    let bound = scores::bound_tight(spec, &clean, y, cfg.epsilon, model.lipschitz_product())?;
    if cfg.epsilon == 0.0 {
        let score = scores::score(spec, &clean, y)?;
        return Ok(AttackResult {
            input: x.to_vec(),
            logits: clean,
            score,
            bound,
        });
    }
    let sign = match cfg.objective {
        AttackObjective::MaximizeTrueScore => 1.0,
        AttackObjective::MinimizeTrueScore => -1.0,
    };

    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut delta = if restart == 0 {
            vec![0.0; x.len()]
        } else {
            random_in_ball(rng, x.len(), cfg.epsilon)
        };
        let mut xt = project(x, &mut delta, cfg.epsilon);
        for step in 0..=cfg.steps {
            let logits = model.forward_unchecked(&xt);
            let (obj, cot) = score_logit(spec, &logits, y);
            let obj = sign * obj;
            if best.as_ref().is_none_or(|b| obj > b.0) {
                best = Some((obj, xt.clone(), logits.clone()));
            }
            if step == cfg.steps {
                break;
            }
            let cot: Vec<f64> = cot.iter().map(|c| sign * c).collect();
            let (g, _) = model.vjp(&xt, &cot)?;
            let gn = norm(&g);
            if gn == 0.0 || !gn.is_finite() {
                break;
            }
            delta
                .iter_mut()
                .zip(&g)
                .for_each(|(d, gi)| *d += cfg.step_size * gi / gn);
            xt = project(x, &mut delta, cfg.epsilon);
        }
    }
    let (_, input, logits) = best.expect("at least one iterate");
    let score = scores::score(spec, &logits, y)?;
    debug_assert!(
        score >= bound.lower - 1e-12 && score <= bound.upper + 1e-12,
        "attacked score {score} escapes certified [{}, {}]",
        bound.lower,
        bound.upper
    );
    Ok(AttackResult {
        input,
        logits,
        score,
        bound,
    })
}

pub fn pgd_attack(
    model: &LipschitzClassifier,
    spec: &ScoreSpec,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    pgd_attack_with_rng(model, spec, x, y, cfg, &mut rng::substream(cfg.seed, "pgd"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackEvaluation {
    pub epsilon: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
    pub n: usize,
}

/// Attack every test point (sample `i` uses stream `(seed, "pgd", i)`) and
/// measure vanilla-set coverage and size at the attacked inputs.
pub fn evaluate_under_attack(
    model: &LipschitzClassifier,
    cal: &CalibrationRecord,
    test: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<AttackEvaluation> {
    if test.kind() != DatasetKind::RawInputs {
        return Err(Error::InvalidArgument(
            "attacks need raw input features, not precomputed logits".into(),
        ));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let outcomes = test
        .features()
        .par_iter()
        .zip(test.labels().par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let mut r = rng::indexed_substream(cfg.seed, "pgd", i as u64);
            let adv = pgd_attack_with_rng(model, &cal.score_spec, x, y, cfg, &mut r)?;
            let set = prediction_set(cal, &adv.logits);
            Ok((set.contains(y), set.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = outcomes.len();
    let hits = outcomes.iter().filter(|o| o.0).count();
    let sizes: usize = outcomes.iter().map(|o| o.1).sum();
    Ok(AttackEvaluation {
        epsilon: cfg.epsilon,
        coverage: hits as f64 / n as f64,
        mean_set_size: sizes as f64 / n as f64,
        n,
    })
}

/// Plug-in estimate of the coverage under attack at `cfg.epsilon`.
pub fn coverage_under_attack(
    model: &LipschitzClassifier,
    cal: &CalibrationRecord,
    test: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<f64> {
    Ok(evaluate_under_attack(model, cal, test, cfg)?.coverage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lipnet::build_orthogonal;

    fn sigmoid() -> ScoreSpec {
        ScoreSpec::sigmoid(1.0, 0.0).unwrap()
    }

    #[test]
    fn zero_budget_returns_input() {
        let m = LipschitzClassifier::orthogonal(&[4, 4, 3], 1).unwrap();
        let x = [0.3, -0.1, 0.8, 0.0];
        let r = pgd_attack(&m, &sigmoid(), &x, 1, &AttackConfig::new(0.0, 0)).unwrap();
        assert_eq!(r.input, x.to_vec());
    }

    #[test]
    fn linear_model_reaches_analytic_optimum() {
        let layer = build_orthogonal(5, 3, 8).unwrap();
        let m = LipschitzClassifier::new(vec![layer]).unwrap();
        let x = [0.2, -0.5, 1.0, 0.3, -0.9];
        let eps = 0.4;
        for y in 0..3 {
            let clean = m.forward(&x).unwrap();
            let r = pgd_attack(&m, &sigmoid(), &x, y, &AttackConfig::new(eps, 2)).unwrap();
            assert!((r.logits[y] - (clean[y] - eps)).abs() < 1e-3);
            let mut up = AttackConfig::new(eps, 2);
            up.objective = AttackObjective::MinimizeTrueScore;
            let r = pgd_attack(&m, &sigmoid(), &x, y, &up).unwrap();
            assert!((r.logits[y] - (clean[y] + eps)).abs() < 1e-3);
        }
    }

    #[test]
    fn ball_constraint_and_bounds_hold() {
        let m = LipschitzClassifier::orthogonal(&[6, 6, 6, 4], 3).unwrap();
        let mut rng = rng::substream(9, "test");
        for spec in [sigmoid(), ScoreSpec::softmax(0.5).unwrap()] {
            for i in 0..50 {
                let x: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
                let eps = 0.05 * (i % 10) as f64 + 0.01;
                let r =
                    pgd_attack(&m, &spec, &x, i % 4, &AttackConfig::new(eps, i as u64)).unwrap();
                let d: Vec<f64> = r.input.iter().zip(&x).map(|(a, b)| a - b).collect();
                assert!(norm(&d) <= eps);
                assert!(r.score >= r.bound.lower - 1e-12 && r.score <= r.bound.upper + 1e-12);
            }
        }
    }

    #[test]
    fn softmax_score_logit_gradient_matches_differences() {
        let spec = ScoreSpec::softmax(0.7).unwrap();
        let l = [0.3, -1.0, 0.9, 0.2];
        let (_, g) = score_logit(&spec, &l, 2);
        for j in 0..4 {
            let h = 1e-6;
            let mut a = l;
            let mut b = l;
            a[j] += h;
            b[j] -= h;
            let fd = (score_logit(&spec, &a, 2).0 - score_logit(&spec, &b, 2).0) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6);
        }
        let s = scores::score(&spec, &l, 2).unwrap();
        assert!((score_logit(&spec, &l, 2).0 - (s / (1.0 - s)).ln()).abs() < 1e-12);
    }
}
