//! Non-conformity scores and certified bounds over ℓ2 input balls.
//!
//! Two LAC-style scores are supported:
//!
//! * sigmoid: `s(x, y) = 1 − σ((f(x)_y − b) / T)`, which is `1/(4T)`-Lipschitz in
//!   the target logit;
//! * softmax: `s(x, y) = 1 − softmax(f(x) / T)_y`.
//!
//! For an `L_n`-Lipschitz model every logit moves by at most `L_n·ε` when the
//! input moves by `ε`. [`bound_global`] turns that into `s ± L_n·L_s·ε`;
//! [`bound_tight`] instead pushes the logits to the edge of that range and
//! re-evaluates the score, which is never looser because the scores are
//! monotone in each logit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    LacSigmoid,
    LacSoftmax,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::LacSigmoid => "lac_sigmoid",
            ScoreKind::LacSoftmax => "lac_softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    pub temperature: f64,
    /// Logit offset; only used by the sigmoid score.
    #[serde(default)]
    pub bias: f64,
}

impl Default for ScoreSpec {
    fn default() -> Self {
        Self::sigmoid(1.0, 0.0).expect("default temperature is positive")
    }
}

impl ScoreSpec {
    pub fn sigmoid(temperature: f64, bias: f64) -> Result<Self> {
        Self {
            kind: ScoreKind::LacSigmoid,
            temperature,
            bias,
        }
        .validated()
    }

    pub fn softmax(temperature: f64) -> Result<Self> {
        Self {
            kind: ScoreKind::LacSoftmax,
            temperature,
            bias: 0.0,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "score temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.bias.is_finite() {
            return Err(Error::InvalidArgument("score bias must be finite".into()));
        }
        Ok(self)
    }

    /// Lipschitz constant of the score in the target logit, `1/(4T)` for the
    /// sigmoid score. `None` for softmax.
    pub fn score_lipschitz(&self) -> Option<f64> {
        match self.kind {
            ScoreKind::LacSigmoid => Some(1.0 / (4.0 * self.temperature)),
            ScoreKind::LacSoftmax => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    GlobalLipschitz,
    TightMonotone,
}

impl BoundMethod {
    pub fn name(self) -> &'static str {
        match self {
            BoundMethod::GlobalLipschitz => "global_lipschitz",
            BoundMethod::TightMonotone => "tight_monotone",
        }
    }
}

/// Certified range of the score over the ε-ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBound {
    /// Conservative score: no point of the ball scores lower.
    pub lower: f64,
    /// Restrictive score: no point of the ball scores higher.
    pub upper: f64,
    pub method: BoundMethod,
    pub epsilon: f64,
    pub lipschitz_product: f64,
}

/// `1 − σ(z) = σ(−z)`, evaluated without cancellation.
pub fn one_minus_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

fn check_class(logits: &[f64], y: usize) -> Result<()> {
    if y >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class {y} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(())
}

/// `1 − softmax(z)_y` for already-scaled logits `z`.
fn softmax_complement(z: &[f64], y: usize) -> f64 {
    // 1 − p_y = Σ_{j≠y} e^{z_j − z_y} / (1 + Σ_{j≠y} e^{z_j − z_y}), shifted by
    // the largest exponent so nothing overflows.
    let others_max = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v - z[y])
        .fold(f64::NEG_INFINITY, f64::max);
    if others_max == f64::NEG_INFINITY {
        return 0.0;
    }
    let shift = others_max.max(0.0);
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| (v - z[y] - shift).exp())
        .sum();
    rest / ((-shift).exp() + rest)
}

fn score_unchecked(spec: &ScoreSpec, logits: &[f64], y: usize) -> f64 {
    match spec.kind {
        ScoreKind::LacSigmoid => one_minus_sigmoid((logits[y] - spec.bias) / spec.temperature),
        ScoreKind::LacSoftmax => {
            let z: Vec<f64> = logits.iter().map(|l| l / spec.temperature).collect();
            softmax_complement(&z, y)
        }
    }
}

pub fn score(spec: &ScoreSpec, logits: &[f64], y: usize) -> Result<f64> {
    check_class(logits, y)?;
    Ok(score_unchecked(spec, logits, y))
}

/// Scores of every class.
pub fn class_scores(spec: &ScoreSpec, logits: &[f64]) -> Vec<f64> {
    match spec.kind {
        ScoreKind::LacSigmoid => logits
            .iter()
            .map(|l| one_minus_sigmoid((l - spec.bias) / spec.temperature))
            .collect(),
        ScoreKind::LacSoftmax => {
            let z: Vec<f64> = logits.iter().map(|l| l / spec.temperature).collect();
            (0..z.len()).map(|y| softmax_complement(&z, y)).collect()
        }
    }
}

fn check_radius(epsilon: f64, lipschitz_product: f64) -> Result<()> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    if !(lipschitz_product > 0.0) || !lipschitz_product.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Lipschitz product must be positive, got {lipschitz_product}"
        )));
    }
    Ok(())
}

/// `s ∓ L_n·L_s·ε`, clipped to `[0, 1]`. Sigmoid score only.
pub fn bound_global(
    spec: &ScoreSpec,
    logits: &[f64],
    y: usize,
    epsilon: f64,
    lipschitz_product: f64,
) -> Result<ScoreBound> {
    check_class(logits, y)?;
    check_radius(epsilon, lipschitz_product)?;
    let ls = spec.score_lipschitz().ok_or(Error::UnsupportedMethod {
        method: BoundMethod::GlobalLipschitz.name(),
        score: spec.kind.name(),
    })?;
    let s = score_unchecked(spec, logits, y);
    let radius = lipschitz_product * ls * epsilon;
    Ok(ScoreBound {
        lower: (s - radius).clamp(0.0, 1.0),
        upper: (s + radius).clamp(0.0, 1.0),
        method: BoundMethod::GlobalLipschitz,
        epsilon,
        lipschitz_product,
    })
}

/// Score re-evaluated at the extreme logits reachable within `L_n·ε`.
pub fn bound_tight(
    spec: &ScoreSpec,
    logits: &[f64],
    y: usize,
    epsilon: f64,
    lipschitz_product: f64,
) -> Result<ScoreBound> {
    check_class(logits, y)?;
    check_radius(epsilon, lipschitz_product)?;
    let r = lipschitz_product * epsilon;
    let (lower, upper) = match spec.kind {
        ScoreKind::LacSigmoid => {
            let t = spec.temperature;
            let l = logits[y] - spec.bias;
            (
                one_minus_sigmoid((l + r) / t),
                one_minus_sigmoid((l - r) / t),
            )
        }
        ScoreKind::LacSoftmax => {
            let t = spec.temperature;
            let corner = |sign: f64| -> Vec<f64> {
                logits
                    .iter()
                    .enumerate()
                    .map(|(j, l)| {
                        if j == y {
                            (l + sign * r) / t
                        } else {
                            (l - sign * r) / t
                        }
                    })
                    .collect()
            };
            (
                softmax_complement(&corner(1.0), y),
                softmax_complement(&corner(-1.0), y),
            )
        }
    };
    Ok(ScoreBound {
        lower,
        upper,
        method: BoundMethod::TightMonotone,
        epsilon,
        lipschitz_product,
    })
}

pub fn bound(
    method: BoundMethod,
    spec: &ScoreSpec,
    logits: &[f64],
    y: usize,
    epsilon: f64,
    lipschitz_product: f64,
) -> Result<ScoreBound> {
    match method {
        BoundMethod::GlobalLipschitz => bound_global(spec, logits, y, epsilon, lipschitz_product),
        BoundMethod::TightMonotone => bound_tight(spec, logits, y, epsilon, lipschitz_product),
    }
}

/// Which end of a [`ScoreBound`] to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSide {
    Lower,
    Upper,
}

/// One side of the bound for every class, validated once. Equal to mapping
/// [`bound`] over the classes and keeping `lower` or `upper`.
pub fn class_bounds(
    method: BoundMethod,
    side: BoundSide,
    spec: &ScoreSpec,
    logits: &[f64],
    epsilon: f64,
    lipschitz_product: f64,
) -> Result<Vec<f64>> {
    check_radius(epsilon, lipschitz_product)?;
    let sign = match side {
        BoundSide::Lower => -1.0,
        BoundSide::Upper => 1.0,
    };
    match (method, spec.kind) {
        (BoundMethod::GlobalLipschitz, ScoreKind::LacSoftmax) => Err(Error::UnsupportedMethod {
            method: method.name(),
            score: spec.kind.name(),
        }),
        (BoundMethod::GlobalLipschitz, ScoreKind::LacSigmoid) => {
            let ls = spec.score_lipschitz().expect("sigmoid score");
            let radius = lipschitz_product * ls * epsilon;
            Ok(class_scores(spec, logits)
                .into_iter()
                .map(|s| (s + sign * radius).clamp(0.0, 1.0))
                .collect())
        }
        (BoundMethod::TightMonotone, ScoreKind::LacSigmoid) => {
            let r = lipschitz_product * epsilon;
            Ok(logits
                .iter()
                .map(|l| one_minus_sigmoid((l - spec.bias - sign * r) / spec.temperature))
                .collect())
        }
        (BoundMethod::TightMonotone, ScoreKind::LacSoftmax) => (0..logits.len())
            .map(|y| {
                bound_tight(spec, logits, y, epsilon, lipschitz_product).map(|b| match side {
                    BoundSide::Lower => b.lower,
                    BoundSide::Upper => b.upper,
                })
            })
            .collect(),
    }
}

/// Logit at which the sigmoid score equals `q`: `b + T·logit(1 − q)`.
pub fn sigmoid_inverse_threshold(spec: &ScoreSpec, q: f64) -> Result<f64> {
    if spec.kind != ScoreKind::LacSigmoid {
        return Err(Error::InvalidArgument(
            "threshold inversion needs the sigmoid score".into(),
        ));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "q must lie in (0,1), got {q}"
        )));
    }
    // logit(1 − q) = ln((1 − q)/q)
    Ok(spec.bias + spec.temperature * ((1.0 - q) / q).ln())
}
