//! Certified coverage bands for vanilla conformal prediction under attack.
//!
//! For a held-out evaluation sample of size `m`, every point has a radius at
//! which its true label *enters* the conservative set and a radius at which it
//! *leaves* the restrictive set. Because the score bounds are monotone in `ε`,
//! membership flips exactly once, so the empirical curves
//!
//! * `covmax_m(ε)` — fraction of true labels in the conservative set,
//! * `covmin_m(ε)` — fraction of true labels in the restrictive set,
//!
//! are step functions computed exactly by sorting those radii. Inverting the
//! binomial tail turns the empirical fractions into `covmax⁺` / `covmin⁻`, and
//! with risk `δ' = δ/(2m−2)` plus a `±1/m` correction the pair brackets the
//! coverage under *any* attack simultaneously for all `ε`, with probability at
//! least `1 − δ` over the evaluation sample.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::CalibrationRecord;
use crate::error::{Error, Result};
use crate::scores::{self, BoundMethod, ScoreKind};

/// Stopping width of the binomial bisection.
pub const BINOMIAL_TOL: f64 = 1e-12;
pub const BINOMIAL_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Continuity {
    RightContinuous,
    LeftContinuous,
}

/// Piecewise-constant function on `[0, ∞)`.
///
/// `breakpoints` is strictly increasing and starts at 0.
/// * Right-continuous: `values[j]` holds on `[b_j, b_{j+1})`; one value per breakpoint.
/// * Left-continuous: `values[0]` is the value at 0, `values[j]` holds on
///   `(b_{j-1}, b_j]` and the last value on `(b_last, ∞)`; one more value than
///   breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCurve {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    pub continuity: Continuity,
}

impl StepCurve {
    pub fn eval(&self, epsilon: f64) -> f64 {
        match self.continuity {
            Continuity::RightContinuous => {
                let j = self.breakpoints.partition_point(|&b| b <= epsilon);
                self.values[j.saturating_sub(1)]
            }
            Continuity::LeftContinuous => {
                let j = self.breakpoints.partition_point(|&b| b < epsilon);
                self.values[j]
            }
        }
    }
}

/// Per-sample radii at which true-label membership flips.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalEpsilons {
    /// Smallest ε at which the true label is in the conservative set (`≥ 0`,
    /// `+∞` if never).
    pub entry: Vec<f64>,
    /// Largest ε at which the true label is still in the restrictive set.
    /// Negative means never a member; `+∞` means always.
    pub exit: Vec<f64>,
    /// Method actually used (the tight sigmoid path falls back to the global
    /// one when `q_α ∉ (0, 1)`).
    pub method: BoundMethod,
    pub fell_back: bool,
}

impl CriticalEpsilons {
    pub fn len(&self) -> usize {
        self.entry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry.is_empty()
    }
}

/// Global bound: `s ∓ L·ε` against `q`, with `L = L_n·L_s`.
fn global_thresholds(s: f64, q: f64, l: f64) -> (f64, f64) {
    let entry = if s <= q {
        0.0
    } else if q < 0.0 {
        f64::INFINITY
    } else {
        (s - q) / l
    };
    let exit = if q >= 1.0 { f64::INFINITY } else { (q - s) / l };
    (entry, exit)
}

/// Smallest radius in `(lo, ∞)` where the monotone predicate turns true,
/// returned from below (the last radius known false, or `lo`).
fn bisect_radius(mut pred: impl FnMut(f64) -> bool) -> f64 {
    let mut hi = 1.0;
    let mut expansions = 0;
    while !pred(hi) {
        hi *= 2.0;
        expansions += 1;
        if expansions > 1100 || !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Entry and exit radii of every evaluation point.
pub fn critical_epsilons(
    cal: &CalibrationRecord,
    eval_logits: &[Vec<f64>],
    labels: &[usize],
    method: BoundMethod,
) -> Result<CriticalEpsilons> {
    if eval_logits.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} labels",
            eval_logits.len(),
            labels.len()
        )));
    }
    let spec = cal.score_spec;
    let q = cal.q_alpha;
    let ln = cal.lipschitz_product;

    let mut used = method;
    let mut fell_back = false;
    if method == BoundMethod::GlobalLipschitz && spec.kind == ScoreKind::LacSoftmax {
        return Err(Error::UnsupportedMethod {
            method: method.name(),
            score: spec.kind.name(),
        });
    }
    if method == BoundMethod::TightMonotone
        && spec.kind == ScoreKind::LacSigmoid
        && !(q > 0.0 && q < 1.0)
    {
        used = BoundMethod::GlobalLipschitz;
        fell_back = true;
    }

    let mut entry = Vec::with_capacity(labels.len());
    let mut exit = Vec::with_capacity(labels.len());
    for (logits, &y) in eval_logits.iter().zip(labels) {
        let s = scores::score(&spec, logits, y)?;
        let (e_in, e_out) = match (used, spec.kind) {
            (BoundMethod::GlobalLipschitz, _) => {
                let ls = spec.score_lipschitz().expect("sigmoid score");
                global_thresholds(s, q, ln * ls)
            }
            (BoundMethod::TightMonotone, ScoreKind::LacSigmoid) => {
                let t = scores::sigmoid_inverse_threshold(&spec, q)?;
                let l = logits[y];
                if s <= q {
                    (0.0, ((l - t) / ln).max(0.0))
                } else {
                    (
                        ((t - l) / ln).max(0.0),
                        ((l - t) / ln).min(-f64::MIN_POSITIVE),
                    )
                }
            }
            (BoundMethod::TightMonotone, ScoreKind::LacSoftmax) => {
                let lower = |e: f64| scores::bound_tight(&spec, logits, y, e, ln).map(|b| b.lower);
                let upper = |e: f64| scores::bound_tight(&spec, logits, y, e, ln).map(|b| b.upper);
                if s <= q {
                    let out = bisect_radius(|e| upper(e).map_or(true, |u| u > q));
                    (0.0, out)
                } else {
                    let e_in = bisect_radius(|e| lower(e).is_ok_and(|v| v <= q));
                    (e_in, -1.0)
                }
            }
        };
        entry.push(e_in);
        exit.push(e_out);
    }
    Ok(CriticalEpsilons {
        entry,
        exit,
        method: used,
        fell_back,
    })
}

/// Empirical curves plus the underlying member counts per breakpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCurves {
    pub m: usize,
    /// `covmax_m`: right-continuous, non-decreasing.
    pub covmax: StepCurve,
    /// `covmin_m`: left-continuous, non-increasing.
    pub covmin: StepCurve,
    pub covmax_counts: Vec<usize>,
    pub covmin_counts: Vec<usize>,
}

pub fn coverage_curves(crit: &CriticalEpsilons) -> Result<CoverageCurves> {
    let m = crit.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no evaluation points".into()));
    }
    let mf = m as f64;

    // covmax: count of entry ≤ ε.
    let mut entries: Vec<f64> = crit
        .entry
        .iter()
        .copied()
        .filter(|e| e.is_finite())
        .collect();
    entries.sort_by(f64::total_cmp);
    let mut bp = vec![0.0];
    let mut counts = vec![entries.partition_point(|&e| e <= 0.0)];
    let mut i = counts[0];
    while i < entries.len() {
        let b = entries[i];
        while i < entries.len() && entries[i] == b {
            i += 1;
        }
        bp.push(b);
        counts.push(i);
    }
    let covmax = StepCurve {
        breakpoints: bp,
        values: counts.iter().map(|&c| c as f64 / mf).collect(),
        continuity: Continuity::RightContinuous,
    };

    // covmin: count of exit ≥ ε.
    let mut exits: Vec<f64> = crit.exit.iter().copied().filter(|&e| e >= 0.0).collect();
    exits.sort_by(f64::total_cmp);
    let always = exits.iter().filter(|e| e.is_infinite()).count();
    let finite_pos: Vec<f64> = exits
        .iter()
        .copied()
        .filter(|&e| e > 0.0 && e.is_finite())
        .collect();
    let mut bp = vec![0.0];
    let mut min_counts = vec![exits.len()];
    let mut j = 0;
    while j < finite_pos.len() {
        let b = finite_pos[j];
        // members at b: exits ≥ b
        min_counts.push(finite_pos.len() - j + always);
        while j < finite_pos.len() && finite_pos[j] == b {
            j += 1;
        }
        bp.push(b);
    }
    min_counts.push(always);
    let covmin = StepCurve {
        breakpoints: bp,
        values: min_counts.iter().map(|&c| c as f64 / mf).collect(),
        continuity: Continuity::LeftContinuous,
    };

    Ok(CoverageCurves {
        m,
        covmax,
        covmin,
        covmax_counts: counts,
        covmin_counts: min_counts,
    })
}

/// Binomial(m, p) CDF at k, summed in log space.
pub fn binomial_cdf(m: u64, p: f64, k: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "p must lie in [0,1], got {p}"
        )));
    }
    if k > m {
        return Err(Error::InvalidArgument(format!("k={k} exceeds m={m}")));
    }
    Ok(BinomialTail::new(m, k).cdf(p))
}

/// `ln C(m, j)` for `j = 0..=k`, reused across evaluations at different `p`.
struct BinomialTail {
    m: u64,
    k: u64,
    ln_choose: Vec<f64>,
}

impl BinomialTail {
    fn new(m: u64, k: u64) -> Self {
        let mut ln_choose = Vec::with_capacity(k as usize + 1);
        // Compensated running sum of ln((m − j + 1)/j).
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        ln_choose.push(0.0);
        for j in 1..=k {
            let term = ((m - j + 1) as f64).ln() - (j as f64).ln() - comp;
            let t = sum + term;
            comp = (t - sum) - term;
            sum = t;
            ln_choose.push(sum);
        }
        Self { m, k, ln_choose }
    }

    /// Sums outward from the largest term `j*` using the term ratio
    /// `t_{j+1}/t_j = (m−j)/(j+1) · p/(1−p)`, stopping once a term falls
    /// below `1e-17` of the running sum. Costs `O(√m)` terms, not `O(k)`.
    fn cdf(&self, p: f64) -> f64 {
        if self.k >= self.m || p == 0.0 {
            return 1.0;
        }
        if p == 1.0 {
            return 0.0;
        }
        let m = self.m as f64;
        let lp = p.ln();
        let lq = (-p).ln_1p();
        let odds = (lp - lq).exp();
        let jm = (((m + 1.0) * p).floor() as u64).min(self.k);
        let log_peak = self.ln_choose[jm as usize] + jm as f64 * lp + (m - jm as f64) * lq;
        let mut sum = 1.0;
        let mut t = 1.0;
        for j in (1..=jm).rev() {
            t *= j as f64 / ((self.m - j + 1) as f64 * odds);
            sum += t;
            if t < 1e-17 * sum {
                break;
            }
        }
        t = 1.0;
        for j in jm..self.k {
            t *= (self.m - j) as f64 / (j + 1) as f64 * odds;
            sum += t;
            if t < 1e-17 * sum {
                break;
            }
        }
        (log_peak.exp() * sum).min(1.0)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0,1), got {delta}"
        )));
    }
    Ok(())
}

/// `max{p ∈ [0,1] : F_{m,p}(count) ≥ δ}`, an upper confidence bound on a
/// binomial proportion after observing `count` successes out of `m`.
pub fn covmax_plus(m: u64, count: u64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if m == 0 || count > m {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= count <= m, m >= 1; got {count}/{m}"
        )));
    }
    if count == m {
        return Ok(1.0);
    }
    if count == 0 {
        // (1 − p)^m ≥ δ  ⇔  p ≤ 1 − δ^{1/m}
        return Ok(-(delta.ln() / m as f64).exp_m1());
    }
    let tail = BinomialTail::new(m, count);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..BINOMIAL_MAX_ITERS {
        if hi - lo <= BINOMIAL_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if tail.cdf(mid) >= delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// `1 − max{p ∈ [0,1] : F_{m,p}(miss_count) ≥ δ}`, a lower confidence bound on
/// the success proportion after `miss_count` failures out of `m`.
pub fn covmin_minus(m: u64, miss_count: u64, delta: f64) -> Result<f64> {
    Ok(1.0 - covmax_plus(m, miss_count, delta)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// `covmin⁻(ε, δ') − 1/m ≤ γ ≤ covmax⁺(ε, δ') + 1/m`.
    AppendixCorrected,
    /// Same band without the `±1/m` terms.
    MainTextRaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedBand {
    pub m: usize,
    pub delta: f64,
    pub delta_prime: f64,
    pub lower: StepCurve,
    pub upper: StepCurve,
    pub correction_mode: CorrectionMode,
    pub curves: CoverageCurves,
}

impl CertifiedBand {
    pub fn lower_at(&self, epsilon: f64) -> f64 {
        self.lower.eval(epsilon)
    }

    pub fn upper_at(&self, epsilon: f64) -> f64 {
        self.upper.eval(epsilon)
    }

    pub fn contains(&self, epsilon: f64, coverage: f64) -> bool {
        self.lower_at(epsilon) <= coverage && coverage <= self.upper_at(epsilon)
    }

    /// Union of both curves' breakpoints, ascending.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .upper
            .breakpoints
            .iter()
            .chain(&self.lower.breakpoints)
            .copied()
            .collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    pub fn rows(&self) -> Vec<AuditRow> {
        self.breakpoints()
            .into_iter()
            .map(|e| AuditRow {
                epsilon: e,
                covmin_minus: self.lower.eval(e),
                covmin_emp: self.curves.covmin.eval(e),
                covmax_emp: self.curves.covmax.eval(e),
                covmax_plus: self.upper.eval(e),
            })
            .collect()
    }
}

/// Inversions for each distinct count, evaluated in parallel.
fn inversion_table(
    m: u64,
    counts: impl Iterator<Item = u64>,
    delta: f64,
) -> Result<BTreeMap<u64, f64>> {
    let mut distinct: Vec<u64> = counts.collect();
    distinct.sort_unstable();
    distinct.dedup();
    let values = distinct
        .par_iter()
        .map(|&c| covmax_plus(m, c, delta))
        .collect::<Result<Vec<_>>>()?;
    Ok(distinct.into_iter().zip(values).collect())
}

fn band_delta_prime(m: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "certified band needs at least 2 evaluation points, got {m}"
        )));
    }
    Ok(delta / (2.0 * m as f64 - 2.0))
}

/// `covmax⁺(m, c, δ′)` for every count `c = 0..=m`, with `δ′ = δ/(2m−2)`.
/// Lets repeated audits with the same `m` and `δ` skip the inversions.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTable {
    pub m: usize,
    pub delta: f64,
    pub delta_prime: f64,
    values: Vec<f64>,
}

impl InversionTable {
    pub fn new(m: usize, delta: f64) -> Result<Self> {
        let delta_prime = band_delta_prime(m, delta)?;
        let values = (0..=m as u64)
            .into_par_iter()
            .map(|c| covmax_plus(m as u64, c, delta_prime))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            m,
            delta,
            delta_prime,
            values,
        })
    }

    pub fn covmax_plus(&self, count: usize) -> f64 {
        self.values[count]
    }

    pub fn covmin_minus(&self, miss_count: usize) -> f64 {
        1.0 - self.values[miss_count]
    }
}

fn assemble_band(
    curves: CoverageCurves,
    delta: f64,
    delta_prime: f64,
    correction_mode: CorrectionMode,
    upper_of: impl Fn(usize) -> f64,
) -> CertifiedBand {
    let m = curves.m;
    let correction = match correction_mode {
        CorrectionMode::AppendixCorrected => 1.0 / m as f64,
        CorrectionMode::MainTextRaw => 0.0,
    };
    let upper = StepCurve {
        breakpoints: curves.covmax.breakpoints.clone(),
        values: curves
            .covmax_counts
            .iter()
            .map(|&c| (upper_of(c) + correction).clamp(0.0, 1.0))
            .collect(),
        continuity: Continuity::RightContinuous,
    };
    let lower = StepCurve {
        breakpoints: curves.covmin.breakpoints.clone(),
        values: curves
            .covmin_counts
            .iter()
            .map(|&c| (1.0 - upper_of(m - c) - correction).clamp(0.0, 1.0))
            .collect(),
        continuity: Continuity::LeftContinuous,
    };
    CertifiedBand {
        m,
        delta,
        delta_prime,
        lower,
        upper,
        correction_mode,
        curves,
    }
}

pub fn certified_band(
    crit: &CriticalEpsilons,
    delta: f64,
    correction_mode: CorrectionMode,
) -> Result<CertifiedBand> {
    let m = crit.len();
    let delta_prime = band_delta_prime(m, delta)?;
    let curves = coverage_curves(crit)?;
    let counts = curves
        .covmax_counts
        .iter()
        .map(|&c| c as u64)
        .chain(curves.covmin_counts.iter().map(|&c| (m - c) as u64));
    let table = inversion_table(m as u64, counts, delta_prime)?;
    Ok(assemble_band(
        curves,
        delta,
        delta_prime,
        correction_mode,
        |c| table[&(c as u64)],
    ))
}

/// [`certified_band`] with precomputed inversions.
pub fn certified_band_with_table(
    crit: &CriticalEpsilons,
    table: &InversionTable,
    correction_mode: CorrectionMode,
) -> Result<CertifiedBand> {
    if crit.len() != table.m {
        return Err(Error::Dimension(format!(
            "inversion table for m={} used with {} evaluation points",
            table.m,
            crit.len()
        )));
    }
    let curves = coverage_curves(crit)?;
    Ok(assemble_band(
        curves,
        table.delta,
        table.delta_prime,
        correction_mode,
        |c| table.covmax_plus(c),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub epsilon: f64,
    pub covmin_minus: f64,
    pub covmin_emp: f64,
    pub covmax_emp: f64,
    pub covmax_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSidecar {
    pub m: usize,
    pub delta: f64,
    pub delta_prime: f64,
    pub correction_mode: CorrectionMode,
    pub alpha: f64,
    pub q_alpha: f64,
}

impl AuditSidecar {
    pub fn new(band: &CertifiedBand, cal: &CalibrationRecord) -> Self {
        Self {
            m: band.m,
            delta: band.delta,
            delta_prime: band.delta_prime,
            correction_mode: band.correction_mode,
            alpha: cal.alpha,
            q_alpha: cal.q_alpha,
        }
    }
}

pub fn write_audit_csv<W: Write>(rows: &[AuditRow], mut w: W) -> Result<()> {
    writeln!(w, "epsilon,covmin_minus,covmin_emp,covmax_emp,covmax_plus")?;
    for r in rows {
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?}",
            r.epsilon, r.covmin_minus, r.covmin_emp, r.covmax_emp, r.covmax_plus
        )?;
    }
    Ok(())
}
