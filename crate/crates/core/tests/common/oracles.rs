//! Independent reference implementations used by the test suites.
//!
//! Nothing here calls into the library's numerical routines; each oracle
//! recomputes its quantity from first principles.

#![allow(dead_code)]

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

/// Mantissa bits kept by [`Big`].
pub const PRECISION_BITS: u64 = 256;

/// Non-negative binary float `mant · 2^exp` with a `PRECISION_BITS` mantissa.
/// Only truncation happens, so relative error per operation is below 2^-255.
#[derive(Clone, Debug)]
pub struct Big {
    mant: BigUint,
    exp: i64,
}

impl Big {
    pub fn zero() -> Self {
        Big {
            mant: BigUint::zero(),
            exp: 0,
        }
    }

    pub fn from_biguint(v: BigUint) -> Self {
        Big { mant: v, exp: 0 }.normalize()
    }

    /// Exact conversion of a finite non-negative double.
    pub fn from_f64(x: f64) -> Self {
        assert!(x >= 0.0 && x.is_finite());
        if x == 0.0 {
            return Self::zero();
        }
        let bits = x.to_bits();
        let raw_exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, exp) = if raw_exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), raw_exp - 1075)
        };
        Big {
            mant: BigUint::from(mant),
            exp,
        }
        .normalize()
    }

    /// `num / 2^bits` exactly.
    pub fn dyadic(num: &BigUint, bits: u64) -> Self {
        Big {
            mant: num.clone(),
            exp: -(bits as i64),
        }
        .normalize()
    }

    fn normalize(mut self) -> Self {
        let b = self.mant.bits();
        if b > PRECISION_BITS {
            let sh = b - PRECISION_BITS;
            self.mant >>= sh;
            self.exp += sh as i64;
        }
        self
    }

    pub fn is_zero(&self) -> bool {
        self.mant.is_zero()
    }

    /// Position of the leading bit, i.e. `⌊log2 v⌋ + 1`.
    fn magnitude(&self) -> i64 {
        self.mant.bits() as i64 + self.exp
    }

    pub fn mul(&self, o: &Big) -> Big {
        Big {
            mant: &self.mant * &o.mant,
            exp: self.exp + o.exp,
        }
        .normalize()
    }

    pub fn add(&self, o: &Big) -> Big {
        if self.is_zero() {
            return o.clone();
        }
        if o.is_zero() {
            return self.clone();
        }
        let (hi, lo) = if self.magnitude() >= o.magnitude() {
            (self, o)
        } else {
            (o, self)
        };
        if hi.magnitude() - lo.magnitude() > PRECISION_BITS as i64 + 8 {
            return hi.clone();
        }
        let e = hi.exp.min(lo.exp);
        let a = &hi.mant << (hi.exp - e) as u64;
        let b = &lo.mant << (lo.exp - e) as u64;
        Big {
            mant: a + b,
            exp: e,
        }
        .normalize()
    }

    pub fn pow(&self, mut n: u64) -> Big {
        let mut base = self.clone();
        let mut acc = Big::from_biguint(BigUint::one());
        while n > 0 {
            if n & 1 == 1 {
                acc = acc.mul(&base);
            }
            base = base.mul(&base);
            n >>= 1;
        }
        acc
    }

    pub fn ge(&self, o: &Big) -> bool {
        match (self.is_zero(), o.is_zero()) {
            (_, true) => true,
            (true, false) => false,
            _ => {
                let (ma, mb) = (self.magnitude(), o.magnitude());
                if ma != mb {
                    return ma > mb;
                }
                let e = self.exp.min(o.exp);
                let a = &self.mant << (self.exp - e) as u64;
                let b = &o.mant << (o.exp - e) as u64;
                a >= b
            }
        }
    }

    pub fn to_f64(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let b = self.mant.bits();
        let keep = b.min(64);
        let top = (&self.mant >> (b - keep)).to_u64().unwrap() as f64;
        top * 2f64.powi((self.exp + (b - keep) as i64) as i32)
    }
}

/// Binomial(m, p) CDF at k for dyadic `p = a / 2^PRECISION_BITS`.
pub fn binomial_cdf_big(m: u64, a: &BigUint, k: u64) -> Big {
    let one = BigUint::one() << PRECISION_BITS;
    let p = Big::dyadic(a, PRECISION_BITS);
    let q = Big::dyadic(&(&one - a), PRECISION_BITS);
    // Σ_{j≤k} C(m,j) p^j q^{m−j} = q^{m−k} · Σ_{j≤k} C(m,j) p^j q^{k−j}, by Horner.
    let mut choose = BigUint::one();
    let mut horner = Big::from_biguint(BigUint::one());
    let mut p_pow = Big::from_biguint(BigUint::one());
    for j in 1..=k {
        choose = choose * BigUint::from(m - j + 1) / BigUint::from(j);
        p_pow = p_pow.mul(&p);
        horner = horner
            .mul(&q)
            .add(&Big::from_biguint(choose.clone()).mul(&p_pow));
    }
    horner.mul(&q.pow(m - k))
}

/// `max{p : F_{m,p}(count) ≥ δ}` by bisection over dyadic `p` with
/// `PRECISION_BITS`-bit arithmetic. `hint` narrows the initial bracket when it
/// is verified to contain the root.
pub fn binomial_root(m: u64, count: u64, delta: f64, hint: Option<f64>) -> f64 {
    assert!(count <= m && delta > 0.0 && delta < 1.0);
    if count == m {
        return 1.0;
    }
    let scale = BigUint::one() << PRECISION_BITS;
    let d = Big::from_f64(delta);
    let to_dyadic = |x: f64| -> BigUint {
        let x = x.clamp(0.0, 1.0);
        // x · 2^256 exactly, via its 53-bit mantissa.
        let big = Big::from_f64(x);
        let shift = big.exp + PRECISION_BITS as i64;
        if shift >= 0 {
            (&big.mant << shift as u64).min(scale.clone())
        } else {
            &big.mant >> (-shift) as u64
        }
    };
    let holds = |a: &BigUint| binomial_cdf_big(m, a, count).ge(&d);

    let mut lo = BigUint::zero();
    let mut hi = scale.clone();
    if let Some(h) = hint {
        let w = 1e-6;
        let l = to_dyadic(h - w);
        let u = to_dyadic(h + w);
        if holds(&l) && !holds(&u) {
            lo = l;
            hi = u;
        }
    }
    // Width 2^-60 is far below any tolerance the tests use.
    let stop = BigUint::one() << (PRECISION_BITS - 60);
    while &hi - &lo > stop {
        let mid: BigUint = (&lo + &hi) >> 1u32;
        if holds(&mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Big::dyadic(&lo, PRECISION_BITS).to_f64()
}

/// Conformal quantile by its definition, with nothing shared with the library.
pub fn quantile_at_rank(values: &[f64], rank: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[rank - 1]
}

/// Every assignment of shifts in `{−Δ, 0, +Δ}` to the scores, grouped by the
/// number of shifted points. Returns, for each budget `k = 0..=n`, the smallest
/// and largest rank-`r` statistic reachable with at most `k` shifted points.
pub fn exhaustive_quantile_range(
    scores: &[f64],
    rank: usize,
    delta: f64,
    clip: bool,
) -> Vec<(f64, f64)> {
    let n = scores.len();
    assert!(n <= 12);
    let mut best = vec![(f64::INFINITY, f64::NEG_INFINITY); n + 1];
    let total = 3usize.pow(n as u32);
    let mut shifted = vec![0.0; n];
    for code in 0..total {
        let mut c = code;
        let mut moved = 0;
        for (i, s) in scores.iter().enumerate() {
            let v = match c % 3 {
                0 => *s,
                1 => {
                    moved += 1;
                    s + delta
                }
                _ => {
                    moved += 1;
                    s - delta
                }
            };
            shifted[i] = if clip { v.clamp(0.0, 1.0) } else { v };
            c /= 3;
        }
        let q = quantile_at_rank(&shifted, rank);
        let b = &mut best[moved];
        b.0 = b.0.min(q);
        b.1 = b.1.max(q);
    }
    for k in 1..=n {
        best[k].0 = best[k].0.min(best[k - 1].0);
        best[k].1 = best[k].1.max(best[k - 1].1);
    }
    best
}

/// `⌈(n+1)(1−α)⌉` in exact rational arithmetic for `α = num/den`.
pub fn exact_rank(n: usize, num: u64, den: u64) -> usize {
    let top = (n as u64 + 1) * (den - num);
    top.div_ceil(den) as usize
}

/// Standard normal CDF via the complementary error function series.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `erfc` accurate to about 1e-14 (continued fraction for large |x|, series
/// otherwise).
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        // erf(x) = 2/√π Σ (−1)^n x^{2n+1} / (n! (2n+1))
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        1.0 - sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // Lentz evaluation of erfc(x) = e^{−x²}/√π · 1/(x + 1/2/(x + 1/(x + 3/2/(x + ...))))
        let mut f = x;
        let mut c = x;
        let mut d = 0.0;
        for n in 1..500 {
            let a = n as f64 / 2.0;
            d = x + a * d;
            d = 1.0 / d;
            c = x + a / c;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
    }
}
