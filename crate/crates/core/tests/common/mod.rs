#![allow(dead_code)]

pub mod oracles;

use liprcp::linalg::{norm, Matrix};
use liprcp::lipnet::{AffineLayer, LipschitzClassifier};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut TestRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit(rng: &mut TestRng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform in the closed ℓ2 ball of radius `eps`.
pub fn in_ball(rng: &mut TestRng, d: usize, eps: f64) -> Vec<f64> {
    let r = eps * rng.random::<f64>().powf(1.0 / d as f64);
    unit(rng, d).into_iter().map(|x| x * r).collect()
}

/// Point on the sphere of radius `eps`, shrunk by one ulp-scale factor so
/// rounding cannot leave the ball.
pub fn on_sphere(rng: &mut TestRng, d: usize, eps: f64) -> Vec<f64> {
    unit(rng, d)
        .into_iter()
        .map(|x| x * eps * (1.0 - 1e-12))
        .collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Random orthogonal stack with widths drawn from `dims` (non-increasing).
pub fn random_orthogonal_model(rng: &mut TestRng) -> LipschitzClassifier {
    let d = rng.random_range(2..=8usize);
    let depth = rng.random_range(1..=3usize);
    let mut widths = vec![d];
    for _ in 0..depth {
        let prev = *widths.last().unwrap();
        widths.push(rng.random_range(2.min(prev)..=prev));
    }
    LipschitzClassifier::orthogonal(&widths, rng.random()).unwrap()
}

/// Dense Gaussian layers (not orthogonal), so the Lipschitz product is a
/// genuine product of spectral norms.
pub fn random_dense_model(rng: &mut TestRng, widths: &[usize], scale: f64) -> LipschitzClassifier {
    let layers = widths
        .windows(2)
        .map(|w| {
            let data = (0..w[0] * w[1])
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect();
            let bias = gaussian(rng, w[1]);
            AffineLayer::new(
                Matrix::from_row_major(w[1], w[0], data).unwrap(),
                bias,
                false,
            )
            .unwrap()
        })
        .collect();
    LipschitzClassifier::new(layers).unwrap()
}

/// Smallest |a − b| over all GroupSort pairs seen during a forward pass.
pub fn min_pair_gap(model: &LipschitzClassifier, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut gap = f64::INFINITY;
    let last = model.layers().len() - 1;
    for (i, layer) in model.layers().iter().enumerate() {
        a = layer.apply(&a);
        if i < last {
            for p in a.chunks_exact(2) {
                gap = gap.min((p[0] - p[1]).abs());
            }
            for p in a.chunks_exact_mut(2) {
                if p[0] > p[1] {
                    p.swap(0, 1);
                }
            }
        }
    }
    gap
}

/// Central finite-difference gradient of logit `y`.
pub fn fd_gradient(model: &LipschitzClassifier, x: &[f64], y: usize, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (model.forward(&a).unwrap()[y] - model.forward(&b).unwrap()[y]) / (2.0 * h)
        })
        .collect()
}
