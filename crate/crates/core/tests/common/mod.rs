//! Independent reference implementations used as oracles by the
//! integration tests. Nothing here calls into the code under test except to
//! read model parameters.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use openset_core::gmm::ClassGmm;
use openset_core::Rng;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Random symmetric positive-definite matrix with eigenvalues bounded away
/// from zero.
pub fn random_spd(rng: &mut Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng) * scale);
    let mut m = &a * a.transpose() + DMatrix::identity(d, d) * (0.5 * scale * scale);
    // Exact symmetry.
    for i in 0..d {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
    m
}

/// Draws `n` samples from N(mean, cov).
pub fn sample_mvn(rng: &mut Rng, mean: &[f64], cov: &DMatrix<f64>, n: usize) -> Vec<Vec<f64>> {
    let l = cov.clone().cholesky().expect("spd").l();
    let mu = DVector::from_column_slice(mean);
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(mean.len(), |_, _| normal(rng));
            (&mu + &l * z).iter().copied().collect()
        })
        .collect()
}

/// Closed-form log N(x; mean, cov) through the explicit inverse and
/// determinant.
pub fn mvn_log_density(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = mean.len() as f64;
    let diff = DVector::from_column_slice(x) - mean;
    let inv = cov.clone().try_inverse().expect("invertible");
    let quad = (diff.transpose() * inv * &diff)[(0, 0)];
    -0.5 * (d * (2.0 * PI).ln() + cov.determinant().ln() + quad)
}

/// Mixture log-likelihood by summing densities in the linear domain.
pub fn mixture_log_likelihood_linear(model: &ClassGmm, x: &[f64]) -> f64 {
    model
        .components()
        .iter()
        .map(|c| c.weight() * mvn_log_density(x, c.mean(), c.covariance()).exp())
        .sum::<f64>()
        .ln()
}

/// P(pos > neg) + ½ P(pos = neg) over all pairs.
pub fn pairwise_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for p in pos {
        for n in neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Central finite-difference gradient.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Box IoU computed from scratch for the brute-force oracles.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}
