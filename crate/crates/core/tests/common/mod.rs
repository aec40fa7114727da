//! Reference implementations the integration tests compare against. None of
//! these call into the library's math; they work from densities directly.
#![allow(dead_code)]

use std::f64::consts::PI;

use cord::role_math::RoleGaussian;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
}

/// Composite Simpson rule on `[a, b]` with `intervals` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    assert!(intervals.is_multiple_of(2));
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for k in 1..intervals {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// 1-D `KL(N(mp, sp) || N(mq, sq))` by quadrature over `mp ± 14 sp`.
pub fn quadrature_kl_1d(mp: f64, sp: f64, mq: f64, sq: f64) -> f64 {
    simpson(
        |x| {
            let lp = normal_log_pdf(x, mp, sp);
            lp.exp() * (lp - normal_log_pdf(x, mq, sq))
        },
        mp - 14.0 * sp,
        mp + 14.0 * sp,
        40_000,
    )
}

/// 1-D differential entropy by quadrature.
pub fn quadrature_entropy_1d(m: f64, s: f64) -> f64 {
    simpson(
        |x| {
            let lp = normal_log_pdf(x, m, s);
            -lp.exp() * lp
        },
        m - 14.0 * s,
        m + 14.0 * s,
        40_000,
    )
}

pub fn log_density(g: &RoleGaussian, x: &[f64]) -> f64 {
    g.mean()
        .iter()
        .zip(g.log_std())
        .zip(x)
        .map(|((m, l), xi)| normal_log_pdf(*xi, *m, l.exp()))
        .sum()
}

pub fn draw(g: &RoleGaussian, rng: &mut ChaCha8Rng) -> Vec<f64> {
    g.mean()
        .iter()
        .zip(g.log_std())
        .map(|(m, l)| {
            let e: f64 = StandardNormal.sample(rng);
            m + l.exp() * e
        })
        .collect()
}

/// Monte-Carlo `KL(p || q)`: mean and standard error of the log ratio.
pub fn mc_kl(p: &RoleGaussian, q: &RoleGaussian, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    mc_mean(samples, || {
        let x = draw(p, rng);
        log_density(p, &x) - log_density(q, &x)
    })
}

/// Monte-Carlo entropy: mean and standard error of `-log p(x)`.
pub fn mc_entropy(p: &RoleGaussian, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    mc_mean(samples, || {
        let x = draw(p, rng);
        -log_density(p, &x)
    })
}

fn mc_mean(samples: usize, mut f: impl FnMut() -> f64) -> (f64, f64) {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let v = f();
        s += v;
        s2 += v * v;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Gaussian with means in `[-2, 2]` and log-stds in `[-1, 1]`.
pub fn random_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> RoleGaussian {
    RoleGaussian::new(
        (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det *= a[c][c];
        let pivot = a[c].clone();
        for row in a.iter_mut().skip(c + 1) {
            let f = row[c] / pivot[c];
            for (x, p) in row.iter_mut().zip(&pivot).skip(c) {
                *x -= f * p;
            }
        }
    }
    det
}
