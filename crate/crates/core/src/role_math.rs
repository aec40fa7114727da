//! Distribution-level math over per-agent role Gaussians.
//!
//! Everything here is a pure function on plain `f64` vectors so the learner can
//! evaluate intrinsic rewards on detached network outputs, and so the
//! diagnostics can audit the formulas without touching tensors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Bounds applied to `log_std` at the controller head.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Differential entropy of a standard 1-D Gaussian, `0.5 * ln(2*pi*e)`.
pub const HALF_LOG_2PI_E: f64 = 1.418_938_533_204_672_7;

/// Diagonal Gaussian over the role space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl RoleGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(contract(format!(
                "mean has {} dims but log_std has {}",
                mean.len(),
                log_std.len()
            )));
        }
        if mean.is_empty() {
            return Err(contract("role Gaussian needs at least one dimension"));
        }
        if mean.iter().chain(log_std.iter()).any(|v| !v.is_finite()) {
            return Err(contract("role Gaussian parameters must be finite"));
        }
        Ok(Self { mean, log_std })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn from_std(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(contract("standard deviations must be strictly positive"));
        }
        Self::new(mean, std.into_iter().map(f64::ln).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_std.iter().map(|l| l.exp())
    }
}

fn check_dims(p: &RoleGaussian, q: &RoleGaussian) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(contract(format!(
            "role dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// `KL(p || q)` for diagonal Gaussians, summed over dimensions.
pub fn gaussian_kl(p: &RoleGaussian, q: &RoleGaussian) -> Result<f64> {
    check_dims(p, q)?;
    let mut kl = 0.0;
    for d in 0..p.dim() {
        let log_ratio = q.log_std[d] - p.log_std[d];
        let var_ratio = (-2.0 * log_ratio).exp();
        let diff = p.mean[d] - q.mean[d];
        let scaled_sq = diff * diff * (-2.0 * q.log_std[d]).exp();
        kl += log_ratio + 0.5 * (var_ratio + scaled_sq) - 0.5;
    }
    Ok(kl.max(0.0))
}

/// `KL(p || q) + KL(q || p)`.
pub fn symmetric_kl(p: &RoleGaussian, q: &RoleGaussian) -> Result<f64> {
    Ok(gaussian_kl(p, q)? + gaussian_kl(q, p)?)
}

/// Pairwise role affinity `A_ij = exp(-d_ij)` with `d_ij` the symmetric KL.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    entries: DMatrix<f64>,
}

impl AffinityMatrix {
    pub fn agent_count(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

pub fn affinity_matrix(posteriors: &[RoleGaussian]) -> Result<AffinityMatrix> {
    let n = posteriors.len();
    if n == 0 {
        return Err(contract("affinity matrix needs at least one posterior"));
    }
    let mut entries = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            // exp underflows past d ~ 745; keep the entry strictly positive.
            let a = (-symmetric_kl(&posteriors[i], &posteriors[j])?)
                .exp()
                .max(f64::MIN_POSITIVE);
            entries[(i, j)] = a;
            entries[(j, i)] = a;
        }
    }
    Ok(AffinityMatrix { entries })
}

/// Role heterogeneity reward `r_d = |A(c)|`, clamped into `[0, 1]`.
///
/// `exp(-symmetric KL)` is not a positive-definite kernel, so the raw
/// determinant can leave the unit interval; negative values are read as
/// complete redundancy.
pub fn diversity_reward(a: &AffinityMatrix) -> f64 {
    let det = a.entries.clone().determinant();
    if det.is_nan() {
        return 0.0;
    }
    det.clamp(0.0, 1.0)
}

/// Causal-influence reward: mean over `M` samples of the per-agent sums of
/// `KL(posterior_i || baseline_i)`.
pub fn causal_reward(posteriors: &[Vec<RoleGaussian>], baselines: &[Vec<RoleGaussian>]) -> Result<f64> {
    capped_causal_reward(posteriors, baselines, f64::INFINITY)
}

/// [`causal_reward`] with each agent's KL clipped to `agent_cap` before
/// summing. The KL is unbounded, and a learner that is paid for it can push
/// posterior and baseline apart without limit, so the shaped reward uses this
/// form.
pub fn capped_causal_reward(
    posteriors: &[Vec<RoleGaussian>],
    baselines: &[Vec<RoleGaussian>],
    agent_cap: f64,
) -> Result<f64> {
    if agent_cap.is_nan() || agent_cap <= 0.0 {
        return Err(contract("per-agent KL cap must be positive"));
    }
    if posteriors.is_empty() {
        return Err(contract("causal reward needs at least one sample (M >= 1)"));
    }
    if posteriors.len() != baselines.len() {
        return Err(contract(format!(
            "{} posterior samples but {} baseline samples",
            posteriors.len(),
            baselines.len()
        )));
    }
    let mut total = 0.0;
    for (post, base) in posteriors.iter().zip(baselines) {
        if post.len() != base.len() {
            return Err(contract(format!(
                "sample has {} posteriors but {} baselines",
                post.len(),
                base.len()
            )));
        }
        for (p, b) in post.iter().zip(base) {
            total += gaussian_kl(p, b)?.min(agent_cap);
        }
    }
    Ok(total / posteriors.len() as f64)
}

/// Differential entropy of a diagonal Gaussian.
pub fn gaussian_entropy(p: &RoleGaussian) -> f64 {
    p.log_std.iter().map(|l| HALF_LOG_2PI_E + l).sum()
}

/// `r_e + lambda_c * r_c + lambda_d * r_d`.
pub fn shape_reward(r_e: f64, r_c: f64, r_d: f64, lambda_c: f64, lambda_d: f64) -> Result<f64> {
    if ![r_e, r_c, r_d, lambda_c, lambda_d].iter().all(|v| v.is_finite()) {
        return Err(contract("shaped reward inputs must be finite"));
    }
    if lambda_c < 0.0 || lambda_d < 0.0 {
        return Err(contract("intrinsic reward weights must be non-negative"));
    }
    Ok(r_e + lambda_c * r_c + lambda_d * r_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn g1(mean: f64, std: f64) -> RoleGaussian {
        RoleGaussian::from_std(vec![mean], vec![std]).unwrap()
    }

    fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
        let z = (x - mean) / std;
        (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Composite Simpson quadrature of p(x) ln(p(x)/q(x)) over mean_p +- 20 std_p.
    fn kl_quadrature(mp: f64, sp: f64, mq: f64, sq: f64) -> f64 {
        let (lo, hi) = (mp - 20.0 * sp, mp + 20.0 * sp);
        let n = 40_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| {
            let p = normal_pdf(x, mp, sp);
            if p == 0.0 {
                return 0.0;
            }
            // log-ratio computed directly to avoid underflow of q in the tails
            let lr = -0.5 * ((x - mp) / sp).powi(2) + 0.5 * ((x - mq) / sq).powi(2) + (sq / sp).ln();
            p * lr
        };
        let mut s = f(lo) + f(hi);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(lo + k as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = RoleGaussian::new(vec![0.3, -1.2], vec![0.1, -0.7]).unwrap();
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
        assert_eq!(symmetric_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_quadrature_examples() {
        // Frozen from the quadrature oracle above.
        let oracle_shift = kl_quadrature(0.0, 1.0, 1.0, 1.0);
        let oracle_scale = kl_quadrature(0.0, 1.0, 0.0, 2.0);
        assert!((oracle_shift - 0.5).abs() < 1e-9);
        assert!((oracle_scale - (2f64.ln() - 0.375)).abs() < 1e-9);
        // N(0,4) has variance 4, i.e. std 2.
        assert!((gaussian_kl(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let kl = gaussian_kl(&g1(0.0, 1.0), &g1(0.0, 2.0)).unwrap();
        assert!((kl - 0.318_147_180_559_945_3).abs() < 1e-12);
        assert!((symmetric_kl(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_agrees_with_quadrature_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (mp, mq) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (sp, sq) = (rng.random_range(0.3..2.0), rng.random_range(0.3..2.0));
            let analytic = gaussian_kl(&g1(mp, sp), &g1(mq, sq)).unwrap();
            let numeric = kl_quadrature(mp, sp, mq, sq);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
            assert!(rel < 1e-6 || (analytic - numeric).abs() < 1e-10, "{analytic} vs {numeric}");
        }
    }

    #[test]
    fn dimension_mismatch_and_nonfinite_are_rejected() {
        let p = RoleGaussian::standard(2);
        let q = RoleGaussian::standard(3);
        assert!(gaussian_kl(&p, &q).is_err());
        assert!(RoleGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(RoleGaussian::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(RoleGaussian::new(vec![0.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn affinity_examples() {
        let one = affinity_matrix(&[RoleGaussian::standard(3)]).unwrap();
        assert_eq!(one.as_matrix(), &DMatrix::from_element(1, 1, 1.0));
        assert!(affinity_matrix(&[]).is_err());

        // Equal variances: symmetric KL = (mu_1 - mu_2)^2, so a shift of sqrt(ln 2) gives ln 2.
        let shift = 2f64.ln().sqrt();
        let a = affinity_matrix(&[g1(0.0, 1.0), g1(shift, 1.0)]).unwrap();
        assert!((a.get(0, 1) - 0.5).abs() < 1e-12);
        assert!((diversity_reward(&a) - 0.75).abs() < 1e-12);

        let same = vec![RoleGaussian::new(vec![0.4, 0.1], vec![0.2, -0.3]).unwrap(); 3];
        let a = affinity_matrix(&same).unwrap();
        assert!(a.as_matrix().iter().all(|&v| v == 1.0));
        assert_eq!(diversity_reward(&a), 0.0);
    }

    #[test]
    fn diversity_two_by_two_matches_cofactor_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = g1(rng.random_range(-1.0..1.0), rng.random_range(0.5..1.5));
            let q = g1(rng.random_range(-1.0..1.0), rng.random_range(0.5..1.5));
            let a = affinity_matrix(&[p, q]).unwrap();
            let cofactor = a.get(0, 0) * a.get(1, 1) - a.get(0, 1) * a.get(1, 0);
            assert!((diversity_reward(&a) - cofactor).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_tends_to_one_for_divergent_roles() {
        let posts: Vec<_> = (0..5).map(|i| g1(100.0 * i as f64, 1.0)).collect();
        let a = affinity_matrix(&posts).unwrap();
        assert!((diversity_reward(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_decreases_along_mean_interpolation() {
        let far = RoleGaussian::new(vec![2.0, -1.0], vec![0.1, -0.2]).unwrap();
        let anchor = RoleGaussian::new(vec![0.0, 0.0], vec![0.1, -0.2]).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let mean: Vec<f64> = far.mean().iter().map(|m| m * (1.0 - t)).collect();
            let moving = RoleGaussian::new(mean, far.log_std().to_vec()).unwrap();
            let r = diversity_reward(&affinity_matrix(&[anchor.clone(), moving]).unwrap());
            if k < 20 {
                assert!(r < last, "not decreasing at t={t}");
            }
            last = r;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn causal_reward_examples() {
        let p = g1(0.0, 1.0);
        let q = g1(1.0, 1.0);
        assert_eq!(causal_reward(&[vec![p.clone(), q.clone()]], &[vec![p.clone(), q.clone()]]).unwrap(), 0.0);
        // both per-agent KLs are 0.5
        let r = causal_reward(&[vec![p.clone(), q.clone()]], &[vec![q.clone(), p.clone()]]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        // per-sample sums 1.0 and 3.0
        let shift3 = 6f64.sqrt(); // KL = shift^2 / 2 = 3
        let r = causal_reward(
            &[vec![p.clone(), q.clone()], vec![g1(0.0, 1.0)]],
            &[vec![q.clone(), p.clone()], vec![g1(shift3, 1.0)]],
        )
        .unwrap();
        assert!((r - 2.0).abs() < 1e-12);
        assert!(causal_reward(&[], &[]).is_err());
        assert!(causal_reward(&[vec![p.clone()]], &[vec![p.clone(), q.clone()]]).is_err());
        assert!(causal_reward(&[vec![p.clone()]], &[]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((gaussian_entropy(&g1(0.0, 1.0)) - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!((gaussian_entropy(&RoleGaussian::standard(2)) - 2.837_877_066_409_345_5).abs() < 1e-12);
        let base = RoleGaussian::new(vec![0.0; 3], vec![0.2, -0.4, 1.0]).unwrap();
        let scaled = RoleGaussian::from_std(vec![0.0; 3], base.std().map(|s| s * std::f64::consts::E).collect()).unwrap();
        assert!((gaussian_entropy(&scaled) - gaussian_entropy(&base) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            acc -= normal_pdf(x, 0.0, 1.0).ln();
        }
        let estimate = acc / n as f64;
        assert!((estimate - gaussian_entropy(&g1(0.0, 1.0))).abs() < 1e-2);
    }

    #[test]
    fn shape_reward_examples() {
        assert!((shape_reward(1.0, 2.0, 0.5, 0.001, 0.001).unwrap() - 1.0025).abs() < 1e-15);
        assert_eq!(shape_reward(3.5, 9.0, 0.2, 0.0, 0.0).unwrap(), 3.5);
        assert!(shape_reward(f64::NAN, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(shape_reward(0.0, 0.0, 0.0, -1.0, 0.0).is_err());
    }

    fn gaussian_strategy(dim: usize) -> impl Strategy<Value = RoleGaussian> {
        (
            proptest::collection::vec(-3.0f64..3.0, dim),
            proptest::collection::vec(LOG_STD_MIN..LOG_STD_MAX, dim),
        )
            .prop_map(|(m, l)| RoleGaussian::new(m, l).unwrap())
    }

    proptest! {
        #[test]
        fn kl_non_negative_and_symmetrised(p in gaussian_strategy(4), q in gaussian_strategy(4)) {
            prop_assert!(gaussian_kl(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(symmetric_kl(&p, &q).unwrap(), symmetric_kl(&q, &p).unwrap());
        }

        #[test]
        fn affinity_invariants(posts in (1usize..=8).prop_flat_map(|n| proptest::collection::vec(gaussian_strategy(3), n))) {
            let a = affinity_matrix(&posts).unwrap();
            for i in 0..posts.len() {
                prop_assert_eq!(a.get(i, i), 1.0);
                for j in 0..posts.len() {
                    prop_assert_eq!(a.get(i, j), a.get(j, i));
                    prop_assert!(a.get(i, j) > 0.0 && a.get(i, j) <= 1.0);
                }
            }
            let r = diversity_reward(&a);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn causal_reward_ignores_agent_order(
            pairs in proptest::collection::vec((gaussian_strategy(2), gaussian_strategy(2)), 1..6),
            rot in 0usize..6,
        ) {
            let (posts, bases): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let k = rot % posts.len();
            let mut p2 = posts.clone();
            let mut b2 = bases.clone();
            p2.rotate_left(k);
            b2.rotate_left(k);
            let a = causal_reward(&[posts], &[bases]).unwrap();
            let b = causal_reward(&[p2], &[b2]).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn shape_reward_is_linear(
            re in -10.0f64..10.0, rc in 0.0f64..10.0, rd in 0.0f64..1.0,
            lc in 0.0f64..1.0, ld in 0.0f64..1.0, s in -3.0f64..3.0,
        ) {
            let base = shape_reward(re, rc, rd, lc, ld).unwrap();
            let zero = shape_reward(0.0, 0.0, 0.0, lc, ld).unwrap();
            prop_assert_eq!(zero, 0.0);
            let scaled = shape_reward(s * re, s * rc, s * rd, lc, ld).unwrap();
            prop_assert!((scaled - s * base).abs() < 1e-9);
            let bumped = shape_reward(re, rc + 1.0, rd, lc, ld).unwrap();
            prop_assert!((bumped - base - lc).abs() < 1e-9);
        }
    }
}
