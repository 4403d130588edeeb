//! Closed-form posterior-mean denoisers.
//!
//! For `p = Σ a_i δ_{x_i}` and noise level `σ`, the posterior over the atoms
//! given `X + σZ = x` has weights `w_i ∝ a_i exp(-|x - x_i|² / 2σ²)` and the
//! denoiser is `m_σ(x) = Σ w_i x_i`. Weights are always formed in log space
//! with the largest log-term subtracted, so tiny σ and large distances do not
//! underflow to `0/0`.

use nalgebra::DMatrix;

use crate::error::{check_dim, domain, Result};
use crate::linalg::{all_finite, axpy, dist_sq};
use crate::measure::{DiscreteMeasure, SmoothedMeasure};

/// Normalized weights below this are flushed to exactly zero.
pub const WEIGHT_FLUSH: f64 = 1e-300;

/// Anything that maps `(σ, x)` to a denoised point.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>>;
}

/// Result of a full denoiser evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserEval {
    pub m: Vec<f64>,
    pub weights: Vec<f64>,
    /// Normalized log posterior probabilities.
    pub log_weights: Vec<f64>,
    pub sigma: f64,
}

impl DenoiserEval {
    /// Shannon entropy of the posterior in nats.
    pub fn entropy(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.log_weights)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, lw)| -w * lw)
            .sum()
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return domain(format!("denoiser needs finite σ > 0, got {sigma}"));
    }
    Ok(())
}

/// Posterior weights and normalized log-weights over the atoms of `measure`.
pub fn posterior(measure: &DiscreteMeasure, sigma: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_sigma(sigma)?;
    check_dim(measure.dim(), x.len())?;
    if !all_finite(x) {
        return domain("query point must be finite");
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut logits: Vec<f64> = measure
        .points()
        .zip(measure.weights())
        .map(|(p, &a)| a.ln() - dist_sq(x, p) * inv)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let log_total = max + total.ln();
    for w in weights.iter_mut() {
        *w /= total;
        if *w < WEIGHT_FLUSH {
            *w = 0.0;
        }
    }
    for l in logits.iter_mut() {
        *l -= log_total;
    }
    Ok((weights, logits))
}

/// Posterior probabilities `p(x_i | X_σ = x)`.
pub fn posterior_weights(measure: &DiscreteMeasure, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
    Ok(posterior(measure, sigma, x)?.0)
}

/// `m_σ(x) = Σ w_i x_i` together with the posterior it was formed from.
pub fn denoise(measure: &DiscreteMeasure, sigma: f64, x: &[f64]) -> Result<DenoiserEval> {
    let (weights, log_weights) = posterior(measure, sigma, x)?;
    let mut m = vec![0.0; measure.dim()];
    for (p, &w) in measure.points().zip(&weights) {
        if w > 0.0 {
            axpy(&mut m, w, p);
        }
    }
    Ok(DenoiserEval {
        m,
        weights,
        log_weights,
        sigma,
    })
}

/// Denoiser of `p_b * N(0, δ²I)` at level σ via the base denoiser at
/// `σ_b = sqrt(σ² + δ²)`: `m(x) = x + (σ²/σ_b²)(m^{p_b}_{σ_b}(x) - x)`.
///
/// The returned weights are the base posterior at `σ_b`.
pub fn denoise_smoothed(smoothed: &SmoothedMeasure, sigma: f64, x: &[f64]) -> Result<DenoiserEval> {
    check_sigma(sigma)?;
    let delta = smoothed.delta();
    if delta == 0.0 {
        return denoise(smoothed.base(), sigma, x);
    }
    let sigma_b_sq = sigma * sigma + delta * delta;
    let mut eval = denoise(smoothed.base(), sigma_b_sq.sqrt(), x)?;
    let ratio = sigma * sigma / sigma_b_sq;
    for (mi, xi) in eval.m.iter_mut().zip(x) {
        *mi = xi + ratio * (*mi - xi);
    }
    eval.sigma = sigma;
    Ok(eval)
}

/// `∇m_σ(x) = Cov[X | X_σ = x] / σ²`, symmetric positive semidefinite.
pub fn jacobian(measure: &DiscreteMeasure, sigma: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let eval = denoise(measure, sigma, x)?;
    let d = measure.dim();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for (p, &w) in measure.points().zip(&eval.weights) {
        if w == 0.0 {
            continue;
        }
        for k in 0..d {
            centered[k] = p[k] - eval.m[k];
        }
        for r in 0..d {
            for c in r..d {
                cov[(r, c)] += w * centered[r] * centered[c];
            }
        }
    }
    let inv = 1.0 / (sigma * sigma);
    for r in 0..d {
        for c in r..d {
            let v = cov[(r, c)] * inv;
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
    }
    Ok(cov)
}

impl Denoiser for DiscreteMeasure {
    fn dim(&self) -> usize {
        DiscreteMeasure::dim(self)
    }

    fn denoise(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(denoise(self, sigma, x)?.m)
    }
}

impl Denoiser for SmoothedMeasure {
    fn dim(&self) -> usize {
        SmoothedMeasure::dim(self)
    }

    fn denoise(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(denoise_smoothed(self, sigma, x)?.m)
    }
}

/// `m̃_σ(x) = m_σ(x) + σ ε` for a fixed vector `ε`, so that
/// `|m̃_σ - m_σ| = σ|ε| → 0` uniformly in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedDenoiser {
    base: DiscreteMeasure,
    epsilon: Vec<f64>,
}

impl PerturbedDenoiser {
    pub fn new(base: DiscreteMeasure, epsilon: Vec<f64>) -> Result<Self> {
        check_dim(base.dim(), epsilon.len())?;
        if !all_finite(&epsilon) {
            return domain("perturbation must be finite");
        }
        Ok(Self { base, epsilon })
    }

    pub fn base(&self) -> &DiscreteMeasure {
        &self.base
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }

    /// Uniform deviation bound `φ(σ) = σ|ε|`.
    pub fn deviation_bound(&self, sigma: f64) -> f64 {
        sigma * crate::linalg::norm(&self.epsilon)
    }
}

pub fn perturbed_denoise(pd: &PerturbedDenoiser, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
    let mut m = denoise(&pd.base, sigma, x)?.m;
    axpy(&mut m, sigma, &pd.epsilon);
    Ok(m)
}

impl Denoiser for PerturbedDenoiser {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn denoise(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        perturbed_denoise(self, sigma, x)
    }
}

/// Adapts a closure `(σ, x) -> m` to [`Denoiser`].
pub struct FnDenoiser<F> {
    dim: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        (self.f)(sigma, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dist, norm};
    use crate::measure::gen_three_clusters;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equidistant_point_gets_even_weights() {
        let m = DiscreteMeasure::two_point();
        let w = posterior_weights(&m, 0.7, &[0.0]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn two_point_weight_is_logistic() {
        let m = DiscreteMeasure::two_point();
        let w = posterior_weights(&m, 0.5, &[0.5]).unwrap();
        // logistic(2x/σ²) = logistic(4)
        assert!((w[1] - 0.9820137900379085).abs() < 1e-14);
    }

    #[test]
    fn two_point_denoiser_is_tanh() {
        let m = DiscreteMeasure::two_point();
        let e = denoise(&m, 0.5, &[0.5]).unwrap();
        assert!((e.m[0] - 2.0f64.tanh()).abs() < 1e-14);
        assert!((e.m[0] - 0.9640275800758169).abs() < 1e-14);
        for &s in &[0.01, 0.3, 1.0, 50.0] {
            assert_eq!(denoise(&m, s, &[0.0]).unwrap().m[0], 0.0);
        }
        let mut worst = 0.0_f64;
        for k in 0..100 {
            let x = -3.0 + 6.0 * k as f64 / 99.0;
            let e = denoise(&m, 0.8, &[x]).unwrap();
            worst = worst.max((e.m[0] - (x / 0.64).tanh()).abs());
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn dirac_denoiser_is_constant() {
        let m = DiscreteMeasure::dirac(vec![1.0, -2.0]).unwrap();
        for &s in &[1e-4, 1.0, 1e3] {
            assert_eq!(denoise(&m, s, &[40.0, 7.0]).unwrap().m, vec![1.0, -2.0]);
        }
    }

    #[test]
    fn sigma_must_be_positive() {
        let m = DiscreteMeasure::two_point();
        assert!(denoise(&m, 0.0, &[0.1]).is_err());
        assert!(denoise(&m, -1.0, &[0.1]).is_err());
        assert!(jacobian(&m, 0.0, &[0.1]).is_err());
        assert!(denoise(&m, 1.0, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn no_underflow_at_tiny_sigma_and_large_distance() {
        let m = gen_three_clusters(1);
        let e = denoise(&m, 1e-6, &[900.0, -400.0]).unwrap();
        assert!(e.m.iter().all(|v| v.is_finite()));
        let total: f64 = e.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(e.weights.iter().filter(|&&w| w > 0.0).count() >= 1);
    }

    #[test]
    fn argmax_weight_is_nearest_point() {
        let m = gen_three_clusters(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
            let sigma = rng.random_range(0.01..3.0);
            let w = posterior_weights(&m, sigma, &x).unwrap();
            let best = (0..m.len())
                .min_by(|&i, &j| {
                    dist_sq(&x, m.point(i)).partial_cmp(&dist_sq(&x, m.point(j))).unwrap()
                })
                .unwrap();
            let arg = (0..m.len()).max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap()).unwrap();
            assert_eq!(arg, best);
        }
    }

    /// Posterior mean of `X ~ N(0,1)` given `X + σZ = x` by trapezoid quadrature.
    fn gaussian_posterior_mean_quadrature(x: f64, sigma: f64) -> f64 {
        let (lo, hi, n) = (-12.0, 12.0, 24_001);
        let h = (hi - lo) / (n - 1) as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..n {
            let y: f64 = lo + h * k as f64;
            let wt = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            let f = (-0.5 * y * y - (x - y) * (x - y) / (2.0 * sigma * sigma)).exp();
            num += wt * y * f;
            den += wt * f;
        }
        num / den
    }

    #[test]
    fn smoothed_standard_gaussian_matches_quadrature() {
        let g = SmoothedMeasure::standard_gaussian(1).unwrap();
        let e = denoise_smoothed(&g, 1.0, &[2.0]).unwrap();
        assert!((e.m[0] - 1.0).abs() < 1e-14);
        for &(x, s) in &[(2.0, 1.0), (-0.7, 0.3), (3.5, 2.0)] {
            let q = gaussian_posterior_mean_quadrature(x, s);
            let e = denoise_smoothed(&g, s, &[x]).unwrap();
            assert!((e.m[0] - q).abs() < 1e-9, "x={x} σ={s}: {} vs {q}", e.m[0]);
        }
    }

    #[test]
    fn smoothing_with_zero_width_is_the_base() {
        let base = gen_three_clusters(2);
        let sm = SmoothedMeasure::new(base.clone(), 0.0).unwrap();
        let x = [1.7, 2.2];
        let a = denoise_smoothed(&sm, 0.3, &x).unwrap().m;
        let b = denoise(&base, 0.3, &x).unwrap().m;
        assert!(dist(&a, &b) <= 1e-14);
    }

    #[test]
    fn smoothed_is_tweedie_combination_of_base() {
        let base = gen_three_clusters(2);
        let sm = SmoothedMeasure::new(base.clone(), 0.4).unwrap();
        let x = [0.3, 3.1];
        let s = 0.25;
        let sb = (s * s + 0.16f64).sqrt();
        let mb = denoise(&base, sb, &x).unwrap().m;
        let got = denoise_smoothed(&sm, s, &x).unwrap().m;
        for k in 0..2 {
            let want = x[k] + (s * s / (sb * sb)) * (mb[k] - x[k]);
            assert!((got[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_examples() {
        let single = DiscreteMeasure::dirac(vec![1.0, 2.0]).unwrap();
        assert_eq!(jacobian(&single, 0.5, &[0.0, 0.0]).unwrap(), DMatrix::zeros(2, 2));
        let two = DiscreteMeasure::two_point();
        let j = jacobian(&two, 1.0, &[0.0]).unwrap();
        assert!((j[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let m = DiscreteMeasure::uniform(pts).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let j = jacobian(&m, 0.7, &x).unwrap();
        let h = 1e-5;
        for c in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let mp = denoise(&m, 0.7, &xp).unwrap().m;
            let mm = denoise(&m, 0.7, &xm).unwrap().m;
            for r in 0..3 {
                let fd = (mp[r] - mm[r]) / (2.0 * h);
                assert!((fd - j[(r, c)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn perturbed_denoiser_offsets_by_sigma_epsilon() {
        let base = gen_three_clusters(2);
        let zero = PerturbedDenoiser::new(base.clone(), vec![0.0, 0.0]).unwrap();
        let pd = PerturbedDenoiser::new(base.clone(), vec![3.0, -4.0]).unwrap();
        let x = [2.0, 2.0];
        assert_eq!(perturbed_denoise(&zero, 0.4, &x).unwrap(), denoise(&base, 0.4, &x).unwrap().m);
        let mut prev = f64::INFINITY;
        for &s in &[1.0, 0.5, 0.1, 0.01] {
            let dev = dist(
                &perturbed_denoise(&pd, s, &x).unwrap(),
                &denoise(&base, s, &x).unwrap().m,
            );
            assert!((dev - 5.0 * s).abs() < 1e-12);
            assert!(dev < prev);
            prev = dev;
        }
        assert!(PerturbedDenoiser::new(base, vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn large_sigma_tends_to_mean() {
        let m = gen_three_clusters(5);
        let mean = m.mean();
        let x = [10.0, -3.0];
        let far = denoise(&m, 1e4, &x).unwrap().m;
        assert!(dist(&far, &mean) < 1e-6);
        assert!(norm(&far) > 0.0);
    }

    #[test]
    fn entropy_of_uniform_posterior() {
        let m = DiscreteMeasure::two_point();
        let e = denoise(&m, 1.0, &[0.0]).unwrap();
        assert!((e.entropy() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
