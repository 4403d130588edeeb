//! Numerical checks of the limit behaviour of the flow: posterior
//! concentration, convergence rates, equivariance under similarity
//! transforms, subspace decoupling, Gaussian smoothing and memorization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{posterior, PerturbedDenoiser};
use crate::error::{check_dim, domain, Error, Result};
use crate::geometry::{nearest, NN_TIE_TOL};
use crate::integrate::{integrate, integrate_many, to_t_space, IntegrateOptions, TNode, Trajectory};
use crate::linalg::{dist, dist_sq};
use crate::measure::{seeded_rng, DiscreteMeasure, SmoothedMeasure};
use crate::schedule::{Schedule, SigmaGrid};

/// Pass/fail record of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub inputs_digest: String,
    pub statistic: f64,
    pub bound: f64,
    pub holds: bool,
}

impl Verdict {
    /// A verdict that holds iff `statistic <= bound`.
    pub fn at_most<T: Serialize + ?Sized>(name: impl Into<String>, inputs: &T, statistic: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            inputs_digest: digest_json(inputs),
            statistic,
            bound,
            holds: statistic <= bound,
        }
    }

    /// A verdict that holds iff `statistic >= bound`.
    pub fn at_least<T: Serialize + ?Sized>(name: impl Into<String>, inputs: &T, statistic: f64, bound: f64) -> Self {
        Self {
            holds: statistic >= bound,
            ..Self::at_most(name, inputs, statistic, bound)
        }
    }
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    hex::encode(Sha256::digest(bytes))
}

/// `T(x) = γ (O x + b)` with `O` orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    o: DMatrix<f64>,
    b: Vec<f64>,
    gamma: f64,
}

impl SimilarityTransform {
    pub fn new(o: DMatrix<f64>, b: Vec<f64>, gamma: f64) -> Result<Self> {
        if !o.is_square() {
            return domain("O must be square");
        }
        check_dim(o.nrows(), b.len())?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return domain(format!("γ must be positive, got {gamma}"));
        }
        let defect = (o.transpose() * &o - DMatrix::identity(o.nrows(), o.nrows())).amax();
        if !(defect <= 1e-10) {
            return domain(format!("O is not orthogonal (‖OᵀO - I‖∞ = {defect:e})"));
        }
        Ok(Self { o, b, gamma })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            o: DMatrix::identity(d, d),
            b: vec![0.0; d],
            gamma: 1.0,
        }
    }

    pub fn scaling(d: usize, gamma: f64) -> Result<Self> {
        Self::new(DMatrix::identity(d, d), vec![0.0; d], gamma)
    }

    /// Planar rotation by `theta`.
    pub fn rotation2(theta: f64, b: [f64; 2], gamma: f64) -> Result<Self> {
        let (s, c) = theta.sin_cos();
        Self::new(DMatrix::from_row_slice(2, 2, &[c, -s, s, c]), b.to_vec(), gamma)
    }

    /// A Haar-random rotation (determinant +1) with a Gaussian translation of
    /// scale `shift`.
    pub fn random_rigid<R: Rng>(d: usize, shift: f64, rng: &mut R) -> Result<Self> {
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = g.qr();
        let r = qr.r();
        let mut q = qr.q();
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        let b = (0..d).map(|_| shift * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(q, b, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn translation(&self) -> &[f64] {
        &self.b
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.o
    }

    /// `O x`.
    pub fn rotate(&self, x: &[f64]) -> Vec<f64> {
        (&self.o * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rotate(x)
            .iter()
            .zip(&self.b)
            .map(|(v, b)| self.gamma * (v + b))
            .collect()
    }

    /// The push-forward `T#p`.
    pub fn push(&self, measure: &DiscreteMeasure) -> Result<DiscreteMeasure> {
        check_dim(self.dim(), measure.dim())?;
        measure.map_points(|p| self.apply(p))
    }
}

/// Least-squares line through `(log σ, log error)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Errors below this are treated as the floating-point floor and skipped.
pub const ERROR_FLOOR: f64 = 1e-12;

/// Fits `ln err = slope · ln scale + intercept`, skipping errors below
/// [`ERROR_FLOOR`]. Needs at least four usable pairs.
pub fn loglog_fit(scales: &[f64], errors: &[f64]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = scales
        .iter()
        .zip(errors)
        .filter(|(s, e)| **e >= ERROR_FLOOR && e.is_finite() && **s > 0.0)
        .map(|(s, e)| (s.ln(), e.ln()))
        .collect();
    if pts.len() < 4 {
        return Err(Error::Diagnostic(format!(
            "rate fit needs at least 4 usable points, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Diagnostic("rate fit needs distinct scales".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        points: pts.len(),
    })
}

/// Slope of `ln ‖x_σ - reference‖` against `ln σ` over the last `window` nodes.
pub fn convergence_slope(traj: &Trajectory, reference: &[f64], window: usize) -> Result<RateFit> {
    check_dim(traj.dim(), reference.len())?;
    let n = traj.len();
    let start = n.saturating_sub(window);
    let errors: Vec<f64> = traj.states[start..].iter().map(|x| dist(x, reference)).collect();
    loglog_fit(&traj.sigmas()[start..], &errors)
}

/// Slope of `ln ‖x_t - reference‖` against `ln(1 - t)` over the last `window`
/// nodes with `t < 1`.
pub fn convergence_slope_t(nodes: &[TNode], reference: &[f64], window: usize) -> Result<RateFit> {
    let interior: Vec<&TNode> = nodes.iter().filter(|n| n.t < 1.0).collect();
    let start = interior.len().saturating_sub(window);
    let tail = &interior[start..];
    let scales: Vec<f64> = tail.iter().map(|n| 1.0 - n.t).collect();
    let errors = tail
        .iter()
        .map(|n| {
            check_dim(reference.len(), n.x.len())?;
            Ok(dist(&n.x, reference))
        })
        .collect::<Result<Vec<_>>>()?;
    loglog_fit(&scales, &errors)
}

/// `W₂(Σ wᵢ δ_{xᵢ}, δ_y) = sqrt(Σ wᵢ ‖xᵢ - y‖²)`.
pub fn w2_to_dirac<P: AsRef<[f64]>>(weights: &[f64], points: &[P], y: &[f64]) -> Result<f64> {
    if weights.len() != points.len() {
        return domain(format!("{} weights for {} points", weights.len(), points.len()));
    }
    let mut acc = 0.0;
    for (w, p) in weights.iter().zip(points) {
        let p = p.as_ref();
        if p.len() != y.len() {
            return domain(format!("point of dimension {} against target of dimension {}", p.len(), y.len()));
        }
        acc += w * dist_sq(p, y);
    }
    Ok(acc.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnBoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub nn: Vec<usize>,
    /// Squared-distance gap to the nearest atom outside the nearest-neighbour set.
    pub gap: f64,
}

/// Compares the posterior at `(x, σ)` with the data restricted to the nearest
/// neighbours of `x`.
///
/// `lhs` is the transport cost of the coupling that keeps the posterior mass
/// already on the nearest atoms in place and spreads every other atom's mass
/// over them in proportion to their prior weights. For a unique nearest atom
/// this is exactly `W₂` against a Dirac; otherwise it bounds `W₂` from above.
pub fn posterior_nn_bound_check(measure: &DiscreteMeasure, x: &[f64], sigma: f64) -> Result<NnBoundCheck> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return domain(format!("σ must be positive, got {sigma}"));
    }
    check_dim(measure.dim(), x.len())?;
    let d2: Vec<f64> = measure.points().map(|p| dist_sq(p, x)).collect();
    let (_, d1) = nearest(measure, x)?;
    let nn: Vec<usize> = (0..measure.len())
        .filter(|&i| d2[i].sqrt() - d1 <= NN_TIE_TOL * (1.0 + d1))
        .collect();
    let a: f64 = nn.iter().map(|&i| measure.weight(i)).sum();
    let outside: Vec<usize> = (0..measure.len()).filter(|i| !nn.contains(i)).collect();
    if outside.is_empty() {
        return Ok(NnBoundCheck {
            lhs: 0.0,
            rhs: 0.0,
            holds: true,
            nn,
            gap: 0.0,
        });
    }
    let (w, _) = posterior(measure, sigma, x)?;
    let mut cost = 0.0;
    for &j in &outside {
        if w[j] == 0.0 {
            continue;
        }
        let spread: f64 = nn
            .iter()
            .map(|&i| measure.weight(i) / a * dist_sq(measure.point(j), measure.point(i)))
            .sum();
        cost += w[j] * spread;
    }
    let d_out2 = outside.iter().map(|&j| d2[j]).fold(f64::INFINITY, f64::min);
    let gap = d_out2 - d1 * d1;
    let lhs = cost.sqrt();
    let a_out = (1.0 - a).max(0.0);
    let rhs = measure.diam() * (a_out / a).sqrt() * (-gap / (4.0 * sigma * sigma)).exp();
    Ok(NnBoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12,
        nn,
        gap,
    })
}

/// Largest deviation from exact similarity equivariance, measured in `t` space.
///
/// The original system starts from `x0` at `grid[0]`; the transformed system
/// (data `T#p`, schedule `(s_t α_t / γ, s_t β_t)` with `s_t = γ^t`) starts from
/// `T(x0)` at `γ · grid[0]`. At each shared time the transformed state must
/// equal `s_t (O x_t + α_t b)`.
pub fn equivariance_residual(
    measure: &DiscreteMeasure,
    transform: &SimilarityTransform,
    x0: &[f64],
    schedule: &Schedule,
    grid: &SigmaGrid,
    opts: IntegrateOptions,
) -> Result<f64> {
    check_dim(transform.dim(), measure.dim())?;
    let gamma = transform.gamma();
    let pushed = transform.push(measure)?;
    let bar_schedule = Schedule::similarity(schedule.clone(), gamma)?;
    let bar_grid = grid.scaled(gamma)?;

    let orig = integrate(measure, x0, grid, opts)?;
    let bar = integrate(&pushed, &transform.apply(x0), &bar_grid, opts)?;
    let orig_t = to_t_space(&orig, schedule)?;
    let bar_t = to_t_space(&bar, &bar_schedule)?;

    let mut worst: f64 = 0.0;
    for (a, b) in orig_t.iter().zip(&bar_t) {
        let s_t = gamma.powf(a.t);
        let alpha = schedule.alpha(a.t)?;
        let expected: Vec<f64> = transform
            .rotate(&a.x)
            .iter()
            .zip(transform.translation())
            .map(|(ox, bk)| s_t * (ox + alpha * bk))
            .collect();
        worst = worst.max(dist(&b.x, &expected));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceResidual {
    /// `max ‖y_t - β_t y₀‖` over nodes, in `t` space.
    pub y_residual: f64,
    /// `max ‖x-block - intrinsic trajectory‖` over nodes, in σ space.
    pub x_residual: f64,
}

/// Checks that data living in the first `k` coordinates decouples the flow:
/// the trailing block follows `β_t y₀` and the leading block follows the
/// intrinsic `k`-dimensional flow. `x0` is the prior sample at `t = 0`; the
/// σ-space start is `σ₁ x0`.
pub fn subspace_residual(
    measure: &DiscreteMeasure,
    k: usize,
    x0: &[f64],
    schedule: &Schedule,
    grid: &SigmaGrid,
    opts: IntegrateOptions,
) -> Result<SubspaceResidual> {
    let d = measure.dim();
    check_dim(d, x0.len())?;
    if k == 0 || k >= d {
        return domain(format!("intrinsic dimension must lie in [1, {d}), got {k}"));
    }
    if measure.points().any(|p| p[k..].iter().any(|&v| v != 0.0)) {
        return domain("data points must vanish in the trailing coordinates");
    }
    let intrinsic = DiscreteMeasure::new(
        measure.points().map(|p| p[..k].to_vec()).collect(),
        measure.weights().to_vec(),
    )?;
    let s1 = grid.sigma_max();
    let start: Vec<f64> = x0.iter().map(|v| s1 * v).collect();
    let full = integrate(measure, &start, grid, opts)?;
    let low = integrate(&intrinsic, &start[..k], grid, opts)?;

    let y0 = &x0[k..];
    let mut y_residual: f64 = 0.0;
    for node in to_t_space(&full, schedule)? {
        let beta = schedule.beta(node.t)?;
        let want: Vec<f64> = y0.iter().map(|v| beta * v).collect();
        y_residual = y_residual.max(dist(&node.x[k..], &want));
    }
    let mut x_residual: f64 = 0.0;
    for (a, b) in full.states.iter().zip(&low.states) {
        x_residual = x_residual.max(dist(&a[..k], b));
    }
    x_residual = x_residual.max(dist(&full.terminal_state[..k], &low.terminal_state));
    Ok(SubspaceResidual { y_residual, x_residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingEstimate {
    pub estimate: f64,
    pub bound: f64,
    /// `estimate ≤ bound · (1 + 3/√n)`.
    pub holds: bool,
}

/// Monte Carlo value of `sqrt(E‖σZ‖²)`, the transport cost of the independent
/// coupling between `p` and `p * N(0, σ² I)`.
pub fn smoothing_w2_estimate(smoothed: &SmoothedMeasure, sigma: f64, n_samples: usize, seed: u64) -> Result<SmoothingEstimate> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return domain(format!("σ must be nonnegative, got {sigma}"));
    }
    if n_samples < 100 {
        return domain(format!("need at least 100 samples, got {n_samples}"));
    }
    let d = smoothed.dim();
    let mut rng = seeded_rng(seed);
    let mut acc = 0.0;
    for _ in 0..n_samples {
        for _ in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            acc += (sigma * z).powi(2);
        }
    }
    let estimate = (acc / n_samples as f64).sqrt();
    let bound = sigma * (d as f64).sqrt();
    Ok(SmoothingEstimate {
        estimate,
        bound,
        holds: estimate <= bound * (1.0 + 3.0 / (n_samples as f64).sqrt()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldRate {
    pub sigma: f64,
    pub w2: f64,
    /// `W₂ / σ`.
    pub ratio: f64,
    /// `ratio · sqrt(r / R)` with `r` the probe's distance from the centre.
    pub curvature_corrected: f64,
}

/// `W₂(posterior, δ_proj(x)) / σ` for a discretized circle, with the analytic
/// projection of `x` onto the circle of the given centre and radius.
pub fn manifold_rate_check(
    circle: &DiscreteMeasure,
    center: [f64; 2],
    radius: f64,
    x: [f64; 2],
    sigmas: &[f64],
) -> Result<Vec<ManifoldRate>> {
    check_dim(2, circle.dim())?;
    if !(radius > 0.0) {
        return domain("radius must be positive");
    }
    let off = [x[0] - center[0], x[1] - center[1]];
    let r = off[0].hypot(off[1]);
    if r <= 1e-12 * radius {
        return domain("probe at the centre has no unique projection");
    }
    let proj = [center[0] + radius * off[0] / r, center[1] + radius * off[1] / r];
    let pts = circle.to_points();
    sigmas
        .iter()
        .map(|&sigma| {
            let (w, _) = posterior(circle, sigma, &x)?;
            let w2 = w2_to_dirac(&w, &pts, &proj)?;
            let ratio = w2 / sigma;
            Ok(ManifoldRate {
                sigma,
                w2,
                ratio,
                curvature_corrected: ratio * (r / radius).sqrt(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationOutcome {
    pub terminal: Vec<f64>,
    pub nn_index: usize,
    pub d_nn: f64,
}

/// Integrates every start with the perturbed denoiser and reports where each
/// trajectory ends relative to the training points.
pub fn memorization_run(
    pd: &PerturbedDenoiser,
    starts: &[Vec<f64>],
    grid: &SigmaGrid,
    opts: IntegrateOptions,
) -> Result<Vec<MemorizationOutcome>> {
    let trajs = integrate_many(pd, starts, grid, opts)?;
    trajs
        .into_iter()
        .map(|t| {
            let (nn_index, d_nn) = nearest(pd.base(), &t.terminal_state)?;
            Ok(MemorizationOutcome {
                terminal: t.terminal_state,
                nn_index,
                d_nn,
            })
        })
        .collect()
}

/// Largest node-wise distance between two trajectories on the same grid.
pub fn max_node_deviation(a: &Trajectory, b: &Trajectory) -> f64 {
    a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| dist(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::Method;
    use crate::measure::{gen_circle, gen_three_clusters};
    use crate::schedule::edm_grid;
    use proptest::prelude::*;

    #[test]
    fn w2_examples() {
        let pts = [[-1.0], [1.0]];
        assert_eq!(w2_to_dirac(&[0.5, 0.5], &pts, &[0.0]).unwrap(), 1.0);
        assert!((w2_to_dirac(&[0.5, 0.5], &pts, &[1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(w2_to_dirac(&[1.0], &[[3.0, 4.0]], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(w2_to_dirac(&[1.0], &[[3.0, 4.0]], &[3.0]).is_err());
    }

    #[test]
    fn nn_bound_examples() {
        let two = DiscreteMeasure::two_point();
        let tie = posterior_nn_bound_check(&two, &[0.0], 0.3).unwrap();
        assert_eq!(tie.nn, vec![0, 1]);
        assert_eq!(tie.lhs, 0.0);
        assert!(tie.holds);

        let c = posterior_nn_bound_check(&two, &[0.2], 0.1).unwrap();
        assert_eq!(c.nn, vec![1]);
        assert!((c.gap - 0.8).abs() < 1e-12);
        // oracle: posterior mass on -1 is logistic(-2x/σ²)
        let w_minus = 1.0 / (1.0 + (2.0 * 0.2 / 0.01f64).exp());
        assert!((c.lhs - 2.0 * w_minus.sqrt()).abs() < 1e-12 * c.lhs.max(1e-300));
        assert!((c.rhs - 2.0 * (-0.8f64 / 0.04).exp()).abs() < 1e-20);
        // the bound is nearly tight here: lhs/rhs = (1 + e^-40)^(-1/2)
        assert!(c.holds);
        assert!((c.lhs / c.rhs - 1.0).abs() < 1e-12);

        let big = posterior_nn_bound_check(&two, &[0.2], 1e3).unwrap();
        assert!(big.holds);
        assert!(posterior_nn_bound_check(&two, &[0.2], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn nn_bound_holds(
            pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..12),
            ws in prop::collection::vec(0.05f64..1.0, 12),
            x in prop::collection::vec(-4.0f64..4.0, 3),
            log_sigma in (0.01f64).ln()..(10.0f64).ln(),
        ) {
            let n = pts.len();
            let m = DiscreteMeasure::normalized(pts, ws[..n].to_vec()).unwrap();
            let c = posterior_nn_bound_check(&m, &x, log_sigma.exp()).unwrap();
            prop_assert!(c.holds, "{c:?}");
        }
    }

    #[test]
    fn loglog_fit_exact_line() {
        let s: Vec<f64> = (0..8).map(|k| 0.5f64.powi(k)).collect();
        let e: Vec<f64> = s.iter().map(|v| 3.0 * v * v).collect();
        let fit = loglog_fit(&s, &e).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(loglog_fit(&s[..3], &e[..3]).is_err());
        let floor = vec![1e-13; 8];
        assert!(loglog_fit(&s, &floor).is_err());
    }

    #[test]
    fn single_point_slope_is_one() {
        let m = DiscreteMeasure::dirac(vec![1.0, 1.0]).unwrap();
        let grid = SigmaGrid::geometric(10.0, 1e-3, 30).unwrap();
        let traj = integrate(&m, &[4.0, -2.0], &grid, IntegrateOptions::new(Method::Rk4, 16)).unwrap();
        let fit = convergence_slope(&traj, &traj.terminal_state, 10).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-6, "{fit:?}");
        assert!(fit.r2 > 0.999_999);
    }

    #[test]
    fn three_cluster_slope() {
        let m = gen_three_clusters(7);
        let grid = edm_grid(80.0, 0.002, 7.0, 18).unwrap().extended(1e-6, 24).unwrap();
        let traj = integrate(&m, &[30.0, -40.0], &grid, IntegrateOptions::new(Method::Rk4, 8)).unwrap();
        let fit = convergence_slope(&traj, &traj.terminal_state, 12).unwrap();
        assert!((0.9..=1.1).contains(&fit.slope), "{fit:?}");
    }

    #[test]
    fn rigid_transform_is_orthogonal() {
        let mut rng = seeded_rng(4);
        for d in 1..5 {
            let t = SimilarityTransform::random_rigid(d, 1.0, &mut rng).unwrap();
            assert!(t.matrix().determinant() > 0.0);
        }
        assert!(SimilarityTransform::new(DMatrix::from_element(2, 2, 1.0), vec![0.0; 2], 1.0).is_err());
        assert!(SimilarityTransform::scaling(2, 0.0).is_err());
        let t = SimilarityTransform::rotation2(std::f64::consts::FRAC_PI_2, [1.0, 0.0], 2.0).unwrap();
        let y = t.apply(&[1.0, 0.0]);
        assert!(dist(&y, &[2.0, 2.0]) < 1e-15);
    }

    #[test]
    fn equivariance_identity_and_scaling() {
        let m = gen_three_clusters(7);
        let grid = edm_grid(80.0, 0.002, 7.0, 18).unwrap();
        let opts = IntegrateOptions::new(Method::Rk4, 16);
        let sched = Schedule::Rectified;
        let id = equivariance_residual(&m, &SimilarityTransform::identity(2), &[20.0, 5.0], &sched, &grid, opts).unwrap();
        assert!(id <= 1e-8, "{id}");
        let rot = SimilarityTransform::rotation2(0.7, [1.5, -2.0], 1.0).unwrap();
        let r = equivariance_residual(&m, &rot, &[20.0, 5.0], &sched, &grid, opts).unwrap();
        assert!(r <= 1e-6, "{r}");

        let two = DiscreteMeasure::two_point();
        let g2 = SimilarityTransform::scaling(1, 2.0).unwrap();
        let grid2 = SigmaGrid::geometric(10.0, 1e-3, 40).unwrap();
        let res = equivariance_residual(&two, &g2, &[3.0], &sched, &grid2, opts).unwrap();
        assert!(res <= 1e-5, "{res}");
        let a = integrate(&two, &[3.0], &grid2, opts).unwrap();
        let b = integrate(&g2.push(&two).unwrap(), &[6.0], &grid2.scaled(2.0).unwrap(), opts).unwrap();
        assert!((b.terminal_state[0] - 2.0 * a.terminal_state[0]).abs() < 1e-5);
    }

    #[test]
    fn subspace_examples() {
        let base = DiscreteMeasure::new(vec![vec![-1.0, 0.5], vec![1.0, -0.5]], vec![0.3, 0.7]).unwrap();
        let m = base.embed(1);
        let grid = SigmaGrid::geometric(20.0, 1e-3, 48).unwrap();
        let opts = IntegrateOptions::new(Method::Rk4, 16);
        for y0 in [0.0, 5.0] {
            let r = subspace_residual(&m, 2, &[0.3, -0.2, y0], &Schedule::Rectified, &grid, opts).unwrap();
            assert!(r.y_residual <= 1e-8, "{r:?}");
            assert!(r.x_residual <= 1e-8, "{r:?}");
            if y0 == 0.0 {
                assert_eq!(r.y_residual, 0.0);
            }
        }
        let off = DiscreteMeasure::dirac(vec![0.0, 0.0, 1e-9]).unwrap();
        assert!(subspace_residual(&off, 2, &[0.0; 3], &Schedule::Rectified, &grid, opts).is_err());
    }

    #[test]
    fn smoothing_estimate() {
        let g = SmoothedMeasure::standard_gaussian(2).unwrap();
        assert_eq!(smoothing_w2_estimate(&g, 0.0, 1000, 1).unwrap().estimate, 0.0);
        let e = smoothing_w2_estimate(&g, 0.5, 10_000, 1).unwrap();
        assert!((e.estimate / (0.5 * 2f64.sqrt()) - 1.0).abs() < 0.05);
        assert!(e.holds);
        let e2 = smoothing_w2_estimate(&g, 1.0, 10_000, 1).unwrap();
        assert!((e2.estimate / e.estimate - 2.0).abs() < 1e-12);
        assert!(smoothing_w2_estimate(&g, 0.5, 10, 1).is_err());
    }

    #[test]
    fn manifold_rate_is_position_dependent() {
        let c = gen_circle(2048, 1.0, [0.0, 0.0]).unwrap();
        let sig = [0.02, 0.05, 0.1];
        let out = manifold_rate_check(&c, [0.0, 0.0], 1.0, [1.2, 0.0], &sig).unwrap();
        let inn = manifold_rate_check(&c, [0.0, 0.0], 1.0, [0.8, 0.0], &sig).unwrap();
        for (o, i) in out.iter().zip(&inn) {
            // W₂/σ tends to sqrt(R/r), not 1, off the circle
            assert!((o.ratio - (1.0 / 1.2f64).sqrt()).abs() < 0.03, "{o:?}");
            assert!((i.ratio - (1.0 / 0.8f64).sqrt()).abs() < 0.03, "{i:?}");
            assert!((o.curvature_corrected - 1.0).abs() < 0.03);
            assert!((i.curvature_corrected - 1.0).abs() < 0.03);
        }
        assert!(manifold_rate_check(&c, [0.0, 0.0], 1.0, [0.0, 0.0], &sig).is_err());
    }

    #[test]
    fn memorization_matches_unperturbed_when_eps_zero() {
        let m = gen_three_clusters(7);
        let grid = edm_grid(80.0, 1e-4, 7.0, 18).unwrap();
        let opts = IntegrateOptions::default();
        let starts = vec![vec![10.0, 50.0], vec![-70.0, 3.0]];
        let pd = PerturbedDenoiser::new(m.clone(), vec![0.0, 0.0]).unwrap();
        let out = memorization_run(&pd, &starts, &grid, opts).unwrap();
        for (s, o) in starts.iter().zip(&out) {
            let plain = integrate(&m, s, &grid, opts).unwrap();
            assert_eq!(o.terminal, plain.terminal_state);
            assert!(o.d_nn < 1e-6);
        }
    }

    #[test]
    fn verdict_digest_is_stable() {
        let v = Verdict::at_most("x", &[1.0, 2.0], 0.5, 1.0);
        assert!(v.holds);
        assert_eq!(v.inputs_digest, digest_json(&[1.0, 2.0]));
        assert_eq!(v.inputs_digest.len(), 64);
        assert!(!Verdict::at_least("y", "in", 0.5, 1.0).holds);
    }
}
