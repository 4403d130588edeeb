//! Geometric predicates on finite point sets.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, domain, Result};
use crate::linalg::{dist_sq, dot};
use crate::measure::{ClusterSpec, DiscreteMeasure};

/// Stop when the Frank–Wolfe duality gap, measured on the distance itself, drops below this.
pub const HULL_GAP_TOL: f64 = 1e-10;
pub const HULL_MAX_ITER: usize = 10_000;

/// Relative band on squared distances inside which two atoms count as equally near.
pub const NN_TIE_TOL: f64 = 1e-12;

/// Euclidean projection of a point onto the convex hull of a finite set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HullProjection {
    pub distance: f64,
    pub projection: Vec<f64>,
    /// Simplex weights over the generating points, in input order.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
}

/// Distance from `x` to `conv(points)` by Frank–Wolfe with away steps on
/// the simplex coefficients, minimizing `½|Σ λ_i s_i - x|²` with exact line search.
pub fn dist_conv_hull<P: AsRef<[f64]>>(points: &[P], x: &[f64]) -> Result<HullProjection> {
    if points.is_empty() {
        return domain("convex hull of an empty set");
    }
    let d = x.len();
    for p in points {
        check_dim(d, p.as_ref().len())?;
    }
    let n = points.len();
    let s = |i: usize| points[i].as_ref();

    let scale = points
        .iter()
        .flat_map(|p| p.as_ref().iter())
        .chain(x)
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    let zero_tol = 1e-14 * (1.0 + scale);

    let start = (0..n)
        .min_by(|&i, &j| dist_sq(s(i), x).total_cmp(&dist_sq(s(j), x)))
        .expect("nonempty");
    let mut lambda = vec![0.0; n];
    lambda[start] = 1.0;
    let mut y = s(start).to_vec();
    let mut r = vec![0.0; d];
    let mut grad = vec![0.0; n];
    let mut dir = vec![0.0; d];
    let mut iterations = 0;

    while iterations < HULL_MAX_ITER {
        for k in 0..d {
            r[k] = y[k] - x[k];
        }
        let dist = dot(&r, &r).sqrt();
        if dist <= zero_tol {
            break;
        }
        for (i, g) in grad.iter_mut().enumerate() {
            *g = dot(s(i), &r);
        }
        let current: f64 = lambda.iter().zip(&grad).map(|(l, g)| l * g).sum();
        let fw = (0..n).min_by(|&i, &j| grad[i].total_cmp(&grad[j])).unwrap();
        let away = (0..n)
            .filter(|&i| lambda[i] > 0.0)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]))
            .unwrap();
        let gap_fw = current - grad[fw];
        let gap_away = grad[away] - current;
        if gap_fw / dist < HULL_GAP_TOL {
            break;
        }
        iterations += 1;

        let use_fw = gap_fw >= gap_away || lambda[away] >= 1.0;
        let gamma_max = if use_fw {
            for k in 0..d {
                dir[k] = s(fw)[k] - y[k];
            }
            1.0
        } else {
            for k in 0..d {
                dir[k] = y[k] - s(away)[k];
            }
            lambda[away] / (1.0 - lambda[away])
        };
        let dd = dot(&dir, &dir);
        if dd == 0.0 {
            break;
        }
        let gamma = (-dot(&r, &dir) / dd).clamp(0.0, gamma_max);
        if gamma == 0.0 {
            break;
        }
        if use_fw {
            for l in lambda.iter_mut() {
                *l *= 1.0 - gamma;
            }
            lambda[fw] += gamma;
        } else {
            for l in lambda.iter_mut() {
                *l *= 1.0 + gamma;
            }
            lambda[away] -= gamma;
            if gamma >= gamma_max || lambda[away] < 0.0 {
                lambda[away] = 0.0;
            }
        }
        let total: f64 = lambda.iter().sum();
        for l in lambda.iter_mut() {
            *l /= total;
        }
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &l) in lambda.iter().enumerate() {
            if l > 0.0 {
                crate::linalg::axpy(&mut y, l, s(i));
            }
        }
    }

    Ok(HullProjection {
        distance: dist_sq(&y, x).sqrt(),
        projection: y,
        coefficients: lambda,
        iterations,
    })
}

/// Distance from `x` to the convex hull of the measure's support.
pub fn dist_support_hull(measure: &DiscreteMeasure, x: &[f64]) -> Result<HullProjection> {
    let points: Vec<&[f64]> = measure.points().collect();
    dist_conv_hull(&points, x)
}

/// Membership in the ε-shrunk Voronoi cell
/// `V_i^ε = {x : |x - x_i|² ≤ |x - x_j|² - ε² for all j ≠ i}`.
pub fn in_shrunk_voronoi(measure: &DiscreteMeasure, i: usize, epsilon: f64, x: &[f64]) -> Result<bool> {
    if i >= measure.len() {
        return domain(format!("atom index {i} out of range"));
    }
    if !(epsilon >= 0.0) {
        return domain(format!("ε must be nonnegative, got {epsilon}"));
    }
    check_dim(measure.dim(), x.len())?;
    let own = dist_sq(x, measure.point(i));
    let eps2 = epsilon * epsilon;
    Ok((0..measure.len())
        .filter(|&j| j != i)
        .all(|j| own <= dist_sq(x, measure.point(j)) - eps2))
}

/// Nearest-atom statistics of a query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    /// Every atom whose squared distance is within the tie band of the minimum.
    pub nn_indices: Vec<usize>,
    /// Smallest distance.
    pub d1: f64,
    /// Second smallest distance, counting ties.
    pub d2: f64,
    /// `Δ = d2² - d1²`; exactly zero when the nearest atom is not unique.
    pub gap: f64,
}

/// Index and distance of the nearest atom (lowest index among ties).
pub fn nearest(measure: &DiscreteMeasure, x: &[f64]) -> Result<(usize, f64)> {
    check_dim(measure.dim(), x.len())?;
    let (i, d2) = measure
        .points()
        .map(|p| dist_sq(x, p))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("measures are nonempty");
    Ok((i, d2.sqrt()))
}

pub fn point_stats(measure: &DiscreteMeasure, x: &[f64]) -> Result<PointStats> {
    if measure.len() < 2 {
        return domain("distance gap needs at least two atoms");
    }
    check_dim(measure.dim(), x.len())?;
    let sq: Vec<f64> = measure.points().map(|p| dist_sq(x, p)).collect();
    let mut order: Vec<usize> = (0..sq.len()).collect();
    order.sort_by(|&a, &b| sq[a].total_cmp(&sq[b]).then(a.cmp(&b)));
    let min = sq[order[0]];
    let band = min * (1.0 + NN_TIE_TOL);
    let nn_indices: Vec<usize> = order.iter().copied().take_while(|&i| sq[i] <= band).collect();
    let second = sq[order[1]];
    let gap = if nn_indices.len() >= 2 { 0.0 } else { second - min };
    Ok(PointStats {
        nn_indices,
        d1: min.sqrt(),
        d2: second.sqrt(),
        gap,
    })
}

/// `sep(x_i)`: distance from atom `i` to the rest of the support.
pub fn separation(measure: &DiscreteMeasure, i: usize) -> Result<f64> {
    if measure.len() < 2 {
        return domain("separation needs at least two atoms");
    }
    if i >= measure.len() {
        return domain(format!("atom index {i} out of range"));
    }
    let xi = measure.point(i);
    Ok((0..measure.len())
        .filter(|&j| j != i)
        .map(|j| dist_sq(xi, measure.point(j)))
        .fold(f64::INFINITY, f64::min)
        .sqrt())
}

/// Outcome of checking the local-cluster condition
/// `d_conv(S)(x) > 2 diam(S)` for every support point outside `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalClusterCheck {
    pub diameter: f64,
    pub weight: f64,
    pub holds: bool,
    /// `min over x ∉ S of d_conv(S)(x) - 2D`.
    pub worst_margin: f64,
}

pub fn validate_local_cluster(measure: &DiscreteMeasure, spec: &ClusterSpec) -> Result<LocalClusterCheck> {
    let members = spec.points(measure);
    let outside: Vec<usize> = (0..measure.len()).filter(|&i| !spec.contains(i)).collect();
    if outside.is_empty() {
        return domain("local cluster check needs points outside the cluster");
    }
    let two_d = 2.0 * spec.diameter();
    let mut worst = f64::INFINITY;
    for &i in &outside {
        let h = dist_conv_hull(&members, measure.point(i))?;
        worst = worst.min(h.distance - two_d);
    }
    Ok(LocalClusterCheck {
        diameter: spec.diameter(),
        weight: spec.weight(),
        holds: worst > 0.0,
        worst_margin: worst,
    })
}
