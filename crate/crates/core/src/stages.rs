//! Closed-form stage thresholds and a per-node trajectory annotator.
//!
//! A trajectory first contracts toward the data mean (σ above `σ_init`), then
//! falls into local clusters (σ below `σ_cluster`), and finally into the
//! shrunk Voronoi cell of a single data point (σ below `σ_terminal`).

use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::geometry::{dist_conv_hull, dist_support_hull, in_shrunk_voronoi, nearest, separation};
use crate::integrate::Trajectory;
use crate::linalg::dist;
use crate::measure::{ClusterSpec, DiscreteMeasure};

/// A threshold on σ that may be `+∞`. Serialized as a number or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Finite(f64),
    Infinite,
}

impl Threshold {
    pub fn is_infinite(self) -> bool {
        matches!(self, Threshold::Infinite)
    }

    pub fn value(self) -> f64 {
        match self {
            Threshold::Finite(v) => v,
            Threshold::Infinite => f64::INFINITY,
        }
    }

    /// Whether `sigma` lies strictly below the threshold.
    pub fn above(self, sigma: f64) -> bool {
        match self {
            Threshold::Finite(v) => sigma < v,
            Threshold::Infinite => true,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Finite(v) => write!(f, "{v}"),
            Threshold::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Finite(v) => s.serialize_f64(*v),
            Threshold::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_finite() && v > 0.0 => Ok(Threshold::Finite(v)),
            Raw::Num(v) => Err(de::Error::custom(format!("threshold must be positive, got {v}"))),
            Raw::Str(s) if s == "inf" => Ok(Threshold::Infinite),
            Raw::Str(s) => Err(de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return domain(format!("{name} must be positive and finite, got {v}"));
    }
    Ok(())
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return domain(format!("{name} must lie in (0, 1), got {v}"));
    }
    Ok(())
}

/// The mean-attraction threshold and its smoothed counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaInit {
    pub sigma_init: f64,
    /// `sqrt(σ_init² + δ²)`, the lower end of the admissible σ range.
    pub smoothed: f64,
}

/// `σ_init = sqrt(2 R₀ diam / ln(1 + ζ R₀ / diam))`.
pub fn sigma_init(diam: f64, r0: f64, zeta: f64, delta: f64) -> Result<SigmaInit> {
    positive("diam", diam)?;
    positive("R0", r0)?;
    open_unit("zeta", zeta)?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return domain(format!("delta must be nonnegative, got {delta}"));
    }
    let s = (2.0 * r0 * diam / (zeta * r0 / diam).ln_1p()).sqrt();
    Ok(SigmaInit {
        sigma_init: s,
        smoothed: s.hypot(delta),
    })
}

/// `R₀ ((σ² + δ²)/(σ₁² + δ²))^{(1-ζ)/2}`.
pub fn mean_bound(r0: f64, sigma1: f64, sigma: f64, zeta: f64, delta: f64) -> Result<f64> {
    positive("sigma", sigma)?;
    if sigma > sigma1 {
        return domain(format!("σ = {sigma} exceeds σ₁ = {sigma1}"));
    }
    if !(0.0..1.0).contains(&zeta) {
        return domain(format!("zeta must lie in [0, 1), got {zeta}"));
    }
    let d2 = delta * delta;
    let ratio = (sigma * sigma + d2) / (sigma1 * sigma1 + d2);
    Ok(r0 * ratio.powf(0.5 * (1.0 - zeta)))
}

fn cluster_constant_factor(d: f64, eps: f64, a: f64, diam: f64) -> Result<f64> {
    positive("D", d)?;
    if !(eps > 0.0 && eps < d / 2.0) {
        return domain(format!("ε must lie in (0, D/2) = (0, {}), got {eps}", d / 2.0));
    }
    open_unit("cluster weight", a)?;
    positive("diam", diam)?;
    Ok(diam * ((1.0 - a) / a).sqrt())
}

/// Absorption threshold of the `(D/2 - ε)`-neighbourhood of a local cluster's hull.
pub fn sigma_cluster(d: f64, eps: f64, a_s: f64, diam: f64) -> Result<Threshold> {
    let k = cluster_constant_factor(d, eps, a_s, diam)?;
    let c = (d / 2.0 - eps) / k;
    if c >= 1.0 {
        return Ok(Threshold::Infinite);
    }
    Ok(Threshold::Finite((-3.0 * d * eps / (2.0 * c.ln())).sqrt()))
}

/// `diam √((1-a)/a) · exp(-3Dε / 2σ²)`: how far the denoiser can sit from the
/// cluster hull while the state is near it.
pub fn cluster_denoiser_bound(d: f64, eps: f64, a_s: f64, diam: f64, sigma: f64) -> Result<f64> {
    let k = cluster_constant_factor(d, eps, a_s, diam)?;
    positive("sigma", sigma)?;
    Ok(k * (-3.0 * d * eps / (2.0 * sigma * sigma)).exp())
}

/// Absorption threshold of the shrunk Voronoi cell `V_i^ε`.
pub fn sigma_terminal(sep: f64, eps: f64, a_i: f64, diam: f64) -> Result<Threshold> {
    positive("sep", sep)?;
    if !(eps > 0.0 && eps < sep / 2.0) {
        return domain(format!("ε must lie in (0, sep/2) = (0, {}), got {eps}", sep / 2.0));
    }
    open_unit("point weight", a_i)?;
    positive("diam", diam)?;
    let c = 2.0 * sep / (sep * sep - eps * eps) * ((1.0 - a_i) / a_i).sqrt() * diam;
    if c <= 1.0 {
        return Ok(Threshold::Infinite);
    }
    Ok(Threshold::Finite(eps / 2.0 / c.ln().sqrt()))
}

/// `d₁ σ / σ₁`: decay of the distance to the support hull.
pub fn hull_decay_bound(d1: f64, sigma1: f64, sigma: f64) -> Result<f64> {
    positive("sigma", sigma)?;
    if sigma > sigma1 {
        return domain(format!("σ = {sigma} exceeds σ₁ = {sigma1}"));
    }
    Ok(d1 * sigma / sigma1)
}

/// Tunable inputs of [`stage_report`]. `None` epsilons default to a quarter of
/// the cluster diameter and a third of each point's separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub zeta: f64,
    pub delta: f64,
    pub cluster_epsilon: Option<f64>,
    pub terminal_epsilon: Option<f64>,
}

impl Default for StageParams {
    fn default() -> Self {
        Self {
            zeta: 0.5,
            delta: 0.0,
            cluster_epsilon: None,
            terminal_epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterThreshold {
    pub size: usize,
    pub diameter: f64,
    pub weight: f64,
    pub epsilon: f64,
    /// `None` when the formula does not apply (degenerate cluster or ε out of range).
    pub sigma_cluster: Option<Threshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointThreshold {
    pub index: usize,
    pub sep: f64,
    pub weight: f64,
    pub epsilon: f64,
    /// `None` for coincident atoms or ε out of range.
    pub sigma_terminal: Option<Threshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageThresholds {
    pub r0: f64,
    pub zeta: f64,
    pub delta: f64,
    pub diam: f64,
    /// `None` for a single-point measure.
    pub sigma_init: Option<SigmaInit>,
    pub clusters: Vec<ClusterThreshold>,
    pub points: Vec<PointThreshold>,
}

/// Computes every threshold from the measure itself.
pub fn stage_thresholds(
    measure: &DiscreteMeasure,
    clusters: &[ClusterSpec],
    r0: f64,
    params: StageParams,
) -> Result<StageThresholds> {
    let diam = measure.diam();
    let sigma_init = if diam > 0.0 && r0 > 0.0 {
        Some(sigma_init(diam, r0, params.zeta, params.delta)?)
    } else {
        None
    };
    let clusters = clusters
        .iter()
        .map(|c| {
            let d = c.diameter();
            let epsilon = params.cluster_epsilon.unwrap_or(d / 4.0);
            let sigma_cluster = if d > 0.0 && c.weight() < 1.0 && epsilon > 0.0 && epsilon < d / 2.0 {
                Some(sigma_cluster(d, epsilon, c.weight(), diam)?)
            } else {
                None
            };
            Ok(ClusterThreshold {
                size: c.indices().len(),
                diameter: d,
                weight: c.weight(),
                epsilon,
                sigma_cluster,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let points = if measure.len() == 1 {
        vec![PointThreshold {
            index: 0,
            sep: f64::INFINITY,
            weight: 1.0,
            epsilon: params.terminal_epsilon.unwrap_or(0.0),
            sigma_terminal: Some(Threshold::Infinite),
        }]
    } else {
        (0..measure.len())
            .map(|i| {
                let sep = separation(measure, i)?;
                let epsilon = params.terminal_epsilon.unwrap_or(sep / 3.0);
                let sigma_terminal = if sep > 0.0 && epsilon > 0.0 && epsilon < sep / 2.0 {
                    Some(sigma_terminal(sep, epsilon, measure.weight(i), diam)?)
                } else {
                    None
                };
                Ok(PointThreshold {
                    index: i,
                    sep,
                    weight: measure.weight(i),
                    epsilon,
                    sigma_terminal,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(StageThresholds {
        r0,
        zeta: params.zeta,
        delta: params.delta,
        diam,
        sigma_init,
        clusters,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Intermediate,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub sigma: f64,
    pub d_mean: f64,
    pub d_hull: f64,
    pub d_cluster: Vec<f64>,
    pub d_nn: f64,
    pub nn_index: usize,
    pub stage: Stage,
    /// The mean-attraction bound, present only at nodes strictly inside its σ range.
    pub mean_bound: Option<f64>,
    pub hull_bound: f64,
}

/// Grid nodes closest (in `ln σ`) to each finite threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Markers {
    pub sigma_init: Option<usize>,
    pub sigma_cluster: Vec<Option<usize>>,
    /// Marker for the threshold of the point the trajectory ends at.
    pub sigma_terminal: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub thresholds: StageThresholds,
    pub markers: Markers,
    pub per_node: Vec<NodeReport>,
}

impl StageReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn nearest_node(sigmas: &[f64], t: Threshold) -> Option<usize> {
    let Threshold::Finite(v) = t else {
        return None;
    };
    let target = v.ln();
    sigmas
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1.ln() - target)
                .abs()
                .total_cmp(&(b.1.ln() - target).abs())
        })
        .map(|(i, _)| i)
}

/// Annotates every node of `traj` with its distances to the mean, the support
/// hull, each cluster hull and the nearest data point.
pub fn stage_report(
    traj: &Trajectory,
    measure: &DiscreteMeasure,
    clusters: &[ClusterSpec],
    params: StageParams,
) -> Result<StageReport> {
    let mean = measure.mean();
    let x1 = &traj.states[0];
    let sigma1 = traj.grid.sigma_max();
    let r0 = dist(x1, &mean);
    let thresholds = stage_thresholds(measure, clusters, r0, params)?;
    let d1 = dist_support_hull(measure, x1)?.distance;
    let cluster_points: Vec<Vec<Vec<f64>>> = clusters.iter().map(|c| c.points(measure)).collect();
    let init_floor = thresholds.sigma_init.map(|s| s.smoothed);

    let mut per_node = Vec::with_capacity(traj.len());
    for (&sigma, x) in traj.sigmas().iter().zip(&traj.states) {
        let (nn_index, d_nn) = nearest(measure, x)?;
        let pt = &thresholds.points[nn_index];
        let in_cell = measure.len() == 1 || in_shrunk_voronoi(measure, nn_index, pt.epsilon, x)?;
        let above_init = init_floor.is_some_and(|f| sigma > f && sigma1 > f);
        let stage = if pt.sigma_terminal.is_some_and(|t| t.above(sigma)) && in_cell {
            Stage::Terminal
        } else if above_init {
            Stage::Initial
        } else {
            Stage::Intermediate
        };
        let mean_bound = if above_init {
            Some(mean_bound(r0, sigma1, sigma, params.zeta, params.delta)?)
        } else {
            None
        };
        per_node.push(NodeReport {
            sigma,
            d_mean: dist(x, &mean),
            d_hull: dist_support_hull(measure, x)?.distance,
            d_cluster: cluster_points
                .iter()
                .map(|pts| dist_conv_hull(pts, x).map(|h| h.distance))
                .collect::<Result<Vec<_>>>()?,
            d_nn,
            nn_index,
            stage,
            mean_bound,
            hull_bound: hull_decay_bound(d1, sigma1, sigma)?,
        });
    }

    let sigmas = traj.sigmas();
    let (final_nn, _) = nearest(measure, &traj.terminal_state)?;
    let markers = Markers {
        sigma_init: thresholds
            .sigma_init
            .and_then(|s| nearest_node(sigmas, Threshold::Finite(s.smoothed))),
        sigma_cluster: thresholds
            .clusters
            .iter()
            .map(|c| c.sigma_cluster.and_then(|t| nearest_node(sigmas, t)))
            .collect(),
        sigma_terminal: thresholds.points[final_nn]
            .sigma_terminal
            .and_then(|t| nearest_node(sigmas, t)),
    };
    Ok(StageReport {
        thresholds,
        markers,
        per_node,
    })
}
