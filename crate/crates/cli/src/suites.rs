//! Check suites run by `flowtraj verify`.
//!
//! Each suite uses fixed integrator settings at which its tolerance is
//! meaningful; the run config contributes the dataset seed, the start seed and
//! the tolerances.

use flowtraj::denoiser::{jacobian, posterior_weights, PerturbedDenoiser};
use flowtraj::diagnostics::{
    convergence_slope, convergence_slope_t, equivariance_residual, posterior_nn_bound_check,
    smoothing_w2_estimate, subspace_residual, SimilarityTransform, Verdict,
};
use flowtraj::geometry::{dist_conv_hull, dist_support_hull, in_shrunk_voronoi, separation};
use flowtraj::integrate::{integrate_many, to_t_space};
use flowtraj::measure::{gen_three_clusters, seeded_rng, three_cluster_specs};
use flowtraj::schedule::edm_grid;
use flowtraj::stages::{hull_decay_bound, mean_bound, sigma_cluster, sigma_init, sigma_terminal};
use flowtraj::{integrate, Denoiser, DiscreteMeasure, IntegrateOptions, Method, Schedule, SigmaGrid, SmoothedMeasure};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Denoiser,
    Stages,
    Rates,
    Equivariance,
    Memorize,
    All,
}

/// The denoiser under test. The corrupted variant adds `0.01 (1 + x)` to every
/// output coordinate and exists only as a negative control.
pub struct Model<'a, D: ?Sized> {
    inner: &'a D,
    corrupt: bool,
}

impl<'a, D: Denoiser + ?Sized> Model<'a, D> {
    pub fn new(inner: &'a D, corrupt: bool) -> Self {
        Self { inner, corrupt }
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Model<'_, D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn denoise(&self, sigma: f64, x: &[f64]) -> flowtraj::Result<Vec<f64>> {
        let mut m = self.inner.denoise(sigma, x)?;
        if self.corrupt {
            for (mk, xk) in m.iter_mut().zip(x) {
                *mk += 0.01 * (1.0 + xk);
            }
        }
        Ok(m)
    }
}

pub fn run_suite(suite: Suite, cfg: &RunConfig, corrupt: bool) -> Result<Vec<Verdict>, CliError> {
    Ok(match suite {
        Suite::Denoiser => denoiser_suite(cfg, corrupt)?,
        Suite::Stages => stages_suite(cfg, corrupt)?,
        Suite::Rates => rates_suite(cfg, corrupt)?,
        Suite::Equivariance => equivariance_suite(cfg, corrupt)?,
        Suite::Memorize => memorize_suite(cfg, corrupt)?,
        Suite::All => {
            let mut all = Vec::new();
            for s in [Suite::Denoiser, Suite::Stages, Suite::Rates, Suite::Equivariance, Suite::Memorize] {
                all.extend(run_suite(s, cfg, corrupt)?);
            }
            all
        }
    })
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// A random measure with `N ≤ max_n` atoms in `[-2, 2]^d`, `d ≤ max_d`.
pub fn random_measure(rng: &mut ChaCha8Rng, max_n: usize, max_d: usize) -> DiscreteMeasure {
    let n = rng.random_range(1..=max_n);
    let d = rng.random_range(1..=max_d);
    let pts = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let ws = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    DiscreteMeasure::normalized(pts, ws).expect("random measure is valid")
}

/// Largest entrywise gap between the analytic Jacobian and central differences
/// of `model` at `(σ, x)`.
pub fn jacobian_fd_gap<D: Denoiser + ?Sized>(
    measure: &DiscreteMeasure,
    model: &D,
    sigma: f64,
    x: &[f64],
) -> flowtraj::Result<f64> {
    let j = jacobian(measure, sigma, x)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for c in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let (mp, mm) = (model.denoise(sigma, &xp)?, model.denoise(sigma, &xm)?);
        for r in 0..x.len() {
            worst = worst.max((j[(r, c)] - (mp[r] - mm[r]) / (2.0 * h)).abs());
        }
    }
    Ok(worst)
}

fn denoiser_suite(cfg: &RunConfig, corrupt: bool) -> Result<Vec<Verdict>, CliError> {
    let tol = &cfg.tolerances;
    let mut out = Vec::new();

    let two = DiscreteMeasure::two_point();
    let model = Model::new(&two, corrupt);
    let sigmas = [0.3, 0.5, 1.0, 2.0];
    let mut worst: f64 = 0.0;
    for &s in &sigmas {
        for k in 0..200 {
            let x = -3.0 + 6.0 * k as f64 / 199.0;
            let m = model.denoise(s, &[x])?[0];
            worst = worst.max((m - (x / (s * s)).tanh()).abs());
        }
    }
    out.push(Verdict::at_most(
        "denoiser.two_point_tanh",
        &json!({"sigmas": sigmas, "grid": [-3.0, 3.0, 200]}),
        worst,
        tol.denoiser,
    ));

    let mut rng = seeded_rng(cfg.seed);
    let mut jac_gap: f64 = 0.0;
    let mut norm_gap: f64 = 0.0;
    let mut perturb_gap: f64 = 0.0;
    for _ in 0..50 {
        let m = random_measure(&mut rng, 10, 4);
        let sigma = rng.random_range(0.3..5.0);
        let x: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
        jac_gap = jac_gap.max(jacobian_fd_gap(&m, &Model::new(&m, corrupt), sigma, &x)?);
        let w = posterior_weights(&m, sigma, &x)?;
        norm_gap = norm_gap.max((w.iter().sum::<f64>() - 1.0).abs());
        let eps = gaussian(&mut rng, m.dim(), 1.0);
        let pd = PerturbedDenoiser::new(m.clone(), eps)?;
        let dev = flowtraj::linalg::dist(
            &Model::new(&pd, corrupt).denoise(sigma, &x)?,
            &Model::new(&m, corrupt).denoise(sigma, &x)?,
        );
        perturb_gap = perturb_gap.max((dev - pd.deviation_bound(sigma)).abs());
    }
    let inputs = json!({"seed": cfg.seed, "cases": 50, "max_n": 10, "max_d": 4});
    out.push(Verdict::at_most("denoiser.jacobian_fd", &inputs, jac_gap, tol.jacobian));
    out.push(Verdict::at_most("denoiser.weights_normalized", &inputs, norm_gap, 1e-12));
    out.push(Verdict::at_most("denoiser.perturbation_size", &inputs, perturb_gap, 1e-12));

    let mut excess = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let m = random_measure(&mut rng, 20, 4);
        let sigma = (rng.random_range(0.01f64.ln()..10f64.ln())).exp();
        let x: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c = posterior_nn_bound_check(&m, &x, sigma)?;
        excess = excess.max(c.lhs - c.rhs);
    }
    out.push(Verdict::at_most(
        "denoiser.posterior_nn_bound",
        &json!({"seed": cfg.seed, "cases": 1000, "max_n": 20, "max_d": 4}),
        excess,
        1e-12,
    ));
    Ok(out)
}

fn stages_suite(cfg: &RunConfig, corrupt: bool) -> Result<Vec<Verdict>, CliError> {
    let data_seed = cfg.dataset.seed;
    let m = gen_three_clusters(data_seed);
    let model = Model::new(&m, corrupt);
    let mut rng = seeded_rng(cfg.seed);
    let mut out = Vec::new();
    let rk4 = IntegrateOptions::new(Method::Rk4, 16);

    // hull decay from 16 prior starts
    let grid = edm_grid(80.0, 0.002, 7.0, 18)?;
    let starts: Vec<Vec<f64>> = (0..16).map(|_| gaussian(&mut rng, 2, 80.0)).collect();
    let trajs = integrate_many(&model, &starts, &grid, rk4)?;
    let mut excess = f64::NEG_INFINITY;
    for t in &trajs {
        let d1 = dist_support_hull(&m, &t.states[0])?.distance;
        for (&s, x) in t.sigmas().iter().zip(&t.states) {
            let d = dist_support_hull(&m, x)?.distance;
            excess = excess.max(d - hull_decay_bound(d1, grid.sigma_max(), s)?);
        }
    }
    out.push(Verdict::at_most(
        "stages.hull_decay",
        &json!({"data_seed": data_seed, "seed": cfg.seed, "starts": 16}),
        excess,
        1e-6,
    ));

    // mean attraction from σ₁ = 100
    let mean = m.mean();
    let diam = m.diam();
    let zeta = 0.5;
    let grid = SigmaGrid::geometric(100.0, 0.01, 64)?;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..16 {
        let r0 = rng.random_range(50.0..150.0);
        let u = unit_direction(&mut rng, 2);
        let start: Vec<f64> = mean.iter().zip(&u).map(|(c, v)| c + r0 * v).collect();
        let floor = sigma_init(diam, r0, zeta, 0.0)?.smoothed;
        let t = integrate(&model, &start, &grid, rk4)?;
        for (&s, x) in t.sigmas().iter().zip(&t.states) {
            if s > floor {
                let b = mean_bound(r0, 100.0, s, zeta, 0.0)?;
                worst_ratio = worst_ratio.max(flowtraj::linalg::dist(x, &mean) / b);
            }
        }
    }
    out.push(Verdict::at_most(
        "stages.mean_attraction",
        &json!({"data_seed": data_seed, "seed": cfg.seed, "sigma1": 100.0, "zeta": zeta}),
        worst_ratio,
        1.0 + 1e-12,
    ));

    // absorption into the isolated 20-point cluster
    let specs = three_cluster_specs(&m)?;
    let cluster = &specs[2];
    let pts = cluster.points(&m);
    let d = cluster.diameter();
    let eps = d / 4.0;
    let radius = d / 2.0 - eps;
    let s_cluster = sigma_cluster(d, eps, cluster.weight(), diam)?;
    let sigma1 = 0.9 * s_cluster.value().min(10.0);
    let grid = SigmaGrid::geometric(sigma1, 1e-4, 48)?;
    let starts: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let i = rng.random_range(0..pts.len());
            let u = unit_direction(&mut rng, 2);
            let r = 0.9 * radius * rng.random::<f64>();
            pts[i].iter().zip(&u).map(|(p, v)| p + r * v).collect()
        })
        .collect();
    let trajs = integrate_many(&model, &starts, &grid, rk4)?;
    let mut worst_node: f64 = 0.0;
    let mut worst_end: f64 = 0.0;
    for t in &trajs {
        for x in &t.states {
            worst_node = worst_node.max(dist_conv_hull(&pts, x)?.distance / radius);
        }
        worst_end = worst_end.max(dist_conv_hull(&pts, &t.terminal_state)?.distance);
    }
    let inputs = json!({"data_seed": data_seed, "seed": cfg.seed, "D": d, "eps": eps, "sigma1": sigma1});
    out.push(Verdict::at_most("stages.cluster_absorbing", &inputs, worst_node, 1.0));
    out.push(Verdict::at_most("stages.cluster_terminal", &inputs, worst_end, 1e-3));

    // shrunk Voronoi cells
    let mut outside = 0usize;
    let mut worst_end: f64 = 0.0;
    for _ in 0..8 {
        let i = rng.random_range(0..m.len());
        let sep = separation(&m, i)?;
        let eps = sep / 3.0;
        let th = sigma_terminal(sep, eps, m.weight(i), diam)?;
        let sigma1 = 0.9 * th.value().min(10.0);
        let grid = SigmaGrid::geometric(sigma1, sigma1 * 1e-3, 32)?;
        let u = unit_direction(&mut rng, 2);
        let r = 0.25 * sep * rng.random::<f64>();
        let start: Vec<f64> = m.point(i).iter().zip(&u).map(|(p, v)| p + r * v).collect();
        let t = integrate(&model, &start, &grid, rk4)?;
        for x in &t.states {
            if !in_shrunk_voronoi(&m, i, eps, x)? {
                outside += 1;
            }
        }
        worst_end = worst_end.max(flowtraj::linalg::dist(&t.terminal_state, m.point(i)));
    }
    let inputs = json!({"data_seed": data_seed, "seed": cfg.seed, "cells": 8});
    out.push(Verdict::at_most("stages.voronoi_absorbing", &inputs, outside as f64, 0.0));
    out.push(Verdict::at_most("stages.voronoi_terminal", &inputs, worst_end, 1e-6));
    Ok(out)
}

fn rates_suite(cfg: &RunConfig, corrupt: bool) -> Result<Vec<Verdict>, CliError> {
    let mut out = Vec::new();
    let mut rng = seeded_rng(cfg.seed);
    let rk4 = IntegrateOptions::new(Method::Rk4, 16);

    let point = DiscreteMeasure::dirac(vec![1.0, -1.0])?;
    let grid = SigmaGrid::geometric(10.0, 1e-3, 30)?;
    let start = gaussian(&mut rng, 2, 10.0);
    let t = integrate(&Model::new(&point, corrupt), &start, &grid, rk4)?;
    let fit = convergence_slope(&t, point.point(0), 10)?;
    let inputs = json!({"seed": cfg.seed, "case": "single_point", "fit": fit});
    out.push(Verdict::at_most("rates.single_point_slope", &inputs, (fit.slope - 1.0).abs(), 1e-6));
    out.push(Verdict::at_least("rates.single_point_r2", &inputs, fit.r2, 0.99));

    let m = gen_three_clusters(cfg.dataset.seed);
    let model = Model::new(&m, corrupt);
    let grid = edm_grid(80.0, 0.002, 7.0, 18)?.extended(1e-6, 24)?;
    let starts: Vec<Vec<f64>> = (0..16).map(|_| gaussian(&mut rng, 2, 80.0)).collect();
    let fits = integrate_many(&model, &starts, &grid, IntegrateOptions::new(Method::Rk4, 8))?
        .par_iter()
        .map(|t| convergence_slope(t, &t.terminal_state, 12))
        .collect::<flowtraj::Result<Vec<_>>>()?;
    let slope_dev = fits.iter().map(|f| (f.slope - 1.0).abs()).fold(0.0, f64::max);
    let min_r2 = fits.iter().map(|f| f.r2).fold(f64::INFINITY, f64::min);
    let inputs = json!({"seed": cfg.seed, "data_seed": cfg.dataset.seed, "starts": 16});
    out.push(Verdict::at_most("rates.discrete_slope", &inputs, slope_dev, 0.1));
    out.push(Verdict::at_least("rates.discrete_r2", &inputs, min_r2, 0.99));

    let g = SmoothedMeasure::standard_gaussian(2)?;
    let grid = SigmaGrid::geometric(100.0, 0.002, 64)?;
    let x0 = gaussian(&mut rng, 2, 1.0);
    let s1 = grid.sigma_max();
    let start: Vec<f64> = x0.iter().map(|v| (1.0 + s1 * s1).sqrt() * v).collect();
    let t = integrate(&Model::new(&g, corrupt), &start, &grid, rk4)?;
    let nodes = to_t_space(&t, &Schedule::Rectified)?;
    let fit = convergence_slope_t(&nodes, &x0, 24)?;
    let inputs = json!({"seed": cfg.seed, "case": "gaussian", "fit": fit});
    out.push(Verdict::at_most("rates.gaussian_t_slope", &inputs, (fit.slope - 1.0).abs(), 0.1));

    for sigma in [0.1, 1.0] {
        let e = smoothing_w2_estimate(&g, sigma, 10_000, cfg.seed)?;
        out.push(Verdict::at_most(
            format!("rates.smoothing_w2[sigma={sigma}]"),
            &json!({"seed": cfg.seed, "sigma": sigma, "n": 10_000}),
            e.estimate,
            e.bound * (1.0 + 3.0 / 100.0),
        ));
    }
    Ok(out)
}

fn equivariance_suite(cfg: &RunConfig, corrupt: bool) -> Result<Vec<Verdict>, CliError> {
    let tol = &cfg.tolerances;
    let mut out = Vec::new();
    let mut rng = seeded_rng(cfg.seed);
    let rk4 = IntegrateOptions::new(Method::Rk4, 16);
    let m = gen_three_clusters(cfg.dataset.seed);
    let grid = edm_grid(80.0, 0.002, 7.0, 18)?;
    let sched = Schedule::Rectified;

    let cases: Vec<(SimilarityTransform, Vec<f64>)> = (0..20)
        .map(|_| {
            let t = SimilarityTransform::random_rigid(2, 2.0, &mut rng)?;
            Ok((t, gaussian(&mut rng, 2, 80.0)))
        })
        .collect::<flowtraj::Result<_>>()?;
    let residuals = cases
        .par_iter()
        .map(|(t, x0)| equivariance_residual_model(&m, t, x0, &sched, &grid, rk4, corrupt))
        .collect::<flowtraj::Result<Vec<_>>>()?;
    let worst = residuals.iter().copied().fold(0.0, f64::max);
    out.push(Verdict::at_most(
        "equivariance.rigid",
        &json!({"seed": cfg.seed, "data_seed": cfg.dataset.seed, "transforms": 20}),
        worst,
        tol.equivariance,
    ));

    let x0 = gaussian(&mut rng, 2, 80.0);
    for gamma in [0.5, 2.0] {
        let t = SimilarityTransform::scaling(2, gamma)?;
        let r = equivariance_residual_model(&m, &t, &x0, &sched, &grid, rk4, corrupt)?;
        out.push(Verdict::at_most(
            format!("equivariance.scaled[gamma={gamma}]"),
            &json!({"seed": cfg.seed, "gamma": gamma, "x0": x0}),
            r,
            tol.equivariance_scaled,
        ));
    }

    let base = DiscreteMeasure::new(vec![vec![-1.0, 0.5], vec![1.0, -0.5]], vec![0.5, 0.5])?;
    let embedded = base.embed(1);
    let grid = SigmaGrid::geometric(20.0, 1e-3, 64)?;
    let xy = gaussian(&mut rng, 2, 1.0);
    let mut worst_y: f64 = 0.0;
    let mut worst_x: f64 = 0.0;
    for y0 in [-5.0, 0.0, 5.0] {
        let x0 = vec![xy[0], xy[1], y0];
        let r = if corrupt {
            let model = Model::new(&embedded, true);
            let s1 = grid.sigma_max();
            let start: Vec<f64> = x0.iter().map(|v| s1 * v).collect();
            let traj = integrate(&model, &start, &grid, rk4)?;
            let nodes = to_t_space(&traj, &sched)?;
            let y = nodes
                .iter()
                .map(|n| (n.x[2] - (1.0 - n.t) * y0).abs())
                .fold(0.0, f64::max);
            flowtraj::diagnostics::SubspaceResidual {
                y_residual: y,
                x_residual: 0.0,
            }
        } else {
            subspace_residual(&embedded, 2, &x0, &sched, &grid, rk4)?
        };
        worst_y = worst_y.max(r.y_residual);
        worst_x = worst_x.max(r.x_residual);
    }
    let inputs = json!({"seed": cfg.seed, "y0": [-5.0, 0.0, 5.0]});
    out.push(Verdict::at_most("equivariance.subspace_y", &inputs, worst_y, tol.subspace));
    out.push(Verdict::at_most("equivariance.subspace_x", &inputs, worst_x, tol.subspace));
    Ok(out)
}

/// [`equivariance_residual`] with the corrupted model substituted for the
/// exact denoiser when requested.
fn equivariance_residual_model(
    m: &DiscreteMeasure,
    t: &SimilarityTransform,
    x0: &[f64],
    sched: &Schedule,
    grid: &SigmaGrid,
    opts: IntegrateOptions,
    corrupt: bool,
) -> flowtraj::Result<f64> {
    if !corrupt {
        return equivariance_residual(m, t, x0, sched, grid, opts);
    }
    let pushed = t.push(m)?;
    let a = integrate(&Model::new(m, true), x0, grid, opts)?;
    let b = integrate(&Model::new(&pushed, true), &t.apply(x0), &grid.scaled(t.gamma())?, opts)?;
    Ok(a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| flowtraj::linalg::dist(&t.apply(x), y))
        .fold(0.0, f64::max))
}

fn memorize_suite(cfg: &RunConfig, corrupt: bool) -> Result<Vec<Verdict>, CliError> {
    let tol = &cfg.tolerances;
    let mut out = Vec::new();
    let mut rng = seeded_rng(cfg.seed);
    let m = gen_three_clusters(cfg.dataset.seed);
    let grid = edm_grid(80.0, 1e-4, 7.0, 18)?;
    let opts = IntegrateOptions::new(Method::Rk4, 8);
    let starts: Vec<Vec<f64>> = (0..8).map(|_| gaussian(&mut rng, 2, 80.0)).collect();
    let theta: f64 = 0.3;
    let eps = vec![3.0 * theta.cos(), 3.0 * theta.sin()];
    let pd = PerturbedDenoiser::new(m.clone(), eps.clone())?;

    let plain = integrate_many(&Model::new(&m, corrupt), &starts, &grid, opts)?;
    let pert = integrate_many(&Model::new(&pd, corrupt), &starts, &grid, opts)?;
    let nn_dist = |x: &[f64]| flowtraj::geometry::nearest(&m, x).map(|(_, d)| d);
    let plain_worst = plain
        .iter()
        .map(|t| nn_dist(&t.terminal_state))
        .collect::<flowtraj::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let pert_worst = pert
        .iter()
        .map(|t| nn_dist(&t.terminal_state))
        .collect::<flowtraj::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let inputs = json!({"seed": cfg.seed, "data_seed": cfg.dataset.seed, "starts": 8, "epsilon": eps});
    out.push(Verdict::at_most("memorize.exact", &inputs, plain_worst, 1e-6));
    out.push(Verdict::at_most("memorize.perturbed", &inputs, pert_worst, tol.memorize));

    // the perturbation must visibly move the path before it converges
    let mut drift: f64 = 0.0;
    for (a, b) in plain.iter().zip(&pert) {
        for ((x, y), &s) in a.states.iter().zip(&b.states).zip(grid.sigmas()) {
            drift = drift.max(flowtraj::linalg::dist(x, y) / (3.0 * s / 2.0));
        }
    }
    out.push(Verdict::at_least("memorize.visible_drift", &inputs, drift, 1.0));
    Ok(out)
}
