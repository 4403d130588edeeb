//! Fixed-grid integration of the flow-matching ODE in `λ = -ln σ`.
//!
//! Between consecutive grid nodes the state obeys `dz/dλ = m_{σ(λ)}(z) - z`,
//! advanced with a fixed number of Euler, Heun or classical RK4 substeps.
//! There is no adaptive error control: the grid and substep count fully
//! determine the arithmetic, so runs are bitwise reproducible.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{check_dim, domain, Error, Result};
use crate::linalg::all_finite;
use crate::schedule::{Schedule, SigmaGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Heun,
    Rk4,
}

impl Method {
    /// Classical order of accuracy.
    pub fn order(self) -> u32 {
        match self {
            Method::Euler => 1,
            Method::Heun => 2,
            Method::Rk4 => 4,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Heun => "heun",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "heun" => Ok(Method::Heun),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::Parse(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub method: Method,
    /// Substeps per grid interval.
    pub substeps: usize,
    /// Replace the final state by one denoiser evaluation at the last node.
    pub snap: bool,
    /// Record `m_σ(x_σ)` at every node.
    pub record_denoiser: bool,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            substeps: 4,
            snap: true,
            record_denoiser: false,
        }
    }
}

impl IntegrateOptions {
    pub fn new(method: Method, substeps: usize) -> Self {
        Self {
            method,
            substeps,
            ..Self::default()
        }
    }

    pub fn with_snap(mut self, snap: bool) -> Self {
        self.snap = snap;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_denoiser = true;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub method: Option<Method>,
    pub substeps: usize,
    pub measure_id: Option<String>,
    pub seed: Option<u64>,
}

/// States of one ODE solution at every node of a σ grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: SigmaGrid,
    pub states: Vec<Vec<f64>>,
    pub denoiser_outputs: Option<Vec<Vec<f64>>>,
    pub terminal_state: Vec<f64>,
    /// Whether `terminal_state` is the denoiser output at the last node.
    pub snapped: bool,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn sigmas(&self) -> &[f64] {
        self.grid.sigmas()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectories have at least one node")
    }

    pub fn dim(&self) -> usize {
        self.terminal_state.len()
    }

    /// CSV with header `step,sigma,lambda,x0..[,m0..]`, one row per node and a
    /// final row with `step = -1` holding the terminal state.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.dim();
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = vec!["step".into(), "sigma".into(), "lambda".into()];
        header.extend((0..d).map(|k| format!("x{k}")));
        if self.denoiser_outputs.is_some() {
            header.extend((0..d).map(|k| format!("m{k}")));
        }
        wtr.write_record(&header)?;
        let row = |step: String, sigma: f64, x: &[f64], m: Option<&[f64]>| -> Vec<String> {
            let mut r = vec![step, sigma.to_string(), (-sigma.ln()).to_string()];
            r.extend(x.iter().map(f64::to_string));
            if let Some(m) = m {
                r.extend(m.iter().map(f64::to_string));
            }
            r
        };
        let outputs = self.denoiser_outputs.as_ref();
        for (n, (&s, x)) in self.sigmas().iter().zip(&self.states).enumerate() {
            let m = outputs.map(|o| o[n].as_slice());
            wtr.write_record(row(n.to_string(), s, x, m))?;
        }
        let terminal_sigma = if self.snapped {
            self.grid.terminal()
        } else {
            self.grid.sigma_min()
        };
        let m_last = outputs.map(|o| o[o.len() - 1].as_slice());
        wtr.write_record(row("-1".into(), terminal_sigma, &self.terminal_state, m_last))?;
        wtr.flush()?;
        Ok(())
    }
}

fn rhs<D: Denoiser + ?Sized>(den: &D, lambda: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
    let m = den.denoise((-lambda).exp(), z)?;
    for ((o, mi), zi) in out.iter_mut().zip(&m).zip(z) {
        *o = mi - zi;
    }
    Ok(())
}

struct Stepper {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Stepper {
    fn new(d: usize) -> Self {
        Self {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }

    fn step<D: Denoiser + ?Sized>(&mut self, den: &D, method: Method, lambda: f64, h: f64, z: &mut [f64]) -> Result<()> {
        let d = z.len();
        match method {
            Method::Euler => {
                rhs(den, lambda, z, &mut self.k1)?;
                for k in 0..d {
                    z[k] += h * self.k1[k];
                }
            }
            Method::Heun => {
                rhs(den, lambda, z, &mut self.k1)?;
                for k in 0..d {
                    self.tmp[k] = z[k] + h * self.k1[k];
                }
                rhs(den, lambda + h, &self.tmp, &mut self.k2)?;
                for k in 0..d {
                    z[k] += 0.5 * h * (self.k1[k] + self.k2[k]);
                }
            }
            Method::Rk4 => {
                rhs(den, lambda, z, &mut self.k1)?;
                for k in 0..d {
                    self.tmp[k] = z[k] + 0.5 * h * self.k1[k];
                }
                rhs(den, lambda + 0.5 * h, &self.tmp, &mut self.k2)?;
                for k in 0..d {
                    self.tmp[k] = z[k] + 0.5 * h * self.k2[k];
                }
                rhs(den, lambda + 0.5 * h, &self.tmp, &mut self.k3)?;
                for k in 0..d {
                    self.tmp[k] = z[k] + h * self.k3[k];
                }
                rhs(den, lambda + h, &self.tmp, &mut self.k4)?;
                for k in 0..d {
                    z[k] += h / 6.0 * (self.k1[k] + 2.0 * self.k2[k] + 2.0 * self.k3[k] + self.k4[k]);
                }
            }
        }
        Ok(())
    }
}

/// Integrates from `x_start` at `grid[0]` through every node of `grid`.
pub fn integrate<D: Denoiser + ?Sized>(
    den: &D,
    x_start: &[f64],
    grid: &SigmaGrid,
    opts: IntegrateOptions,
) -> Result<Trajectory> {
    check_dim(den.dim(), x_start.len())?;
    if opts.substeps == 0 {
        return domain("substeps must be at least 1");
    }
    if !all_finite(x_start) {
        return Err(Error::Integration {
            step: 0,
            reason: "non-finite start state".into(),
        });
    }
    let sigmas = grid.sigmas();
    let mut states = Vec::with_capacity(sigmas.len());
    let mut z = x_start.to_vec();
    let mut stepper = Stepper::new(z.len());
    states.push(z.clone());
    for (n, pair) in sigmas.windows(2).enumerate() {
        let (la, lb) = (-pair[0].ln(), -pair[1].ln());
        let h = (lb - la) / opts.substeps as f64;
        for s in 0..opts.substeps {
            let lambda = la + h * s as f64;
            stepper.step(den, opts.method, lambda, h, &mut z)?;
            if !all_finite(&z) {
                return Err(Error::Integration {
                    step: n,
                    reason: format!("non-finite state after substep {s}"),
                });
            }
        }
        states.push(z.clone());
    }
    let denoiser_outputs = if opts.record_denoiser {
        Some(
            sigmas
                .iter()
                .zip(&states)
                .map(|(&s, x)| den.denoise(s, x))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let terminal_state = if opts.snap {
        match &denoiser_outputs {
            Some(out) => out[out.len() - 1].clone(),
            None => den.denoise(grid.sigma_min(), &z)?,
        }
    } else {
        z
    };
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        denoiser_outputs,
        terminal_state,
        snapped: opts.snap,
        meta: TrajectoryMeta {
            method: Some(opts.method),
            substeps: opts.substeps,
            measure_id: None,
            seed: None,
        },
    })
}

/// Integrates many starts concurrently; results keep the order of `starts`.
pub fn integrate_many<D: Denoiser + ?Sized>(
    den: &D,
    starts: &[Vec<f64>],
    grid: &SigmaGrid,
    opts: IntegrateOptions,
) -> Result<Vec<Trajectory>> {
    starts
        .par_iter()
        .map(|x| integrate(den, x, grid, opts))
        .collect()
}

/// One node of a trajectory expressed in the original time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TNode {
    pub t: f64,
    pub x: Vec<f64>,
}

/// Maps σ-space states to `x_t = α(t(σ)) x_σ`. A snapped terminal state is
/// appended at the time of the grid's terminal σ (`t = 1` for `σ = 0`).
pub fn to_t_space(traj: &Trajectory, schedule: &Schedule) -> Result<Vec<TNode>> {
    let mut out = Vec::with_capacity(traj.len() + 1);
    for (&s, x) in traj.sigmas().iter().zip(&traj.states) {
        out.push(t_node(schedule, s, x)?);
    }
    if traj.snapped {
        out.push(t_node(schedule, traj.grid.terminal(), &traj.terminal_state)?);
    }
    Ok(out)
}

fn t_node(schedule: &Schedule, sigma: f64, x: &[f64]) -> Result<TNode> {
    let t = schedule.t_of_sigma(sigma)?;
    let a = schedule.alpha(t)?;
    Ok(TNode {
        t,
        x: x.iter().map(|v| a * v).collect(),
    })
}

/// Inverse of [`to_t_space`] for a single node: `(σ(t), x_t / α(t))`.
pub fn from_t_node(node: &TNode, schedule: &Schedule) -> Result<(f64, Vec<f64>)> {
    let sigma = schedule.sigma_of_t(node.t)?;
    let a = schedule.alpha(node.t)?;
    Ok((sigma, node.x.iter().map(|v| v / a).collect()))
}
