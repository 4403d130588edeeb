//! Scheduling functions `(α_t, β_t)` and the three time axes `t`, `σ`, `λ`.
//!
//! The noise-to-signal ratio `σ(t) = β(t) / α(t)` is strictly decreasing on
//! `(0, 1]` with `σ(1) = 0`, and `λ = -ln σ`. Sampling runs over a descending
//! [`SigmaGrid`], typically the EDM polynomial discretization from [`edm_grid`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Scheduling functions for the interpolation path `x_t = α_t x_1 + β_t z`.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// `α_t = t`, `β_t = 1 - t`.
    Rectified,
    /// Sampled `(t, α, β)` values with monotone cubic interpolation.
    Tabulated(Tabulated),
    /// Schedule of a similarity-transformed problem: `ᾱ_t = s_t α_t / γ`,
    /// `β̄_t = s_t β_t` with `s_t = γ^t`. Its ratio is `σ̄(t) = γ σ(t)`.
    Similarity { base: Box<Schedule>, gamma: f64 },
}

impl Schedule {
    pub fn similarity(base: Schedule, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return domain(format!("similarity scale must be positive, got {gamma}"));
        }
        Ok(Schedule::Similarity {
            base: Box::new(base),
            gamma,
        })
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_closed_unit(t)?;
        Ok(match self {
            Schedule::Rectified => t,
            Schedule::Tabulated(tab) => tab.alpha.eval(t),
            Schedule::Similarity { base, gamma } => gamma.powf(t) * base.alpha(t)? / gamma,
        })
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        check_closed_unit(t)?;
        Ok(match self {
            Schedule::Rectified => 1.0 - t,
            Schedule::Tabulated(tab) => tab.beta.eval(t),
            Schedule::Similarity { base, gamma } => gamma.powf(t) * base.beta(t)?,
        })
    }

    /// The scale factor `s_t` relating this schedule to its base; `1` for
    /// schedules that are not similarity transforms.
    pub fn scale_factor(&self, t: f64) -> Result<f64> {
        check_closed_unit(t)?;
        Ok(match self {
            Schedule::Similarity { gamma, .. } => gamma.powf(t),
            _ => 1.0,
        })
    }

    /// Noise-to-signal ratio `σ(t) = β(t)/α(t)` for `t ∈ (0, 1]`.
    pub fn sigma_of_t(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return domain(format!("t must lie in (0, 1], got {t}"));
        }
        match self {
            Schedule::Rectified => Ok((1.0 - t) / t),
            Schedule::Tabulated(tab) => {
                if t == 1.0 {
                    return Ok(0.0);
                }
                Ok(tab.beta.eval(t) / tab.alpha.eval(t))
            }
            Schedule::Similarity { base, gamma } => Ok(gamma * base.sigma_of_t(t)?),
        }
    }

    /// Inverse of [`Schedule::sigma_of_t`]; `σ = 0` maps to `t = 1`.
    pub fn t_of_sigma(&self, sigma: f64) -> Result<f64> {
        if !sigma.is_finite() || sigma < 0.0 {
            return domain(format!("σ must be finite and nonnegative, got {sigma}"));
        }
        if sigma == 0.0 {
            return Ok(1.0);
        }
        match self {
            Schedule::Rectified => Ok(1.0 / (1.0 + sigma)),
            Schedule::Tabulated(tab) => Ok(tab.t_of_sigma(sigma)),
            Schedule::Similarity { base, gamma } => base.t_of_sigma(sigma / gamma),
        }
    }

    /// Loads a tabulated schedule from a `t,alpha,beta` CSV file.
    pub fn load_tabulated(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(Schedule::Tabulated(Tabulated::from_reader(file)?))
    }
}

fn check_closed_unit(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return domain(format!("t must lie in [0, 1], got {t}"));
    }
    Ok(())
}

/// Sampled scheduling functions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    alpha: Pchip,
    beta: Pchip,
}

impl Tabulated {
    /// Builds a schedule from samples. Requires `t` strictly increasing from 0
    /// to 1, `α` nondecreasing from 0 to 1, `β` nonincreasing from 1 to 0,
    /// `α > 0` for `t > 0` and `σ = β/α` strictly decreasing at the samples.
    pub fn new(t: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let n = t.len();
        if n < 2 || alpha.len() != n || beta.len() != n {
            return domain("tabulated schedule needs at least two (t, α, β) rows of equal length");
        }
        if t.iter().chain(&alpha).chain(&beta).any(|v| !v.is_finite()) {
            return domain("tabulated schedule contains non-finite values");
        }
        if t[0] != 0.0 || t[n - 1] != 1.0 {
            return domain("tabulated schedule must start at t=0 and end at t=1");
        }
        if alpha[0] != 0.0 || alpha[n - 1] != 1.0 || beta[0] != 1.0 || beta[n - 1] != 0.0 {
            return domain("tabulated schedule must satisfy α(0)=β(1)=0 and α(1)=β(0)=1");
        }
        for k in 1..n {
            if t[k] <= t[k - 1] {
                return domain("tabulated t values must be strictly increasing");
            }
            if alpha[k] < alpha[k - 1] || beta[k] > beta[k - 1] {
                return domain("α must be nondecreasing and β nonincreasing");
            }
            if alpha[k] <= 0.0 {
                return domain("α must be positive for t > 0");
            }
            if k >= 2 && beta[k] / alpha[k] >= beta[k - 1] / alpha[k - 1] {
                return domain("σ = β/α must be strictly decreasing");
            }
        }
        Ok(Self {
            alpha: Pchip::new(t.clone(), alpha),
            beta: Pchip::new(t, beta),
        })
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["t", "alpha", "beta"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Parse(format!(
                "expected header \"t,alpha,beta\", got {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let (mut t, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad number {:?}: {e}", &rec[i])))
            };
            t.push(parse(0)?);
            a.push(parse(1)?);
            b.push(parse(2)?);
        }
        Self::new(t, a, b)
    }

    fn sigma(&self, t: f64) -> f64 {
        self.beta.eval(t) / self.alpha.eval(t)
    }

    /// Bisection on `t` until the bracket stops shrinking.
    fn t_of_sigma(&self, sigma: f64) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.sigma(mid) > sigma {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Debug, Clone, PartialEq)]
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                let (d0, d1) = (delta[k - 1], delta[k]);
                if d0 * d1 <= 0.0 {
                    d[k] = 0.0;
                } else {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { x, y, d }
    }

    fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let k = match self.x.partition_point(|&xi| xi <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }
}

fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() || del0 == 0.0 {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

/// `λ = -ln σ`.
pub fn lambda_of_sigma(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return domain(format!("λ is defined for finite σ > 0, got {sigma}"));
    }
    Ok(-sigma.ln())
}

/// `σ = e^{-λ}`.
pub fn sigma_of_lambda(lambda: f64) -> Result<f64> {
    if !lambda.is_finite() {
        return domain(format!("λ must be finite, got {lambda}"));
    }
    Ok((-lambda).exp())
}

/// A strictly decreasing list of positive σ values, plus the σ assigned to
/// the terminal (snapped) state, usually 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaGrid {
    sigmas: Vec<f64>,
    terminal: f64,
}

impl SigmaGrid {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        Self::with_terminal(sigmas, 0.0)
    }

    pub fn with_terminal(sigmas: Vec<f64>, terminal: f64) -> Result<Self> {
        if sigmas.is_empty() {
            return domain("σ grid must contain at least one node");
        }
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return domain("σ grid values must be finite and positive");
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return domain("σ grid must be strictly decreasing");
        }
        if !(terminal >= 0.0 && terminal < sigmas[sigmas.len() - 1]) {
            return domain("terminal σ must be nonnegative and below the last node");
        }
        Ok(Self { sigmas, terminal })
    }

    /// `n` log-equispaced nodes from `sigma_max` down to `sigma_min`.
    pub fn geometric(sigma_max: f64, sigma_min: f64, n: usize) -> Result<Self> {
        if !(sigma_max > sigma_min && sigma_min > 0.0) || n < 2 {
            return domain("geometric grid needs σ_max > σ_min > 0 and n ≥ 2");
        }
        let (a, b) = (sigma_max.ln(), sigma_min.ln());
        let mut sigmas: Vec<f64> = (0..n)
            .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
            .collect();
        sigmas[0] = sigma_max;
        sigmas[n - 1] = sigma_min;
        Self::new(sigmas)
    }

    /// Appends `extra` log-equispaced nodes continuing down to `sigma_end`.
    pub fn extended(&self, sigma_end: f64, extra: usize) -> Result<Self> {
        let last = self.sigma_min();
        if !(sigma_end > 0.0 && sigma_end < last) || extra == 0 {
            return domain("grid extension must go strictly below the current σ_min");
        }
        let (a, b) = (last.ln(), sigma_end.ln());
        let mut sigmas = self.sigmas.clone();
        sigmas.extend((1..=extra).map(|k| (a + (b - a) * k as f64 / extra as f64).exp()));
        *sigmas.last_mut().unwrap() = sigma_end;
        let terminal = if self.terminal < sigma_end { self.terminal } else { 0.0 };
        Self::with_terminal(sigmas, terminal)
    }

    /// Nodes `range` of this grid as a grid of its own.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Self::with_terminal(self.sigmas[range].to_vec(), self.terminal)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[self.sigmas.len() - 1]
    }

    pub fn terminal(&self) -> f64 {
        self.terminal
    }

    /// Every node multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::with_terminal(
            self.sigmas.iter().map(|s| s * factor).collect(),
            self.terminal * factor,
        )
    }
}

/// EDM polynomial discretization
/// `σ_n = (σ_max^{1/ρ} + n/N (σ_min^{1/ρ} - σ_max^{1/ρ}))^ρ`, `n = 0..=N`.
/// The endpoints are set to `σ_max` and `σ_min` exactly.
pub fn edm_grid(sigma_max: f64, sigma_min: f64, rho: f64, steps: usize) -> Result<SigmaGrid> {
    if !(sigma_max.is_finite() && sigma_max > sigma_min && sigma_min > 0.0) {
        return domain(format!(
            "EDM grid needs σ_max > σ_min > 0, got σ_max={sigma_max}, σ_min={sigma_min}"
        ));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return domain(format!("EDM exponent ρ must be positive, got {rho}"));
    }
    if steps == 0 {
        return domain("EDM grid needs at least one step");
    }
    let inv = 1.0 / rho;
    let (hi, lo) = (sigma_max.powf(inv), sigma_min.powf(inv));
    let mut sigmas: Vec<f64> = (0..=steps)
        .map(|n| (hi + n as f64 / steps as f64 * (lo - hi)).powf(rho))
        .collect();
    sigmas[0] = sigma_max;
    sigmas[steps] = sigma_min;
    SigmaGrid::new(sigmas)
}
