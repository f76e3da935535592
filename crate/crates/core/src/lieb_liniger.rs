//! Lieb-Liniger variational energies assembled from output-field
//! correlations: closed-form scale optimization, landscape minimization,
//! unit-density rescaling and the spatial correlator map.

use crate::cavity::{
    coupling_for_anharmonicity, mhz, omega_0, simulate, to_mhz, CavityError, CavityParams, CorrelationSet,
    SimOptions,
};
use crate::linalg::{C64, ZERO};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LlError {
    /// `T0 = 0`; carries the limiting scale `2 v W0 / (mu N0)` and energy
    /// `-(mu N0)^2 / (4 v W0)`.
    #[error("kinetic term vanishes; limit scale {s} and energy {energy}")]
    DegenerateScale { s: f64, energy: f64 },
    #[error("x / s = {tau} exceeds the tau grid end {tau_max}")]
    OutOfRange { tau: f64, tau_max: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error(transparent)]
    Cavity(#[from] CavityError),
    #[error(transparent)]
    Energy(#[from] LlError),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LandscapePoint {
    /// Effective anharmonicity, rad/us.
    pub alpha: f64,
    /// Drive rate, rad/us.
    pub omega: f64,
    pub flux: f64,
    pub kinetic_integral: f64,
    pub g2_zero: f64,
}

impl LandscapePoint {
    /// `G2(0) = g2(0) G1(0)^2`.
    pub fn w0(&self) -> f64 {
        self.g2_zero * self.flux * self.flux
    }

    fn check(&self) -> Result<(), LlError> {
        let ok = [self.flux, self.kinetic_integral, self.g2_zero]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(LlError::Invalid("flux, kinetic integral and g2 must be finite and >= 0".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EnergyBreakdown {
    pub n_term: f64,
    pub t_term: f64,
    pub w_term: f64,
    pub s_opt: f64,
    pub e_total: f64,
    /// Set when the kinetic term vanished and the `T0 -> 0` limit was used.
    pub degenerate: bool,
}

/// `E(s) = T0/s^3 + v W0/s^2 - mu N0/s`.
pub fn energy_at_scale(t0: f64, w0: f64, n0: f64, v: f64, mu: f64, s: f64) -> f64 {
    t0 / (s * s * s) + v * w0 / (s * s) - mu * n0 / s
}

/// Minimizer of `E(s)` for `s > 0`.
pub fn optimal_scale(t0: f64, w0: f64, n0: f64, v: f64, mu: f64) -> Result<f64, LlError> {
    if !(n0 > 0.0 && mu > 0.0 && v >= 0.0 && t0 >= 0.0 && w0 >= 0.0) || !(t0 + w0 + n0 + v + mu).is_finite() {
        return Err(LlError::Invalid(format!(
            "need T0 >= 0, W0 >= 0, N0 > 0, mu > 0, v >= 0 (got {t0}, {w0}, {n0}, {mu}, {v})"
        )));
    }
    let b = v * w0;
    let s = (b + (b * b + 3.0 * mu * n0 * t0).sqrt()) / (mu * n0);
    if t0 == 0.0 {
        let energy = if b > 0.0 { -(mu * n0).powi(2) / (4.0 * b) } else { f64::NEG_INFINITY };
        return Err(LlError::DegenerateScale { s, energy });
    }
    Ok(s)
}

fn breakdown(t0: f64, w0: f64, n0: f64, v: f64, mu: f64, s: f64, degenerate: bool) -> EnergyBreakdown {
    let n_term = -mu * n0 / s;
    let t_term = t0 / (s * s * s);
    let w_term = v * w0 / (s * s);
    EnergyBreakdown {
        n_term,
        t_term,
        w_term,
        s_opt: s,
        e_total: n_term + t_term + w_term,
        degenerate,
    }
}

pub fn energy_from_correlations(point: &LandscapePoint, v: f64, mu: f64) -> Result<EnergyBreakdown, LlError> {
    point.check()?;
    let s = optimal_scale(point.kinetic_integral, point.w0(), point.flux, v, mu)?;
    Ok(breakdown(point.kinetic_integral, point.w0(), point.flux, v, mu, s, false))
}

/// As `energy_from_correlations`, falling back to the `T0 -> 0` limit with
/// the `degenerate` flag set.
pub fn energy_or_limit(point: &LandscapePoint, v: f64, mu: f64) -> Result<EnergyBreakdown, LlError> {
    match energy_from_correlations(point, v, mu) {
        Err(LlError::DegenerateScale { s, .. }) => Ok(breakdown(0.0, point.w0(), point.flux, v, mu, s, true)),
        other => other,
    }
}

fn rank(a: (&LandscapePoint, f64), b: (&LandscapePoint, f64)) -> Ordering {
    a.1.total_cmp(&b.1)
        .then(a.0.omega.total_cmp(&b.0.omega))
        .then(a.0.alpha.total_cmp(&b.0.alpha))
}

/// Grid argmin of the energy; ties go to smaller drive, then smaller
/// anharmonicity.
pub fn find_ground_state(grid: &[LandscapePoint], v: f64, mu: f64) -> Result<(usize, EnergyBreakdown), LlError> {
    if grid.is_empty() {
        return Err(LlError::Invalid("empty landscape".into()));
    }
    let energies: Vec<EnergyBreakdown> = grid
        .par_iter()
        .map(|p| energy_or_limit(p, v, mu))
        .collect::<Result<_, _>>()?;
    let best = (0..grid.len())
        .min_by(|&i, &j| rank((&grid[i], energies[i].e_total), (&grid[j], energies[j].e_total)))
        .unwrap();
    Ok((best, energies[best]))
}

/// `E - E_min` over the grid, in grid order.
pub fn relative_energies(grid: &[LandscapePoint], v: f64, mu: f64) -> Result<Vec<f64>, LlError> {
    let e: Vec<f64> = grid
        .iter()
        .map(|p| energy_or_limit(p, v, mu).map(|b| b.e_total))
        .collect::<Result<_, _>>()?;
    let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(e.into_iter().map(|x| x - min).collect())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Rescaled {
    pub rho: f64,
    pub v_tilde: f64,
    pub mu_tilde: f64,
    pub s_tilde_min: f64,
}

pub fn rescale_to_unit_density(point: &LandscapePoint, bd: &EnergyBreakdown, v: f64, mu: f64) -> Rescaled {
    let rho = point.flux / bd.s_opt;
    Rescaled {
        rho,
        v_tilde: v / rho,
        mu_tilde: mu / (rho * rho),
        s_tilde_min: point.flux,
    }
}

/// Energy per unit length at unit density for scale `s_tilde`.
pub fn lieb_liniger_energy(point: &LandscapePoint, s_tilde_min: f64, v_tilde: f64) -> f64 {
    point.kinetic_integral / s_tilde_min.powi(3) + v_tilde * point.w0() / (s_tilde_min * s_tilde_min)
}

fn interpolate<T>(tau: &[f64], ys: &[T], t: f64) -> T
where
    T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    let k = tau.partition_point(|&x| x <= t).clamp(1, tau.len() - 1);
    let (t0, t1) = (tau[k - 1], tau[k]);
    let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
    ys[k - 1] * (1.0 - w) + ys[k] * w
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpatialCorrelators {
    pub x: Vec<f64>,
    pub g1_x: Vec<C64>,
    pub g2_x: Vec<f64>,
}

/// `g1(x) = G1(x/s)/G1(0)` and `g2(x) = g2(x/s)` by linear interpolation.
pub fn map_correlators(corr: &CorrelationSet, s_tilde_min: f64, x_grid: &[f64]) -> Result<SpatialCorrelators, LlError> {
    let tau = &corr.tau_grid;
    if tau.len() < 2 || corr.g1.len() != tau.len() || corr.g2.len() != tau.len() || !(s_tilde_min > 0.0) {
        return Err(LlError::Invalid("correlation set and scale must be consistent".into()));
    }
    let tau_max = tau[tau.len() - 1];
    let g0 = corr.g1[0];
    if g0 == ZERO {
        return Err(LlError::Invalid("G1(0) vanishes".into()));
    }
    let mut g1_x = Vec::with_capacity(x_grid.len());
    let mut g2_x = Vec::with_capacity(x_grid.len());
    for &x in x_grid {
        let t = x / s_tilde_min;
        if !(t >= tau[0] && t <= tau_max) {
            return Err(LlError::OutOfRange { tau: t, tau_max });
        }
        if t == tau[0] {
            g1_x.push(corr.g1[0] / g0);
            g2_x.push(corr.g2[0]);
        } else {
            g1_x.push(interpolate(tau, &corr.g1, t) / g0);
            g2_x.push(interpolate(tau, &corr.g2, t));
        }
    }
    Ok(SpatialCorrelators {
        x: x_grid.to_vec(),
        g1_x,
        g2_x,
    })
}

/// First `x` where `(|g1_x| - t) / (1 - t)` drops below `level`, with `t`
/// the value at the end of the grid (the coherent floor).
pub fn correlation_length(c: &SpatialCorrelators, level: f64) -> Option<f64> {
    let tail = c.g1_x.last()?.norm();
    if !(tail < 1.0 - 1e-9) {
        return None;
    }
    let f: Vec<f64> = c.g1_x.iter().map(|z| (z.norm() - tail) / (1.0 - tail)).collect();
    (1..f.len()).find(|&k| f[k] < level).map(|k| {
        let (a, b) = (f[k - 1], f[k]);
        c.x[k - 1] + (a - level) / (a - b) * (c.x[k] - c.x[k - 1])
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GroundStateResult {
    pub v: f64,
    pub mu: f64,
    pub index: usize,
    pub alpha_min: f64,
    pub omega_min: f64,
    pub breakdown: EnergyBreakdown,
    pub rho: f64,
    pub s_tilde_min: f64,
    pub v_tilde: f64,
    pub mu_tilde: f64,
    pub e_ll: f64,
    pub correlators: Option<SpatialCorrelators>,
}

/// Landscape scalars plus, optionally, the full correlation data per point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Landscape {
    pub points: Vec<LandscapePoint>,
    pub correlations: Option<Vec<CorrelationSet>>,
}

/// Ground state, rescaling and spatial correlators at one `v`.
pub fn ground_state(landscape: &Landscape, v: f64, mu: f64, x_grid: &[f64]) -> Result<GroundStateResult, LlError> {
    let (index, bd) = find_ground_state(&landscape.points, v, mu)?;
    let p = &landscape.points[index];
    let r = rescale_to_unit_density(p, &bd, v, mu);
    let correlators = match &landscape.correlations {
        Some(c) if !x_grid.is_empty() => Some(map_correlators(&c[index], r.s_tilde_min, x_grid)?),
        _ => None,
    };
    Ok(GroundStateResult {
        v,
        mu,
        index,
        alpha_min: p.alpha,
        omega_min: p.omega,
        breakdown: bd,
        rho: r.rho,
        s_tilde_min: r.s_tilde_min,
        v_tilde: r.v_tilde,
        mu_tilde: r.mu_tilde,
        e_ll: lieb_liniger_energy(p, r.s_tilde_min, r.v_tilde),
        correlators,
    })
}

/// One ground state per `v` on a shared landscape, sorted by `v_tilde`.
pub fn interaction_scan(
    landscape: &Landscape,
    v_list: &[f64],
    mu: f64,
    x_grid: &[f64],
) -> Result<Vec<GroundStateResult>, LlError> {
    let mut out: Vec<GroundStateResult> = v_list
        .par_iter()
        .map(|&v| ground_state(landscape, v, mu, x_grid))
        .collect::<Result<_, _>>()?;
    out.sort_by(|a, b| a.v_tilde.total_cmp(&b.v_tilde));
    Ok(out)
}

/// Axes of a simulated landscape: anharmonicities in MHz and drive rates
/// as multiples of `Omega_0`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    pub alpha_mhz: Vec<f64>,
    pub omega_factor: Vec<f64>,
}

impl GridSpec {
    /// `n_alpha` linear points on `[1.5, 5.5]` MHz times `n_omega`
    /// logarithmic points on `[1, 4.5] Omega_0`.
    pub fn standard(n_alpha: usize, n_omega: usize) -> Self {
        let lin = |a: f64, b: f64, n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![a];
            }
            (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
        };
        GridSpec {
            alpha_mhz: lin(1.5, 5.5, n_alpha),
            omega_factor: lin(0.0, 4.5f64.ln(), n_omega).into_iter().map(f64::exp).collect(),
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::standard(8, 8)
    }
}

/// Simulates every grid point on the constant upper-polariton path of
/// `template`. Points are ordered alpha-major.
pub fn simulate_landscape(
    grid: &GridSpec,
    template: &CavityParams,
    opts: &SimOptions,
    keep_correlations: bool,
) -> Result<Landscape, LandscapeError> {
    let biases: Vec<CavityParams> = grid
        .alpha_mhz
        .par_iter()
        .map(|&a| {
            coupling_for_anharmonicity(mhz(a), template.omega_d, template, mhz(0.5), mhz(40.0), mhz(1e-4))
                .map(|b| b.params)
        })
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, f64)> = (0..biases.len())
        .flat_map(|i| grid.omega_factor.iter().map(move |&f| (i, f)))
        .collect();
    let runs: Vec<(LandscapePoint, CorrelationSet)> = jobs
        .par_iter()
        .map(|&(i, f)| {
            let p = biases[i].with_drive(f * omega_0());
            let r = simulate(&p, opts)?;
            let point = LandscapePoint {
                alpha: mhz(grid.alpha_mhz[i]),
                omega: p.drive,
                flux: r.flux,
                kinetic_integral: r.kinetic_integral,
                g2_zero: r.g2_zero,
            };
            Ok::<_, CavityError>((point, r))
        })
        .collect::<Result<_, _>>()?;
    let (points, corr): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok(Landscape {
        points,
        correlations: keep_correlations.then_some(corr),
    })
}

/// `(alpha / 2 pi MHz, Omega / Omega_0)` of a landscape point.
pub fn point_axes(p: &LandscapePoint) -> (f64, f64) {
    (to_mhz(p.alpha), p.omega / omega_0())
}
