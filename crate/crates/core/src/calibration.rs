//! Spectroscopy fits, the voltage-to-(g, Delta) control map with its
//! closed-loop tuner, and detection-efficiency calibration.
//!
//! Transmission fits work in rad/us like the rest of the crate; the voltage
//! map and tuner work in MHz (`value / 2 pi`) and volts.

use crate::cavity::{build_liouvillian, mhz, steady_state_me, CavityError, CavityParams};
use crate::linalg::{c, dag, C64};
use ndarray::{array, Array1, Array2};
use ndarray_linalg::{Inverse, LeastSquaresSvd, Solve, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("fit did not converge after {iterations} iterations")]
    FitDiverged {
        best: Box<TransmissionParams>,
        iterations: usize,
    },
    #[error("voltage samples are collinear or too few")]
    SingularDesign,
    #[error("voltage map is ill-conditioned (condition {0:.3e})")]
    IllConditioned(f64),
    #[error("tuner missed the target after {iterations} iterations (error {error:?} MHz)")]
    NotConverged {
        v: [f64; 2],
        iterations: usize,
        error: [f64; 2],
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cavity(#[from] CavityError),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransmissionParams {
    pub a: f64,
    pub omega_res: f64,
    pub omega_ge: f64,
    pub g: f64,
    pub gamma: f64,
    pub kappa: f64,
}

/// `A kappa / (i(w_res - w) + g^2 / (i(w_ge - w) + gamma/2) + kappa/2)`.
pub fn transmission(omega: f64, p: &TransmissionParams) -> C64 {
    let e = c(p.gamma / 2.0, p.omega_ge - omega);
    let d = c(p.kappa / 2.0, p.omega_res - omega) + p.g * p.g / e;
    c(p.a * p.kappa, 0.0) / d
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransmissionFit {
    pub params: TransmissionParams,
    /// Covariance of `[a, omega_res, omega_ge, g, gamma, kappa]`.
    pub covariance: Vec<Vec<f64>>,
    /// Unconstrained `g^2` estimate; may be slightly negative near `g = 0`.
    pub g_sq: f64,
    pub g_sq_sigma: f64,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl TransmissionFit {
    pub fn sigma(&self, k: usize) -> f64 {
        self.covariance[k][k].sqrt()
    }

    /// Image on `g` of `g^2 +- k sigma`, clipped at zero.
    pub fn g_interval(&self, k: f64) -> (f64, f64) {
        let lo = (self.g_sq - k * self.g_sq_sigma).max(0.0).sqrt();
        let hi = (self.g_sq + k * self.g_sq_sigma).max(0.0).sqrt();
        (lo, hi)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative cost change at convergence.
    pub tol: f64,
    /// Per-point weights on `|t|^2` residuals; unweighted when `None`.
    pub weights: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 500,
            tol: 1e-10,
            weights: None,
        }
    }
}

// internal coordinates: [a, omega_res - w0, omega_ge - w0, g^2, gamma, kappa]
type Theta = [f64; 6];

fn to_theta(p: &TransmissionParams, w0: f64) -> Theta {
    [p.a, p.omega_res - w0, p.omega_ge - w0, p.g * p.g, p.gamma, p.kappa]
}

fn from_theta(t: &Theta, w0: f64) -> TransmissionParams {
    TransmissionParams {
        a: t[0].abs(),
        omega_res: t[1] + w0,
        omega_ge: t[2] + w0,
        g: t[3].max(0.0).sqrt(),
        gamma: t[4].abs(),
        kappa: t[5].abs(),
    }
}

/// `|t|^2` and its gradient in internal coordinates, with `x = w - w0`.
fn model(t: &Theta, x: f64) -> (f64, [f64; 6]) {
    let [a, wr, wq, u, gamma, kappa] = *t;
    let e = c(gamma / 2.0, wq - x);
    let d = c(kappa / 2.0, wr - x) + u / e;
    let dd = d.norm_sqr();
    let val = a * a * kappa * kappa / dd;
    let dd_of = |dd_dx: C64| 2.0 * (d.conj() * dd_dx).re;
    let e2 = e * e;
    let grads = [
        c(0.0, 0.0),
        c(0.0, 1.0),
        -u * c(0.0, 1.0) / e2,
        1.0 / e,
        -u * 0.5 / e2,
        c(0.5, 0.0),
    ];
    let mut j = [0.0; 6];
    for k in 1..6 {
        j[k] = -val / dd * dd_of(grads[k]);
    }
    j[0] = 2.0 * a * kappa * kappa / dd;
    j[5] += 2.0 * a * a * kappa / dd;
    (val, j)
}

fn cost(t: &Theta, x: &[f64], y: &[f64], w: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(w)
        .map(|((&xi, &yi), &wi)| wi * (model(t, xi).0 - yi).powi(2))
        .sum()
}

fn levenberg_marquardt(
    start: Theta,
    x: &[f64],
    y: &[f64],
    w: &[f64],
    opts: &FitOptions,
) -> (Theta, f64, usize, bool, Array2<f64>) {
    let mut t = start;
    let mut f = cost(&t, x, y, w);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iters = 0;
    let mut jtj = Array2::<f64>::zeros((6, 6));
    while iters < opts.max_iter {
        iters += 1;
        jtj.fill(0.0);
        let mut jtr = Array1::<f64>::zeros(6);
        for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
            let (m, j) = model(&t, xi);
            let r = m - yi;
            for a in 0..6 {
                jtr[a] += wi * j[a] * r;
                for b in 0..6 {
                    jtj[[a, b]] += wi * j[a] * j[b];
                }
            }
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut h = jtj.clone();
            for k in 0..6 {
                h[[k, k]] += lambda * jtj[[k, k]].max(1e-300);
            }
            let step = match h.solve(&jtr.mapv(|v| -v)) {
                Ok(s) => s,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut trial = t;
            trial.iter_mut().zip(step.iter()).for_each(|(a, s)| *a += s);
            let ft = cost(&trial, x, y, w);
            if ft.is_finite() && ft <= f {
                let rel = (f - ft) / f.max(1e-300);
                t = trial;
                f = ft;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < opts.tol {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // no downhill step at any damping: a stationary point
            converged = true;
        }
        if converged {
            break;
        }
    }
    (t, f, iters, converged, jtj)
}

fn covariance(jtj: &Array2<f64>, t: &Theta, rss: f64, n: usize) -> (Vec<Vec<f64>>, f64) {
    let dof = (n.saturating_sub(6)).max(1) as f64;
    let s2 = rss / dof;
    // tiny ridge keeps unidentifiable directions finite but huge
    let scale = (0..6).map(|k| jtj[[k, k]]).fold(0.0, f64::max).max(1e-300);
    let mut h = jtj.clone();
    for k in 0..6 {
        h[[k, k]] += 1e-14 * scale;
    }
    let inv = h.inv().unwrap_or_else(|_| Array2::from_elem((6, 6), f64::INFINITY));
    let mut cov = inv.mapv(|v| v * s2);
    // g = sqrt(u); the g variance is the squared half-width of the image of
    // u +- sigma_u, which reduces to the delta method far from g = 0
    let u = t[3];
    let su = cov[[3, 3]].max(0.0).sqrt();
    let half = 0.5 * ((u + su).max(0.0).sqrt() - (u - su).max(0.0).sqrt());
    let dg = if u > 0.0 { half / su.max(1e-300) } else { 0.0 };
    for k in 0..6 {
        if k != 3 {
            cov[[3, k]] *= dg;
            cov[[k, 3]] = cov[[3, k]];
        }
    }
    cov[[3, 3]] = half * half;
    ((0..6).map(|i| (0..6).map(|j| cov[[i, j]]).collect()).collect(), su)
}

fn smooth(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|k| {
            let (lo, hi) = (k.saturating_sub(2), (k + 3).min(n));
            y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Highest peak, and the highest other local maximum separated from it by
/// a dip below half its own height.
fn two_peaks(y: &[f64]) -> (usize, Option<usize>) {
    let top = (0..y.len()).max_by(|&i, &j| y[i].total_cmp(&y[j])).unwrap_or(0);
    let second = (1..y.len().saturating_sub(1))
        .filter(|&k| y[k] >= y[k - 1] && y[k] > y[k + 1] && k != top)
        .filter(|&k| {
            let (a, b) = (k.min(top), k.max(top));
            y[a..=b].iter().cloned().fold(f64::INFINITY, f64::min) < 0.5 * y[k]
        })
        .max_by(|&i, &j| y[i].total_cmp(&y[j]));
    (top, second)
}

fn start_points(x: &[f64], y_raw: &[f64]) -> Vec<Theta> {
    let y = smooth(y_raw);
    let (top, second) = two_peaks(&y);
    let ymax = y[top].max(1e-300);
    let half = |k: usize| {
        let mut lo = k;
        while lo > 0 && y[lo] > y[k] / 2.0 {
            lo -= 1;
        }
        let mut hi = k;
        while hi + 1 < y.len() && y[hi] > y[k] / 2.0 {
            hi += 1;
        }
        (x[hi] - x[lo]).max(x[1] - x[0])
    };
    let width = half(top);
    let mut starts = Vec::new();
    // amplitude from the peak height of a bare Lorentzian (2A)^2
    let a0 = ymax.sqrt() / 2.0;
    if let Some(second) = second.filter(|&k| y[k] > 0.02 * ymax) {
        let (p1, p2) = (x[top].min(x[second]), x[top].max(x[second]));
        let split = p2 - p1;
        let mid = 0.5 * (p1 + p2);
        for frac in [-0.8, -0.5, -0.2, 0.0, 0.2, 0.5, 0.8] {
            let delta = frac * split;
            let g = 0.5 * (split * split - delta * delta).sqrt();
            starts.push([a0, mid + delta / 2.0, mid - delta / 2.0, g * g, width / 4.0, width]);
        }
    }
    let span = x[x.len() - 1] - x[0];
    for off in [-0.3, -0.1, 0.1, 0.3] {
        starts.push([a0, x[top], x[top] + off * span, (0.2 * width).powi(2), width / 4.0, width]);
    }
    starts
}

/// Least-squares fit of `|t|^2` samples (angular frequencies, rad/us).
/// Runs from several data-derived starts, plus `initial` when given.
pub fn fit_transmission(
    omega: &[f64],
    t_abs_sq: &[f64],
    initial: Option<&TransmissionParams>,
    opts: &FitOptions,
) -> Result<TransmissionFit, CalibError> {
    if omega.len() != t_abs_sq.len() || omega.len() < 6 {
        return Err(CalibError::Invalid("need at least 6 matching samples".into()));
    }
    if omega.windows(2).any(|w| !(w[1] > w[0])) || t_abs_sq.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::Invalid("frequencies must increase and data be finite".into()));
    }
    let w0 = 0.5 * (omega[0] + omega[omega.len() - 1]);
    let x: Vec<f64> = omega.iter().map(|w| w - w0).collect();
    let w: Vec<f64> = match &opts.weights {
        Some(w) if w.len() == x.len() => w.clone(),
        Some(_) => return Err(CalibError::Invalid("weights length mismatch".into())),
        None => vec![1.0; x.len()],
    };
    let mut starts = start_points(&x, t_abs_sq);
    if let Some(p) = initial {
        starts.insert(0, to_theta(p, w0));
    }
    let runs: Vec<_> = starts
        .into_iter()
        .map(|s| levenberg_marquardt(s, &x, t_abs_sq, &w, opts))
        .collect();
    // best converged run, else the lowest-cost one for the error report
    let pick = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.3 && r.1.is_finite())
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .or_else(|| runs.iter().enumerate().min_by(|a, b| a.1 .1.total_cmp(&b.1 .1)))
        .map(|(k, _)| k)
        .expect("at least one start");
    let (t, f, iterations, converged, jtj) = runs.into_iter().nth(pick).unwrap();
    let params = from_theta(&t, w0);
    if !converged || !f.is_finite() {
        return Err(CalibError::FitDiverged {
            best: Box::new(params),
            iterations,
        });
    }
    let (covariance, g_sq_sigma) = covariance(&jtj, &t, f, x.len());
    Ok(TransmissionFit {
        params,
        covariance,
        g_sq: t[3],
        g_sq_sigma,
        residual_norm: f.sqrt(),
        iterations,
    })
}

/// `[g, Delta] = m ([V1, V2] - V0)`, MHz and volts.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VoltageMap {
    pub m: [[f64; 2]; 2],
    pub v0: [f64; 2],
    pub condition: f64,
}

fn cond2(m: &[[f64; 2]; 2]) -> f64 {
    let a = array![[m[0][0], m[0][1]], [m[1][0], m[1][1]]];
    match a.svd(false, false) {
        Ok((_, s, _)) if s[1] > 0.0 => s[0] / s[1],
        _ => f64::INFINITY,
    }
}

impl VoltageMap {
    pub fn new(m: [[f64; 2]; 2], v0: [f64; 2]) -> Result<Self, CalibError> {
        let condition = cond2(&m);
        if !(condition <= 1e6) {
            return Err(CalibError::IllConditioned(condition));
        }
        Ok(VoltageMap { m, v0, condition })
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        let d = [v[0] - self.v0[0], v[1] - self.v0[1]];
        [
            self.m[0][0] * d[0] + self.m[0][1] * d[1],
            self.m[1][0] * d[0] + self.m[1][1] * d[1],
        ]
    }

    /// `m^-1 [g, Delta]`, without the offset.
    pub fn solve_delta(&self, y: [f64; 2]) -> [f64; 2] {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        [
            (self.m[1][1] * y[0] - self.m[0][1] * y[1]) / det,
            (-self.m[1][0] * y[0] + self.m[0][0] * y[1]) / det,
        ]
    }

    pub fn invert(&self, target: [f64; 2]) -> [f64; 2] {
        let d = self.solve_delta(target);
        [d[0] + self.v0[0], d[1] + self.v0[1]]
    }
}

/// Least-squares affine fit of `(V1, V2, g, Delta)` samples.
pub fn fit_voltage_map(samples: &[[f64; 4]]) -> Result<VoltageMap, CalibError> {
    if samples.len() < 3 {
        return Err(CalibError::SingularDesign);
    }
    let n = samples.len();
    let x = Array2::from_shape_fn((n, 3), |(i, j)| if j < 2 { samples[i][j] } else { 1.0 });
    let y = Array2::from_shape_fn((n, 2), |(i, j)| samples[i][2 + j]);
    let (_, s, _) = x.svd(false, false).map_err(|_| CalibError::SingularDesign)?;
    if !(s[2] > 1e-10 * s[0]) {
        return Err(CalibError::SingularDesign);
    }
    let sol = x.least_squares(&y).map_err(|_| CalibError::SingularDesign)?.solution;
    let m = [[sol[[0, 0]], sol[[1, 0]]], [sol[[0, 1]], sol[[1, 1]]]];
    let b = [sol[[2, 0]], sol[[2, 1]]];
    let mut map = VoltageMap::new(m, [0.0, 0.0])?;
    let d = map.solve_delta(b);
    map.v0 = [-d[0], -d[1]];
    Ok(map)
}

/// A device that returns spectroscopy data at a voltage setting.
pub trait Plant {
    /// `(omega, |t|^2)` in rad/us.
    fn spectroscopy(&mut self, v: [f64; 2]) -> (Vec<f64>, Vec<f64>);
}

/// Test device: `y = m (V - V0) + drift * n`, then each component bent by
/// `y_i + quad * y_i^2 / scale_i`, where `n` counts spectroscopy calls.
/// Spectroscopy is the transmission model at low probe power with
/// multiplicative Gaussian noise.
#[derive(Clone, Debug)]
pub struct SimulatedPlant {
    pub map: VoltageMap,
    pub quad: f64,
    pub scale: [f64; 2],
    /// MHz per call.
    pub drift: [f64; 2],
    pub omega_res: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub noise: f64,
    pub n_points: usize,
    pub calls: usize,
    rng: ChaCha8Rng,
}

impl SimulatedPlant {
    pub fn new(map: VoltageMap, seed: u64) -> Self {
        let p = CavityParams::device();
        SimulatedPlant {
            map,
            quad: 0.0,
            scale: [1.0, 1.0],
            drift: [0.0, 0.0],
            omega_res: p.omega_res,
            kappa: p.kappa,
            gamma: p.gamma,
            noise: 0.0,
            n_points: 401,
            calls: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// True `(g, Delta)` in MHz at `v` for the current call index.
    pub fn truth(&self, v: [f64; 2]) -> [f64; 2] {
        let lin = self.map.apply(v);
        let n = self.calls as f64;
        let y = [lin[0] + self.drift[0] * n, lin[1] + self.drift[1] * n];
        [
            y[0] + self.quad * y[0] * y[0] / self.scale[0],
            y[1] + self.quad * y[1] * y[1] / self.scale[1],
        ]
    }
}

impl Plant for SimulatedPlant {
    fn spectroscopy(&mut self, v: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
        let [g, delta] = self.truth(v);
        self.calls += 1;
        let tp = TransmissionParams {
            a: 1.0,
            omega_res: self.omega_res,
            omega_ge: self.omega_res - mhz(delta),
            g: mhz(g.abs()),
            gamma: self.gamma,
            kappa: self.kappa,
        };
        let half = mhz(delta.abs()) + 3.0 * tp.g + 4.0 * tp.kappa;
        let n = self.n_points.max(6);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let omega: Vec<f64> = (0..n)
            .map(|k| self.omega_res - half + 2.0 * half * k as f64 / (n - 1) as f64)
            .collect();
        let t2 = omega
            .iter()
            .map(|&w| {
                let y = transmission(w, &tp).norm_sqr();
                y * (1.0 + self.noise * normal.sample(&mut self.rng))
            })
            .collect();
        (omega, t2)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TuneStep {
    pub v: [f64; 2],
    pub measured: [f64; 2],
    pub error: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TuneResult {
    pub v: [f64; 2],
    pub iterations: usize,
    pub history: Vec<TuneStep>,
}

/// `(g, Delta)` in MHz from a transmission fit.
pub fn fitted_bias(fit: &TransmissionParams) -> [f64; 2] {
    let to = |w: f64| w / (2.0 * std::f64::consts::PI);
    [to(fit.g), to(fit.omega_res - fit.omega_ge)]
}

fn measure_bias<P: Plant + ?Sized>(
    plant: &mut P,
    v: [f64; 2],
    guess: Option<&TransmissionParams>,
) -> Result<(TransmissionParams, [f64; 2]), CalibError> {
    let (w, t2) = plant.spectroscopy(v);
    let fit = fit_transmission(&w, &t2, guess, &FitOptions::default())?;
    Ok((fit.params, fitted_bias(&fit.params)))
}

/// Measure, fit, and correct the voltages through the map's local inverse
/// until both `|g - g*|` and `|Delta - Delta*|` fall below `tol` (MHz).
pub fn iterative_tune<P: Plant + ?Sized>(
    plant: &mut P,
    map: &VoltageMap,
    target: [f64; 2],
    tol: [f64; 2],
    max_iter: usize,
) -> Result<TuneResult, CalibError> {
    let mut v = map.invert(target);
    let mut history = Vec::new();
    let mut guess: Option<TransmissionParams> = None;
    for it in 1..=max_iter {
        let (p, measured) = measure_bias(plant, v, guess.as_ref())?;
        guess = Some(p);
        let error = [target[0] - measured[0], target[1] - measured[1]];
        history.push(TuneStep { v, measured, error });
        if error[0].abs() < tol[0] && error[1].abs() < tol[1] {
            return Ok(TuneResult { v, iterations: it, history });
        }
        let dv = map.solve_delta(error);
        v = [v[0] + dv[0], v[1] + dv[1]];
    }
    let error = history.last().map_or([f64::NAN; 2], |s| s.error);
    Err(CalibError::NotConverged {
        v,
        iterations: max_iter,
        error,
    })
}

/// Keep correcting for `steps` rounds regardless of convergence; returns
/// the per-round history.
pub fn track<P: Plant + ?Sized>(
    plant: &mut P,
    map: &VoltageMap,
    target: [f64; 2],
    steps: usize,
) -> Result<Vec<TuneStep>, CalibError> {
    let mut v = map.invert(target);
    let mut history = Vec::new();
    let mut guess: Option<TransmissionParams> = None;
    for _ in 0..steps {
        let (p, measured) = measure_bias(plant, v, guess.as_ref())?;
        guess = Some(p);
        let error = [target[0] - measured[0], target[1] - measured[1]];
        history.push(TuneStep { v, measured, error });
        let dv = map.solve_delta(error);
        v = [v[0] + dv[0], v[1] + dv[1]];
    }
    Ok(history)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EfficiencyParams {
    pub eta_amp: f64,
    pub eta_loss: f64,
    pub eta_tot: f64,
    pub gain_scale: f64,
    pub drive_scale: f64,
}

impl EfficiencyParams {
    /// Splits `eta_tot` with the amplifier efficiency `1 / S_delta`.
    pub fn compose(eta_tot: f64, s_delta: f64, gain_scale: f64, drive_scale: f64) -> Self {
        let eta_amp = 1.0 / s_delta;
        EfficiencyParams {
            eta_amp,
            eta_loss: eta_tot / eta_amp,
            eta_tot,
            gain_scale,
            drive_scale,
        }
    }
}

/// Measured flux curves against the nominal drive rate.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FluxCurves {
    pub drive: Vec<f64>,
    /// `kappa |<a>|^2` as measured.
    pub coherent: Vec<f64>,
    /// `kappa <a^dag a>` as measured.
    pub total: Vec<f64>,
}

/// Master-equation `(kappa |<a>|^2, kappa <a^dag a>)` at drive rate `omega`.
pub fn me_flux(p: &CavityParams, omega: f64) -> Result<(f64, f64), CalibError> {
    let l = build_liouvillian(&p.with_drive(omega), None)?;
    let rho = steady_state_me(&l)?;
    let amp = l.expect(&l.a, &rho);
    let n = l.expect(&dag(&l.a).dot(&l.a), &rho).re;
    Ok((p.kappa * amp.norm_sqr(), p.kappa * n))
}

fn efficiency_at<F>(curves: &FluxCurves, predictor: &F, d: f64) -> Result<(f64, f64), CalibError>
where
    F: Fn(f64) -> Result<(f64, f64), CalibError>,
{
    let mut pm = 0.0;
    let mut pp = 0.0;
    let mut mm = 0.0;
    for (k, &om) in curves.drive.iter().enumerate() {
        let (pc, pt) = predictor(d * om)?;
        pm += pc * curves.coherent[k] + pt * curves.total[k];
        pp += pc * pc + pt * pt;
        mm += curves.coherent[k].powi(2) + curves.total[k].powi(2);
    }
    if !(pp > 0.0) {
        return Err(CalibError::Invalid("predicted fluxes vanish".into()));
    }
    let eta = pm / pp;
    Ok((eta, (mm - eta * pm).max(0.0)))
}

/// Fit `measured = eta * predicted(drive_scale * drive)` over both curves.
/// `eta` is solved in closed form at each drive scale; the drive scale is
/// found by a log-spaced scan of `[d_lo, d_hi]` refined by golden section,
/// or held fixed when `fixed_drive` is set.
pub fn calibrate_efficiency<F>(
    curves: &FluxCurves,
    predictor: F,
    s_delta: f64,
    fixed_drive: Option<f64>,
    bracket: (f64, f64),
) -> Result<EfficiencyParams, CalibError>
where
    F: Fn(f64) -> Result<(f64, f64), CalibError>,
{
    let n = curves.drive.len();
    if n < 2 || curves.coherent.len() != n || curves.total.len() != n {
        return Err(CalibError::Invalid("need matching curves with at least 2 drives".into()));
    }
    let d = match fixed_drive {
        Some(d) => d,
        None => {
            let (lo, hi) = (bracket.0.ln(), bracket.1.ln());
            let scan: Vec<(f64, f64)> = (0..=40)
                .map(|k| {
                    let x = lo + (hi - lo) * k as f64 / 40.0;
                    efficiency_at(curves, &predictor, x.exp()).map(|r| (x, r.1))
                })
                .collect::<Result<_, _>>()?;
            let kbest = (0..scan.len()).min_by(|&i, &j| scan[i].1.total_cmp(&scan[j].1)).unwrap();
            let step = (hi - lo) / 40.0;
            let (mut a, mut b) = (scan[kbest].0 - step, scan[kbest].0 + step);
            let phi = 0.5 * (5f64.sqrt() - 1.0);
            let f = |x: f64| efficiency_at(curves, &predictor, x.exp()).map(|r| r.1);
            let mut x1 = b - phi * (b - a);
            let mut x2 = a + phi * (b - a);
            let mut f1 = f(x1)?;
            let mut f2 = f(x2)?;
            while b - a > 1e-9 {
                if f1 < f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - phi * (b - a);
                    f1 = f(x1)?;
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + phi * (b - a);
                    f2 = f(x2)?;
                }
            }
            (0.5 * (a + b)).exp()
        }
    };
    let (eta, _) = efficiency_at(curves, &predictor, d)?;
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(CalibError::Invalid(format!("fitted efficiency {eta} is not positive")));
    }
    Ok(EfficiencyParams::compose(eta, s_delta, 1.0 / eta, d))
}
