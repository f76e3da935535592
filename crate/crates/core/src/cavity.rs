//! Driven transmon-cavity master equation: steady states, two-time
//! correlations by quantum regression, output spectra, and the
//! constant-upper-polariton bias path.
//!
//! Frequencies are angular (rad/us) internally; `mhz` converts from the
//! usual `value / 2 pi` in MHz.

use crate::linalg::*;
use ndarray::Array1;
use ndarray_linalg::{FactorizeInto, ReciprocalConditionNum, Solve};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;
use thiserror::Error;

pub const TWO_PI: f64 = 2.0 * PI;

/// `2 pi f` for `f` in MHz, giving rad/us.
pub fn mhz(f: f64) -> f64 {
    TWO_PI * f
}

pub fn to_mhz(w: f64) -> f64 {
    w / TWO_PI
}

/// Default cap on the Hilbert-space dimension of a generator.
pub const DEFAULT_DIM_CAP: usize = 64;

/// Liouville dimension above which propagation switches to sparse Taylor steps.
const DENSE_EIG_LIMIT: usize = 1024;

#[derive(Debug, Error)]
pub enum CavityError {
    #[error("Hilbert dimension {dim} exceeds the cap {cap}")]
    DimensionOverflow { dim: usize, cap: usize },
    #[error("steady state is not unique (rcond {rcond:.2e})")]
    NonUniqueSteadyState { rcond: f64 },
    #[error("mean photon number {0:.3e} is too small for a normalized correlation")]
    ZeroFlux(f64),
    #[error("G1 has not reached its plateau: residual {residual:.3e} of G1(0)")]
    PlateauNotReached { residual: f64 },
    #[error("no bias point reaches the target upper polariton at g = {g:.4} rad/us")]
    NoSolution { g: f64 },
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CavityParams {
    pub omega_res: f64,
    pub omega_ge: f64,
    pub omega_d: f64,
    pub g: f64,
    pub alpha_q: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub gamma_phi: f64,
    /// Coherent drive rate, entering as `Omega (a + a^dag)`.
    pub drive: f64,
    pub n_cav: usize,
    pub n_q: usize,
}

pub const T1_US: f64 = 1.8;
pub const T2_US: f64 = 1.2;
/// Smallest drive rate of the landscape grids, rad/us.
pub fn omega_0() -> f64 {
    mhz(0.37)
}

impl CavityParams {
    /// Device constants with the qubit on the constant upper-polariton path
    /// at `g / 2 pi = 5.7 MHz`, undriven.
    pub fn device() -> Self {
        let mut p = CavityParams {
            omega_res: mhz(7342.5),
            omega_ge: mhz(7342.5),
            omega_d: mhz(7350.0),
            g: mhz(5.7),
            alpha_q: mhz(-80.0),
            kappa: mhz(2.2),
            gamma: 1.0 / T1_US,
            gamma_phi: 1.0 / T2_US - 1.0 / (2.0 * T1_US),
            drive: 0.0,
            n_cav: 6,
            n_q: 3,
        };
        let delta = two_level_detuning(p.omega_d - p.omega_res, p.g).expect("device bias");
        p.omega_ge = p.omega_res - delta;
        p
    }

    /// Bias given by `(Delta, g)` with `Delta = omega_res - omega_ge` and the
    /// drive at the upper polariton `omega_plus`.
    pub fn at_bias(delta: f64, g: f64, omega_plus: f64) -> Self {
        let omega_ge = omega_plus - delta / 2.0 - (g * g + delta * delta / 4.0).sqrt();
        CavityParams {
            omega_res: omega_ge + delta,
            omega_ge,
            omega_d: omega_plus,
            g,
            ..Self::device()
        }
    }

    pub fn with_drive(&self, drive: f64) -> Self {
        CavityParams { drive, ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.n_cav * self.n_q
    }

    fn validate(&self) -> Result<(), CavityError> {
        if self.n_cav < 2 || self.n_q < 2 {
            return Err(CavityError::Invalid("truncations must be at least 2".into()));
        }
        if self.kappa < 0.0 || self.gamma < 0.0 || self.gamma_phi < 0.0 {
            return Err(CavityError::Invalid("rates must be non-negative".into()));
        }
        let all = [
            self.omega_res,
            self.omega_ge,
            self.omega_d,
            self.g,
            self.alpha_q,
            self.kappa,
            self.gamma,
            self.gamma_phi,
            self.drive,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(CavityError::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Ancilla filter mode at the drive frequency.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FilterSpec {
    pub epsilon: f64,
    pub gamma_f: f64,
    pub n_c: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            epsilon: mhz(0.02),
            gamma_f: mhz(10.0),
            n_c: 3,
        }
    }
}

pub fn destroy(n: usize) -> CMat {
    let mut m = CMat::zeros((n, n));
    for k in 1..n {
        m[[k - 1, k]] = c((k as f64).sqrt(), 0.0);
    }
    m
}

fn embed3(op: &CMat, slot: usize, dims: [usize; 3]) -> CMat {
    let mut out = if slot == 0 { op.clone() } else { eye(dims[0]) };
    for (k, &n) in dims.iter().enumerate().skip(1) {
        let f = if k == slot { op.clone() } else { eye(n) };
        out = kron(&out, &f);
    }
    out
}

/// System Hamiltonian in the frame rotating at `omega_d`, including the drive.
pub fn hamiltonian(p: &CavityParams) -> (CMat, CMat, CMat) {
    let dims = [p.n_cav, p.n_q, 1];
    let a = embed3(&destroy(p.n_cav), 0, dims);
    let b = embed3(&destroy(p.n_q), 1, dims);
    let h = bare_hamiltonian(p, &a, &b, p.omega_d) + (&a + &dag(&a)).mapv(|z| z * p.drive);
    (h, a, b)
}

fn bare_hamiltonian(p: &CavityParams, a: &CMat, b: &CMat, frame: f64) -> CMat {
    let ad = dag(a);
    let bd = dag(b);
    let na = ad.dot(a);
    let nb = bd.dot(b);
    na.mapv(|z| z * (p.omega_res - frame))
        + nb.mapv(|z| z * (p.omega_ge - frame))
        + bd.dot(&bd).dot(b).dot(b).mapv(|z| z * (p.alpha_q / 2.0))
        + (ad.dot(b) + a.dot(&bd)).mapv(|z| z * p.g)
}

/// Generator on column-major vectorized density matrices. With a filter
/// the ancilla levels are rescaled by `S = diag(s^n)` so that all blocks of
/// the steady state are of order one; `scale` holds the diagonal of `S`.
pub struct Liouvillian {
    pub generator: CMat,
    pub a: CMat,
    pub b: CMat,
    pub c: Option<CMat>,
    pub dim: usize,
    pub kappa: f64,
    pub scale: Option<Array1<f64>>,
    prop: OnceLock<Propagator>,
}

impl Liouvillian {
    /// `tr(B rho)` for a density matrix stored in the rescaled frame.
    pub fn expect(&self, op: &CMat, rho: &CMat) -> C64 {
        match &self.scale {
            None => trace_prod(op, rho),
            Some(s) => trace_prod(&rescale(op, s, false), rho),
        }
    }

    /// `J rho J^dag` in the working frame.
    pub fn sandwich(&self, op: &CMat, rho: &CMat) -> CMat {
        match &self.scale {
            None => op.dot(rho).dot(&dag(op)),
            Some(s) => {
                let o = rescale(op, s, true);
                o.dot(rho).dot(&dag(&o))
            }
        }
    }

    /// `J rho` in the working frame.
    pub fn left_mul(&self, op: &CMat, rho: &CMat) -> CMat {
        match &self.scale {
            None => op.dot(rho),
            Some(s) => rescale(op, s, true).dot(rho),
        }
    }

    /// Physical density matrix `S rho S`.
    pub fn physical(&self, rho: &CMat) -> CMat {
        match &self.scale {
            None => rho.clone(),
            Some(s) => CMat::from_shape_fn(rho.dim(), |(i, j)| rho[[i, j]] * (s[i] * s[j])),
        }
    }

    pub fn propagator(&self) -> &Propagator {
        self.prop.get_or_init(|| {
            if self.generator.nrows() <= DENSE_EIG_LIMIT {
                Propagator::dense(&self.generator, 1e8)
            } else {
                Propagator::sparse(&self.generator)
            }
        })
    }

    /// Row functional `w` with `w . vec(X) = tr(B X)` in the working frame.
    fn functional(&self, op: &CMat) -> CVec {
        let o = match &self.scale {
            None => op.clone(),
            Some(s) => rescale(op, s, false),
        };
        vectorize(&o.t().to_owned())
    }
}

/// `S^-1 X S` when `similarity`, else `S X S`.
fn rescale(x: &CMat, s: &Array1<f64>, similarity: bool) -> CMat {
    CMat::from_shape_fn(x.dim(), |(i, j)| {
        if similarity {
            x[[i, j]] * (s[j] / s[i])
        } else {
            x[[i, j]] * (s[i] * s[j])
        }
    })
}

pub fn build_liouvillian(p: &CavityParams, filter: Option<&FilterSpec>) -> Result<Liouvillian, CavityError> {
    build_liouvillian_capped(p, filter, DEFAULT_DIM_CAP)
}

pub fn build_liouvillian_capped(
    p: &CavityParams,
    filter: Option<&FilterSpec>,
    cap: usize,
) -> Result<Liouvillian, CavityError> {
    p.validate()?;
    let n_c = filter.map_or(1, |f| f.n_c);
    if let Some(f) = filter {
        if f.n_c < 2 || !(f.epsilon >= 0.0) || !(f.gamma_f > 0.0) {
            return Err(CavityError::Invalid("filter needs n_c >= 2, epsilon >= 0, Gamma > 0".into()));
        }
    }
    let dim = p.dim() * n_c;
    if dim > cap {
        return Err(CavityError::DimensionOverflow { dim, cap });
    }
    let dims = [p.n_cav, p.n_q, n_c];
    let a = embed3(&destroy(p.n_cav), 0, dims);
    let b = embed3(&destroy(p.n_q), 1, dims);
    let mut h = bare_hamiltonian(p, &a, &b, p.omega_d) + (&a + &dag(&a)).mapv(|z| z * p.drive);
    let bd = dag(&b);
    let mut jumps = vec![
        a.mapv(|z| z * p.kappa.sqrt()),
        b.mapv(|z| z * p.gamma.sqrt()),
        bd.dot(&b).mapv(|z| z * (2.0 * p.gamma_phi).sqrt()),
    ];
    let mut cop = None;
    let mut scale = None;
    if let Some(f) = filter {
        let cm = embed3(&destroy(n_c), 2, dims);
        h = h + (dag(&a).dot(&cm) + a.dot(&dag(&cm))).mapv(|z| z * f.epsilon);
        jumps.push(cm.mapv(|z| z * f.gamma_f.sqrt()));
        let s = if f.epsilon > 0.0 {
            f.epsilon / ((p.kappa + f.gamma_f) / 2.0)
        } else {
            1.0
        };
        let per: Vec<f64> = (0..n_c).map(|k| s.powi(k as i32)).collect();
        let sd: Array1<f64> = (0..dim).map(|i| per[i % n_c]).collect();
        cop = Some(cm);
        scale = Some(sd);
    }
    let mut drift = h.mapv(|z| z * c(0.0, -1.0));
    for j in &jumps {
        drift = drift - dag(j).dot(j).mapv(|z| z * 0.5);
    }
    let (drift, jumps) = match &scale {
        None => (drift, jumps),
        Some(s) => (
            rescale(&drift, s, true),
            jumps.iter().map(|j| rescale(j, s, true)).collect(),
        ),
    };
    Ok(Liouvillian {
        generator: generic_generator(&drift, &jumps),
        a,
        b,
        c: cop,
        dim,
        kappa: p.kappa,
        scale,
        prop: OnceLock::new(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TruncationWarning {
    pub mode: String,
    pub top_population: f64,
}

/// Steady state in the working frame of `l` (use `physical` for the
/// density matrix itself when a filter is present).
pub fn steady_state_me(l: &Liouvillian) -> Result<CMat, CavityError> {
    let d = l.dim;
    let mut m = l.generator.clone();
    let weights: Vec<f64> = match &l.scale {
        None => vec![1.0; d],
        Some(s) => s.iter().map(|x| x * x).collect(),
    };
    m.row_mut(0).fill(ZERO);
    for i in 0..d {
        m[[0, i + i * d]] = c(weights[i], 0.0);
    }
    let lu = m
        .factorize_into()
        .map_err(|_| CavityError::NonUniqueSteadyState { rcond: 0.0 })?;
    let rcond = lu.rcond().map_err(|e| CavityError::Numerical(e.to_string()))?;
    if !(rcond > 1e-13) {
        return Err(CavityError::NonUniqueSteadyState { rcond });
    }
    let mut rhs = CVec::zeros(d * d);
    rhs[0] = ONE;
    let x = lu.solve(&rhs).map_err(|e| CavityError::Numerical(e.to_string()))?;
    let rho = hermitize(&unvectorize(&x, d));
    let phys = l.physical(&rho);
    let (w, _) = eigh(&phys);
    if w.iter().any(|&x| x < -1e-10) {
        return Err(CavityError::Numerical(format!("steady state not positive: {:.3e}", w[0])));
    }
    Ok(rho)
}

/// Norm of `L rho` for a working-frame `rho`.
pub fn steady_state_residual(l: &Liouvillian, rho: &CMat) -> f64 {
    let r = l.generator.dot(&vectorize(rho));
    let res = unvectorize(&r, l.dim);
    fro_norm(&l.physical(&res))
}

/// Populations of the highest cavity and transmon levels above `tol`.
pub fn truncation_warnings(p: &CavityParams, l: &Liouvillian, rho: &CMat, tol: f64) -> Vec<TruncationWarning> {
    let phys = l.physical(rho);
    let n_c = l.dim / p.dim();
    let mut pc = 0.0;
    let mut pq = 0.0;
    for i in 0..l.dim {
        let ic = i / (p.n_q * n_c);
        let iq = (i / n_c) % p.n_q;
        if ic == p.n_cav - 1 {
            pc += phys[[i, i]].re;
        }
        if iq == p.n_q - 1 {
            pq += phys[[i, i]].re;
        }
    }
    let mut out = Vec::new();
    if pc > tol {
        out.push(TruncationWarning { mode: "cavity".into(), top_population: pc });
    }
    if pq > tol {
        out.push(TruncationWarning { mode: "transmon".into(), top_population: pq });
    }
    out
}

/// `G1(tau) = kappa tr(a^dag e^{L tau}(a rho))`.
pub fn g1_correlation(l: &Liouvillian, rho: &CMat, tau: &[f64]) -> Vec<C64> {
    let v = vectorize(&l.left_mul(&l.a, rho));
    let w = l.functional(&dag(&l.a));
    l.propagator()
        .series(&v, &w, tau)
        .into_iter()
        .map(|z| z * l.kappa)
        .collect()
}

fn normalized_g2(l: &Liouvillian, op: &CMat, rho: &CMat, tau: &[f64]) -> Result<Vec<f64>, CavityError> {
    let n_op = dag(op).dot(op);
    let n = l.expect(&n_op, rho).re;
    if !(n >= 1e-12) {
        return Err(CavityError::ZeroFlux(n));
    }
    let v = vectorize(&l.sandwich(op, rho));
    let w = l.functional(&n_op);
    let raw = l.propagator().series(&v, &w, tau);
    let mut out = Vec::with_capacity(raw.len());
    for z in raw {
        let g = z / (n * n);
        if g.im.abs() > 1e-8 * g.re.abs().max(1.0) {
            return Err(CavityError::Numerical(format!("g2 has imaginary part {:.3e}", g.im)));
        }
        out.push(g.re);
    }
    Ok(out)
}

/// `g2(tau) = tr(a^dag a e^{L tau}(a rho a^dag)) / <a^dag a>^2`.
pub fn g2_correlation(l: &Liouvillian, rho: &CMat, tau: &[f64]) -> Result<Vec<f64>, CavityError> {
    let a = l.a.clone();
    normalized_g2(l, &a, rho, tau)
}

/// Second-order correlation of the ancilla filter mode.
pub fn filtered_g2(p: &CavityParams, filter: &FilterSpec, tau: &[f64]) -> Result<Vec<f64>, CavityError> {
    let l = build_liouvillian(p, Some(filter))?;
    let rho = steady_state_me(&l)?;
    let cm = l.c.clone().expect("filter mode");
    normalized_g2(&l, &cm, &rho, tau)
}

/// Uniform grid of `n` points on `[0, t_max]`.
pub fn uniform_grid(t_max: f64, n: usize) -> Vec<f64> {
    let h = t_max / (n.max(2) - 1) as f64;
    (0..n).map(|k| k as f64 * h).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Spectrum {
    /// Angular frequency offset from the drive, FFT order, rad/us.
    pub omega: Vec<f64>,
    /// Spectral density per rad/us; the coherent plateau sits in the DC bin.
    pub density: Vec<f64>,
    pub d_omega: f64,
    pub kinetic_integral: f64,
}

/// Spectrum of `G1` on a uniform grid starting at 0, with the coherent
/// plateau treated as a delta at zero frequency.
pub fn spectrum_and_kinetic(tau: &[f64], g1: &[C64], plateau: f64) -> Result<Spectrum, CavityError> {
    let n = tau.len();
    if n < 4 || g1.len() != n || tau[0] != 0.0 || !is_uniform(tau, 1e-9) {
        return Err(CavityError::Invalid("spectrum needs a uniform grid starting at 0".into()));
    }
    let g0 = g1[0].re;
    let residual = (g1[n - 1] - c(plateau, 0.0)).norm() / g0.max(1e-300);
    if residual > 1e-3 {
        return Err(CavityError::PlateauNotReached { residual });
    }
    let dt = tau[1] - tau[0];
    let m = 2 * n;
    let mut seq = vec![ZERO; m];
    for k in 0..n {
        seq[k] = g1[k] - plateau;
    }
    for k in 1..n {
        seq[m - k] = seq[k].conj();
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut seq);
    let d_omega = TWO_PI / (m as f64 * dt);
    let omega: Vec<f64> = (0..m)
        .map(|k| {
            let kk = if k < m / 2 { k as f64 } else { k as f64 - m as f64 };
            kk * d_omega
        })
        .collect();
    let mut density: Vec<f64> = seq.iter().map(|z| z.re * dt / TWO_PI).collect();
    density[0] += plateau / d_omega;
    let kinetic_integral = omega
        .iter()
        .zip(&density)
        .skip(1)
        .map(|(w, s)| w * w * s * d_omega)
        .sum();
    Ok(Spectrum {
        omega,
        density,
        d_omega,
        kinetic_integral,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationSet {
    pub tau_grid: Vec<f64>,
    pub g1: Vec<C64>,
    pub g2: Vec<f64>,
    pub spectrum: Spectrum,
    pub flux: f64,
    pub coherent_flux: f64,
    pub kinetic_integral: f64,
    pub g2_zero: f64,
    pub mean_photons: f64,
    pub warnings: Vec<TruncationWarning>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimOptions {
    /// Points of the base grid on `[0, span_kappa / kappa]`.
    pub n_tau: usize,
    pub span_kappa: f64,
    /// Extend the grid at fixed spacing to `gap_multiple / gap` when the
    /// slowest relaxation is slower than the base span.
    pub gap_multiple: f64,
    pub max_points: usize,
    pub truncation_tol: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            n_tau: 1024,
            span_kappa: 10.0,
            gap_multiple: 12.0,
            max_points: 1 << 18,
            truncation_tol: 1e-3,
        }
    }
}

fn slowest_rate(values: &CVec) -> Option<f64> {
    let scale = values.iter().map(|z| z.norm()).fold(0.0, f64::max);
    values
        .iter()
        .map(|z| -z.re)
        .filter(|&r| r > 1e-10 * scale.max(1.0))
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |x| x.min(r))))
}

/// Steady state, correlations, spectrum and scalar summaries at one
/// parameter point.
pub fn simulate(p: &CavityParams, opts: &SimOptions) -> Result<CorrelationSet, CavityError> {
    let l = build_liouvillian(p, None)?;
    let rho = steady_state_me(&l)?;
    let warnings = truncation_warnings(p, &l, &rho, opts.truncation_tol);
    let ad = dag(&l.a);
    let mean_photons = l.expect(&ad.dot(&l.a), &rho).re;
    let amp = l.expect(&l.a, &rho);
    let coherent_flux = p.kappa * amp.norm_sqr();
    let base = opts.span_kappa / p.kappa;
    let dt = base / (opts.n_tau - 1) as f64;
    let mut t_max = base;
    if let Some(rate) = l.propagator().eigenvalues().and_then(slowest_rate) {
        t_max = t_max.max(opts.gap_multiple / rate);
    }
    let n = (((t_max / dt).ceil() as usize) + 1).min(opts.max_points);
    let tau: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let g1 = g1_correlation(&l, &rho, &tau);
    let g2 = g2_correlation(&l, &rho, &tau)?;
    let spectrum = spectrum_and_kinetic(&tau, &g1, coherent_flux)?;
    let g2_zero = g2[0];
    Ok(CorrelationSet {
        flux: g1[0].re,
        kinetic_integral: spectrum.kinetic_integral,
        tau_grid: tau,
        g1,
        g2,
        spectrum,
        coherent_flux,
        g2_zero,
        mean_photons,
        warnings,
    })
}

/// Lab-frame levels `(E0, E1+, E2+)` of the undriven dissipation-free
/// Hamiltonian. `E2+` is the two-excitation state reached from `E1+` by
/// one more cavity photon (largest `|<2|a^dag|1+>|`).
pub fn upper_ladder(p: &CavityParams) -> (f64, f64, f64) {
    let dims = [p.n_cav, p.n_q, 1];
    let a = embed3(&destroy(p.n_cav), 0, dims);
    let b = embed3(&destroy(p.n_q), 1, dims);
    // shift by the cavity frequency keeps the numbers small; levels keep
    // their excitation number through N = a^dag a + b^dag b
    let h = bare_hamiltonian(p, &a, &b, p.omega_res);
    let nop = dag(&a).dot(&a) + dag(&b).dot(&b);
    let (e, v) = eigh(&h);
    let mut by_n: Vec<Vec<usize>> = vec![Vec::new(); 3];
    for k in 0..e.len() {
        let col = v.column(k).to_owned();
        let nk = col.iter().zip(nop.dot(&col).iter()).map(|(x, y)| (x.conj() * y).re).sum::<f64>();
        let r = nk.round();
        if (nk - r).abs() < 1e-6 && r < 3.0 {
            by_n[r as usize].push(k);
        }
    }
    let e0 = e[by_n[0][0]];
    let k1 = *by_n[1]
        .iter()
        .max_by(|&&x, &&y| e[x].partial_cmp(&e[y]).unwrap())
        .expect("one-excitation manifold");
    let up = dag(&a).dot(&v.column(k1).to_owned());
    let k2 = *by_n[2]
        .iter()
        .max_by(|&&x, &&y| {
            let ox = v.column(x).iter().zip(up.iter()).map(|(p, q)| p.conj() * q).sum::<C64>().norm();
            let oy = v.column(y).iter().zip(up.iter()).map(|(p, q)| p.conj() * q).sum::<C64>().norm();
            ox.partial_cmp(&oy).unwrap()
        })
        .expect("two-excitation manifold");
    let shift = p.omega_res;
    (e0, e[k1] + shift, e[k2] + 2.0 * shift)
}

/// Effective anharmonicity of the upper branch, `|(E2+ - E1+) - (E1+ - E0)|`,
/// and its sign.
pub fn effective_anharmonicity_signed(p: &CavityParams) -> f64 {
    let (e0, e1, e2) = upper_ladder(p);
    (e2 - e1) - (e1 - e0)
}

pub fn effective_anharmonicity(p: &CavityParams) -> f64 {
    effective_anharmonicity_signed(p).abs()
}

/// Upper one-excitation frequency from numeric diagonalization.
pub fn upper_polariton(p: &CavityParams) -> f64 {
    let (e0, e1, _) = upper_ladder(p);
    e1 - e0
}

/// `Delta = omega_res - omega_ge` placing the two-level upper polariton
/// `c` above the cavity at coupling `g`.
fn two_level_detuning(c_offset: f64, g: f64) -> Option<f64> {
    if !(c_offset > 0.0) || !(g > 0.0) {
        return None;
    }
    Some((g * g - c_offset * c_offset) / c_offset)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasPoint {
    pub g: f64,
    pub delta: f64,
    pub params: CavityParams,
}

/// Bias points with the upper polariton fixed at `omega_plus`, moving the
/// qubit frequency at fixed cavity frequency.
pub fn constant_omega_plus_path(
    omega_plus: f64,
    g_list: &[f64],
    template: &CavityParams,
) -> Result<Vec<BiasPoint>, CavityError> {
    let mut out = Vec::with_capacity(g_list.len());
    for &g in g_list {
        let delta = two_level_detuning(omega_plus - template.omega_res, g).ok_or(CavityError::NoSolution { g })?;
        let params = CavityParams {
            g,
            omega_ge: template.omega_res - delta,
            omega_d: omega_plus,
            ..template.clone()
        };
        let got = upper_polariton(&params);
        if (got - omega_plus).abs() > 1e-6 * omega_plus.abs() {
            return Err(CavityError::NoSolution { g });
        }
        out.push(BiasPoint { g, delta, params });
    }
    Ok(out)
}

/// Coupling on the constant-`omega_plus` path with the requested effective
/// anharmonicity, by bisection on `g` in `[g_lo, g_hi]` to `tol` (rad/us).
pub fn coupling_for_anharmonicity(
    alpha: f64,
    omega_plus: f64,
    template: &CavityParams,
    g_lo: f64,
    g_hi: f64,
    tol: f64,
) -> Result<BiasPoint, CavityError> {
    let at = |g: f64| -> Result<(BiasPoint, f64), CavityError> {
        let bp = constant_omega_plus_path(omega_plus, &[g], template)?.remove(0);
        let a = effective_anharmonicity(&bp.params);
        Ok((bp, a))
    };
    let (mut lo, mut hi) = (g_lo, g_hi);
    let (_, a_lo) = at(lo)?;
    let (_, a_hi) = at(hi)?;
    if (a_lo - alpha) * (a_hi - alpha) > 0.0 {
        return Err(CavityError::NoSolution { g: if alpha > a_lo.max(a_hi) { lo } else { hi } });
    }
    let decreasing = a_lo > a_hi;
    let mut best = at(0.5 * (lo + hi))?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        best = at(mid)?;
        if (best.1 - alpha).abs() <= tol {
            break;
        }
        if (best.1 > alpha) == decreasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.0)
}
