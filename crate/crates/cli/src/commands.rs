use crate::cache::{self, Cache};
use crate::config::{RunConfig, SourceKind};
use cmpsim::calibration::{
    calibrate_efficiency, fit_transmission, fit_voltage_map, fitted_bias, iterative_tune, me_flux, FitOptions,
    FluxCurves, SimulatedPlant, TransmissionFit, VoltageMap,
};
use cmpsim::cavity::{
    coupling_for_anharmonicity, mhz, omega_0, simulate, to_mhz, CavityParams, CorrelationSet, SimOptions, Spectrum,
};
use cmpsim::cmps::{observables, solve_ladder, CmpsState, MatchedSolve, TdvpConfig};
use cmpsim::lieb_liniger::{ground_state, GroundStateResult, Landscape, LandscapePoint};
use cmpsim::linalg::C64;
use cmpsim::trace_dsp::{measure, synthesize_traces, write_batch, FieldModel, Label};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A failed item that did not stop the run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Failure {
    pub item: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub failures: Vec<Failure>,
}

impl Outcome {
    fn fail(&mut self, item: impl Into<String>, error: impl ToString) {
        self.failures.push(Failure {
            item: item.into(),
            error: error.to_string(),
        });
    }

    /// 0 on success, 2 with partial failures.
    pub fn exit_code(&self) -> u8 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

pub type Fatal = String;

fn io<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> Fatal + '_ {
    move |e| format!("{ctx}: {e}")
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Fatal> {
    let mut text = serde_json::to_string_pretty(value).map_err(io(name))?;
    text.push('\n');
    std::fs::write(dir.join(name), text).map_err(io(name))
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<(), Fatal> {
    let mut w = csv::Writer::from_path(dir.join(name)).map_err(io(name))?;
    for r in rows {
        w.serialize(r).map_err(io(name))?;
    }
    w.flush().map_err(io(name))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Fatal> {
    let ctx = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{ctx}: {e}"))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| format!("{ctx}: {e}"))
}

fn write_failures(dir: &Path, out: &Outcome) -> Result<(), Fatal> {
    let path = dir.join("failures.json");
    if out.failures.is_empty() {
        if path.exists() {
            std::fs::remove_file(&path).map_err(io("failures.json"))?;
        }
        return Ok(());
    }
    write_json(dir, "failures.json", &out.failures)
}

pub fn prepare_output(cfg: &RunConfig) -> Result<(), Fatal> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(io("output directory"))
}

fn open_cache(cfg: &RunConfig) -> Result<Option<Cache>, Fatal> {
    cfg.cache_dir
        .as_deref()
        .map(Cache::open)
        .transpose()
        .map_err(io("cache directory"))
}

/// Cached per-point summary: landscape scalars and the leading part of
/// the correlation curves.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PointRecord {
    pub alpha_mhz: f64,
    pub omega_factor: f64,
    pub g_mhz: f64,
    pub delta_mhz: f64,
    pub point: LandscapePoint,
    pub coherent_flux: f64,
    pub mean_photons: f64,
    pub truncation_warnings: usize,
    pub tau: Vec<f64>,
    pub g1: Vec<C64>,
    pub g2: Vec<f64>,
}

impl PointRecord {
    fn correlation_set(&self) -> CorrelationSet {
        CorrelationSet {
            tau_grid: self.tau.clone(),
            g1: self.g1.clone(),
            g2: self.g2.clone(),
            spectrum: Spectrum {
                omega: Vec::new(),
                density: Vec::new(),
                d_omega: 0.0,
                kinetic_integral: self.point.kinetic_integral,
            },
            flux: self.point.flux,
            coherent_flux: self.coherent_flux,
            kinetic_integral: self.point.kinetic_integral,
            g2_zero: self.point.g2_zero,
            mean_photons: self.mean_photons,
            warnings: Vec::new(),
        }
    }
}

#[derive(Serialize)]
struct LandscapeRow {
    alpha_mhz: f64,
    omega_over_omega0: f64,
    g_mhz: f64,
    delta_mhz: f64,
    flux: f64,
    coherent_flux: f64,
    kinetic_integral: f64,
    g2_zero: f64,
    mean_photons: f64,
    truncation_warnings: usize,
}

#[derive(Debug)]
pub struct LandscapeRun {
    pub records: Vec<PointRecord>,
    pub cache_hits: usize,
}

impl LandscapeRun {
    pub fn landscape(&self) -> Landscape {
        Landscape {
            points: self.records.iter().map(|r| r.point).collect(),
            correlations: Some(self.records.iter().map(PointRecord::correlation_set).collect()),
        }
    }
}

fn simulate_point(
    params: &CavityParams,
    opts: &SimOptions,
    keep: usize,
    alpha_mhz: f64,
    factor: f64,
) -> Result<PointRecord, String> {
    let r = simulate(params, opts).map_err(|e| e.to_string())?;
    let n = keep.min(r.tau_grid.len());
    Ok(PointRecord {
        alpha_mhz,
        omega_factor: factor,
        g_mhz: to_mhz(params.g),
        delta_mhz: to_mhz(params.omega_res - params.omega_ge),
        point: LandscapePoint {
            alpha: mhz(alpha_mhz),
            omega: params.drive,
            flux: r.flux,
            kinetic_integral: r.kinetic_integral,
            g2_zero: r.g2_zero,
        },
        coherent_flux: r.coherent_flux,
        mean_photons: r.mean_photons,
        truncation_warnings: r.warnings.len(),
        tau: r.tau_grid[..n].to_vec(),
        g1: r.g1[..n].to_vec(),
        g2: r.g2[..n].to_vec(),
    })
}

/// Simulates the configured grid, reusing and filling the cache. Points
/// that fail are reported and left out.
pub fn run_landscape(cfg: &RunConfig, out: &mut Outcome) -> Result<LandscapeRun, Fatal> {
    let lc = &cfg.landscape;
    let template = CavityParams {
        n_cav: lc.n_cav,
        n_q: lc.n_q,
        ..CavityParams::device()
    };
    let opts = SimOptions {
        n_tau: lc.n_tau,
        span_kappa: lc.span_kappa,
        ..SimOptions::default()
    };
    let cache = open_cache(cfg)?;
    let biases: Vec<Result<CavityParams, String>> = lc
        .alpha_mhz
        .par_iter()
        .map(|&a| {
            coupling_for_anharmonicity(mhz(a), template.omega_d, &template, mhz(0.5), mhz(40.0), mhz(1e-4))
                .map(|b| b.params)
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut jobs = Vec::new();
    for (i, b) in biases.iter().enumerate() {
        match b {
            Ok(p) => jobs.extend(lc.omega_factor.iter().map(|&f| (lc.alpha_mhz[i], f, p.with_drive(f * omega_0())))),
            Err(e) => out.fail(format!("alpha {} MHz", lc.alpha_mhz[i]), e),
        }
    }
    let results: Vec<(Result<PointRecord, String>, bool, String)> = jobs
        .par_iter()
        .map(|(a, f, p)| {
            let key = cache::key("landscape-point", &(a, f, p, &opts, lc.keep_tau_points));
            if let Some(rec) = cache.as_ref().and_then(|c| c.get::<PointRecord>(&key)) {
                return (Ok(rec), true, key);
            }
            let rec = simulate_point(p, &opts, lc.keep_tau_points, *a, *f);
            if let (Ok(r), Some(c)) = (&rec, &cache) {
                if let Err(e) = c.put(&key, r) {
                    return (Err(format!("cache write: {e}")), false, key);
                }
            }
            (rec, false, key)
        })
        .collect();
    let mut records = Vec::new();
    let mut hits = Vec::new();
    for ((a, f, p), (rec, hit, _)) in jobs.iter().zip(results) {
        match rec {
            Ok(r) => {
                if hit {
                    hits.push((records.len(), p.clone()));
                }
                records.push(r);
            }
            Err(e) => out.fail(format!("alpha {a} MHz, Omega {f} Omega_0"), e),
        }
    }
    // one hit per run is recomputed and must match bit for bit
    if !hits.is_empty() {
        let (k, p) = &hits[(cfg.seed as usize) % hits.len()];
        let r = &records[*k];
        match simulate_point(p, &opts, lc.keep_tau_points, r.alpha_mhz, r.omega_factor) {
            Ok(fresh) if &fresh == r => {}
            Ok(_) => out.fail(
                format!("cache spot check at alpha {} MHz, Omega {} Omega_0", r.alpha_mhz, r.omega_factor),
                "cached record differs from recomputation",
            ),
            Err(e) => out.fail("cache spot check", e),
        }
    }
    let rows: Vec<LandscapeRow> = records
        .iter()
        .map(|r| LandscapeRow {
            alpha_mhz: r.alpha_mhz,
            omega_over_omega0: r.omega_factor,
            g_mhz: r.g_mhz,
            delta_mhz: r.delta_mhz,
            flux: r.point.flux,
            coherent_flux: r.coherent_flux,
            kinetic_integral: r.point.kinetic_integral,
            g2_zero: r.point.g2_zero,
            mean_photons: r.mean_photons,
            truncation_warnings: r.truncation_warnings,
        })
        .collect();
    write_csv(&cfg.output_dir, "landscape.csv", &rows)?;
    Ok(LandscapeRun {
        cache_hits: hits.len(),
        records,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CmpsRow {
    pub v_tilde_target: f64,
    pub d: usize,
    pub v: f64,
    pub v_tilde: f64,
    pub e_ll: f64,
    /// Energy density at `mu = 1` before rescaling.
    pub energy: f64,
    /// `-1 / (4 v)` for `D = 1`.
    pub closed_form: Option<f64>,
    pub g2_x0: f64,
    pub iterations: usize,
}

fn cmps_rows(target: f64, ladder: &[MatchedSolve]) -> Result<Vec<CmpsRow>, String> {
    ladder
        .iter()
        .map(|m| {
            let obs = observables(&m.ground.state, &m.ground.fp).map_err(|e| e.to_string())?;
            let d = m.ground.state.dim();
            Ok(CmpsRow {
                v_tilde_target: target,
                d,
                v: m.v,
                v_tilde: m.v_tilde,
                e_ll: m.e_ll,
                energy: m.ground.energy,
                closed_form: (d == 1).then(|| -1.0 / (4.0 * m.v)),
                g2_x0: obs.interaction / (obs.density * obs.density),
                iterations: m.ground.iterations,
            })
        })
        .collect()
}

/// Ladders over bond dimension at each target `v_tilde`, warm-started
/// along the list. `E_LL` must not increase with `D`.
pub fn reference_table(
    targets: &[f64],
    dims: &[usize],
    rel_tol: f64,
    seed: u64,
    out: &mut Outcome,
) -> Vec<CmpsRow> {
    let mut dims = dims.to_vec();
    dims.sort_unstable();
    dims.dedup();
    let tdvp = TdvpConfig {
        rng_seed: seed,
        ..TdvpConfig::default()
    };
    let mut warm: Option<CmpsState> = None;
    let mut rows = Vec::new();
    for &t in targets {
        // a warm start from a distant v_tilde can land on a degenerate state
        let ladder = solve_ladder(t, &dims, &tdvp, warm.as_ref(), rel_tol)
            .or_else(|_| solve_ladder(t, &dims, &tdvp, None, rel_tol))
            .map_err(|e| e.to_string());
        match ladder.and_then(|l| cmps_rows(t, &l).map(|r| (l, r))) {
            Ok((ladder, r)) => {
                warm = ladder.last().map(|m| m.ground.state.clone());
                for w in r.windows(2) {
                    if w[1].e_ll > w[0].e_ll + 1e-6 {
                        out.fail(
                            format!("v_tilde {t}"),
                            format!("E_LL rises from D={} to D={}", w[0].d, w[1].d),
                        );
                    }
                }
                rows.extend(r);
            }
            Err(e) => out.fail(format!("v_tilde {t}"), format!("no convergence: {e}")),
        }
    }
    rows
}

pub fn run_cmps(cfg: &RunConfig, out: &mut Outcome) -> Result<Vec<CmpsRow>, Fatal> {
    let rows = reference_table(&cfg.cmps.v_tilde, &cfg.cmps.dims, cfg.cmps.rel_tol, cfg.seed, out);
    write_csv(&cfg.output_dir, "cmps.csv", &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScanRow {
    pub v: f64,
    pub v_tilde: f64,
    pub mu_tilde: f64,
    pub alpha_min_mhz: f64,
    pub omega_min_over_omega0: f64,
    pub s_tilde: f64,
    pub e_ll: f64,
    pub g2_x0: f64,
    pub degenerate: bool,
    pub reference_d_low: Option<f64>,
    pub reference_d_high: Option<f64>,
    /// Landscape energy at or above the highest-D reference.
    pub above_reference: Option<bool>,
}

#[derive(Serialize)]
struct CorrelatorRow {
    v: f64,
    x: f64,
    g1_re: f64,
    g1_im: f64,
    g2: f64,
}

pub fn run_scan(cfg: &RunConfig, run: &LandscapeRun, out: &mut Outcome) -> Result<Vec<ScanRow>, Fatal> {
    let sc = &cfg.scan;
    if run.records.is_empty() {
        return Err("no landscape points available".into());
    }
    let land = run.landscape();
    let x: Vec<f64> = (0..sc.n_x).map(|k| sc.x_max * k as f64 / (sc.n_x - 1) as f64).collect();
    let results: Vec<Result<GroundStateResult, String>> = sc
        .v
        .par_iter()
        .map(|&v| ground_state(&land, v, sc.mu, &x).map_err(|e| e.to_string()))
        .collect();
    let mut states = Vec::new();
    for (v, r) in sc.v.iter().zip(results) {
        match r {
            Ok(g) => states.push(g),
            Err(e) => out.fail(format!("v {v}"), e),
        }
    }
    states.sort_by(|a, b| a.v_tilde.total_cmp(&b.v_tilde));
    let targets: Vec<f64> = states.iter().map(|g| g.v_tilde).collect();
    let refs = if sc.reference_dims.is_empty() {
        Vec::new()
    } else {
        reference_table(&targets, &sc.reference_dims, cfg.cmps.rel_tol, cfg.seed, out)
    };
    let lo = sc.reference_dims.iter().min().copied();
    let hi = sc.reference_dims.iter().max().copied();
    let lookup = |t: f64, d: Option<usize>| {
        d.and_then(|d| refs.iter().find(|r| r.v_tilde_target == t && r.d == d).map(|r| r.e_ll))
    };
    let mut rows = Vec::new();
    let mut corr = Vec::new();
    for g in &states {
        let (alpha, om) = cmpsim::lieb_liniger::point_axes(&land.points[g.index]);
        let r_lo = lookup(g.v_tilde, lo);
        let r_hi = lookup(g.v_tilde, hi);
        rows.push(ScanRow {
            v: g.v,
            v_tilde: g.v_tilde,
            mu_tilde: g.mu_tilde,
            alpha_min_mhz: alpha,
            omega_min_over_omega0: om,
            s_tilde: g.s_tilde_min,
            e_ll: g.e_ll,
            g2_x0: land.points[g.index].g2_zero,
            degenerate: g.breakdown.degenerate,
            reference_d_low: if lo != hi { r_lo } else { None },
            reference_d_high: r_hi,
            above_reference: r_hi.map(|e| g.e_ll >= e - 1e-6),
        });
        if let Some(c) = &g.correlators {
            for k in 0..c.x.len() {
                corr.push(CorrelatorRow {
                    v: g.v,
                    x: c.x[k],
                    g1_re: c.g1_x[k].re,
                    g1_im: c.g1_x[k].im,
                    g2: c.g2_x[k],
                });
            }
        }
    }
    write_csv(&cfg.output_dir, "scan.csv", &rows)?;
    write_csv(&cfg.output_dir, "correlators.csv", &corr)?;
    Ok(rows)
}

#[derive(Serialize)]
struct G2Row {
    tau_us: f64,
    g1_re: f64,
    g1_im: f64,
    g1_se: f64,
    g2: f64,
    g2_se: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TracesSummary {
    pub model: SourceKind,
    pub flux_in: f64,
    pub flux_estimate: f64,
    pub g2_zero: f64,
    pub g2_zero_se: f64,
    pub n_traces: usize,
    pub seed: u64,
}

pub fn run_traces(cfg: &RunConfig) -> Result<TracesSummary, Fatal> {
    let tc = &cfg.traces;
    let dsp = tc.trace_config(cfg.seed);
    let model = match tc.model {
        SourceKind::Coherent => FieldModel::Coherent { flux: tc.flux },
        SourceKind::Thermal => FieldModel::Thermal { flux: tc.flux },
    };
    let est = measure(model, &dsp).map_err(|e| e.to_string())?;
    let rows: Vec<G2Row> = (0..est.g2.len())
        .map(|k| G2Row {
            tau_us: est.g1.tau[k],
            g1_re: est.g1.g1[k].re,
            g1_im: est.g1.g1[k].im,
            g1_se: est.g1.g1_se[k],
            g2: est.g2[k],
            g2_se: est.g2_se[k],
        })
        .collect();
    write_csv(&cfg.output_dir, "g2.csv", &rows)?;
    if tc.write_raw {
        for (label, seed, name) in [(Label::On, dsp.seed, "on.bin"), (Label::Off, dsp.seed.wrapping_add(1), "off.bin")] {
            let c = cmpsim::trace_dsp::TraceConfig { seed, ..dsp.clone() };
            let batch = synthesize_traces(model, &c, label).map_err(|e| e.to_string())?;
            let f = std::fs::File::create(cfg.output_dir.join(name)).map_err(io(name))?;
            write_batch(&batch, std::io::BufWriter::new(f)).map_err(|e| e.to_string())?;
        }
    }
    let summary = TracesSummary {
        model: tc.model,
        flux_in: tc.flux,
        flux_estimate: est.flux,
        g2_zero: est.g2_zero,
        g2_zero_se: est.g2_zero_se,
        n_traces: dsp.n_traces,
        seed: dsp.seed,
    };
    write_json(&cfg.output_dir, "traces.json", &summary)?;
    Ok(summary)
}

#[derive(Deserialize)]
struct SpectroscopyRow {
    omega_mhz: f64,
    t_abs_sq: f64,
}

#[derive(Deserialize)]
struct VoltageRow {
    v1: f64,
    v2: f64,
    g_mhz: f64,
    delta_mhz: f64,
}

#[derive(Deserialize)]
struct FluxRow {
    drive_mhz: f64,
    coherent: f64,
    total: f64,
}

#[derive(Serialize)]
struct FitReport {
    g_mhz: f64,
    delta_mhz: f64,
    kappa_mhz: f64,
    gamma_mhz: f64,
    omega_res_mhz: f64,
    omega_ge_mhz: f64,
    fit: TransmissionFit,
}

#[derive(Serialize)]
struct TuneRow {
    iteration: usize,
    v1: f64,
    v2: f64,
    g_mhz: f64,
    delta_mhz: f64,
    error_g: f64,
    error_delta: f64,
}

pub fn run_calibrate(cfg: &RunConfig, out: &mut Outcome) -> Result<(), Fatal> {
    let cc = &cfg.calibrate;
    if cc.spectroscopy.is_none() && cc.voltage_samples.is_none() && cc.flux_curves.is_none() {
        return Err("nothing to calibrate: set spectroscopy, voltage_samples or flux_curves".into());
    }
    let dir = &cfg.output_dir;
    if let Some(path) = &cc.spectroscopy {
        let rows: Vec<SpectroscopyRow> = read_csv(path)?;
        let w: Vec<f64> = rows.iter().map(|r| mhz(r.omega_mhz)).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.t_abs_sq).collect();
        match fit_transmission(&w, &y, None, &FitOptions::default()) {
            Ok(fit) => {
                let [g, d] = fitted_bias(&fit.params);
                let p = fit.params;
                write_json(
                    dir,
                    "transmission_fit.json",
                    &FitReport {
                        g_mhz: g,
                        delta_mhz: d,
                        kappa_mhz: to_mhz(p.kappa),
                        gamma_mhz: to_mhz(p.gamma),
                        omega_res_mhz: to_mhz(p.omega_res),
                        omega_ge_mhz: to_mhz(p.omega_ge),
                        fit,
                    },
                )?;
            }
            Err(e) => out.fail("transmission fit", e),
        }
    }
    let mut map: Option<VoltageMap> = None;
    if let Some(path) = &cc.voltage_samples {
        let rows: Vec<VoltageRow> = read_csv(path)?;
        let samples: Vec<[f64; 4]> = rows.iter().map(|r| [r.v1, r.v2, r.g_mhz, r.delta_mhz]).collect();
        match fit_voltage_map(&samples) {
            Ok(m) => {
                write_json(dir, "voltage_map.json", &m)?;
                map = Some(m);
            }
            Err(e) => out.fail("voltage map", e),
        }
    }
    if cc.tune {
        match &map {
            Some(m) => {
                let mut plant = SimulatedPlant::new(m.clone(), cfg.seed);
                plant.quad = cc.plant_quad;
                plant.scale = cc.tune_target;
                plant.noise = cc.plant_noise;
                match iterative_tune(&mut plant, m, cc.tune_target, cc.tune_tol, cc.max_iter) {
                    Ok(r) => {
                        let rows: Vec<TuneRow> = r
                            .history
                            .iter()
                            .enumerate()
                            .map(|(k, s)| TuneRow {
                                iteration: k + 1,
                                v1: s.v[0],
                                v2: s.v[1],
                                g_mhz: s.measured[0],
                                delta_mhz: s.measured[1],
                                error_g: s.error[0],
                                error_delta: s.error[1],
                            })
                            .collect();
                        write_csv(dir, "tune_log.csv", &rows)?;
                    }
                    Err(e) => out.fail("tuner", e),
                }
            }
            None => out.fail("tuner", "needs a fitted voltage map"),
        }
    }
    if let Some(path) = &cc.flux_curves {
        let rows: Vec<FluxRow> = read_csv(path)?;
        let curves = FluxCurves {
            drive: rows.iter().map(|r| mhz(r.drive_mhz)).collect(),
            coherent: rows.iter().map(|r| r.coherent).collect(),
            total: rows.iter().map(|r| r.total).collect(),
        };
        let [delta, g] = cc.efficiency_bias;
        let bias = CavityParams::at_bias(mhz(delta), mhz(g), CavityParams::device().omega_d);
        let bracket = (cc.drive_scale_bracket[0], cc.drive_scale_bracket[1]);
        match calibrate_efficiency(&curves, |om| me_flux(&bias, om), cc.s_delta, None, bracket) {
            Ok(e) => write_json(dir, "efficiency.json", &e)?,
            Err(e) => out.fail("efficiency", e),
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub grid_points: usize,
    pub failed_items: usize,
    /// Flux rises with drive at every anharmonicity.
    pub flux_monotone_in_drive: bool,
    /// g2(0) at (largest alpha, smallest drive) and (smallest alpha,
    /// largest drive).
    pub g2_corners: Option<(f64, f64)>,
    pub minima: Vec<ScanRow>,
    pub all_above_reference: Option<bool>,
}

fn flux_monotone(records: &[PointRecord]) -> bool {
    let mut alphas: Vec<f64> = records.iter().map(|r| r.alpha_mhz).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    alphas.iter().all(|&a| {
        let mut row: Vec<&PointRecord> = records.iter().filter(|r| r.alpha_mhz == a).collect();
        row.sort_by(|x, y| x.omega_factor.total_cmp(&y.omega_factor));
        row.windows(2).all(|w| w[1].point.flux > w[0].point.flux)
    })
}

fn g2_corners(records: &[PointRecord]) -> Option<(f64, f64)> {
    let key = |r: &&PointRecord| (r.alpha_mhz, -r.omega_factor);
    let a = records.iter().max_by(|x, y| key(x).partial_cmp(&key(y)).unwrap())?;
    let b = records.iter().min_by(|x, y| key(x).partial_cmp(&key(y)).unwrap())?;
    Some((a.point.g2_zero, b.point.g2_zero))
}

/// Landscape, interaction scan with references, and a JSON digest.
pub fn run_report(cfg: &RunConfig, out: &mut Outcome) -> Result<Report, Fatal> {
    let run = run_landscape(cfg, out)?;
    let minima = run_scan(cfg, &run, out)?;
    let above: Vec<bool> = minima.iter().filter_map(|r| r.above_reference).collect();
    let report = Report {
        grid_points: run.records.len(),
        failed_items: out.failures.len(),
        flux_monotone_in_drive: flux_monotone(&run.records),
        g2_corners: g2_corners(&run.records),
        all_above_reference: (!above.is_empty()).then(|| above.iter().all(|&b| b)),
        minima,
    };
    write_json(&cfg.output_dir, "report.json", &report)?;
    Ok(report)
}

pub fn finish(cfg: &RunConfig, out: &Outcome) -> Result<(), Fatal> {
    write_failures(&cfg.output_dir, out)
}
