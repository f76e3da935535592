use cmpsim::calibration::*;
use cmpsim::cavity::*;
use cmpsim::cmps::*;
use cmpsim::lieb_liniger::*;
use cmpsim::trace_dsp::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn design_point(alpha_mhz: f64) -> CavityParams {
    let dev = CavityParams::device();
    coupling_for_anharmonicity(mhz(alpha_mhz), dev.omega_d, &dev, mhz(0.5), mhz(40.0), mhz(1e-4))
        .unwrap()
        .params
}

fn scalar_closed_form() -> Check {
    let t = Instant::now();
    let gs = solve_ground_state(&LLModelParams { v: 2.0, mu: 1.0 }, 1, &TdvpConfig::default()).map_err(|e| e.to_string())?;
    let dt = t.elapsed();
    let r2 = gs.state.r[[0, 0]].norm_sqr();
    let detail = format!("E = {:.9}, |R|^2 = {:.7}, {:?}", gs.energy, r2, dt);
    ensure(
        (gs.energy + 0.125).abs() < 1e-6 && (r2 - 0.25).abs() < 1e-4 && dt < Duration::from_secs(1),
        detail,
    )
}

struct LadderRow {
    v_tilde: f64,
    e_ll: [f64; 3],
    v_tilde_got: [f64; 3],
    g2_x0: f64,
}

const LADDER: [usize; 3] = [1, 2, 14];

fn ladder_scan() -> Result<(Vec<LadderRow>, Duration), String> {
    let t = Instant::now();
    let cfg = TdvpConfig::default();
    let mut warm: Option<CmpsState> = None;
    let mut rows = Vec::new();
    for k in 0..11 {
        let vt = 10f64.powf(-2.0 + 0.5 * k as f64);
        let vt = (vt * 1e6).round() / 1e6;
        let r = solve_ladder(vt, &LADDER, &cfg, warm.as_ref(), 1e-8).map_err(|e| format!("v_tilde {vt}: {e}"))?;
        let top = r.last().unwrap();
        let o = observables(&top.ground.state, &top.ground.fp).map_err(|e| e.to_string())?;
        rows.push(LadderRow {
            v_tilde: vt,
            e_ll: [r[0].e_ll, r[1].e_ll, r[2].e_ll],
            v_tilde_got: [r[0].v_tilde, r[1].v_tilde, r[2].v_tilde],
            g2_x0: o.interaction / (o.density * o.density),
        });
        warm = Some(top.ground.state.clone());
    }
    Ok((rows, t.elapsed()))
}

fn tonks_anchor(scan: &(Vec<LadderRow>, Duration)) -> Check {
    let (rows, dt) = scan;
    let last = rows.last().unwrap();
    let tg = std::f64::consts::PI.powi(2) / 3.0;
    let detail = format!(
        "D=14 at v_tilde {}: E_LL = {:.5} vs {:.5} ({:.2}%), scan {:?}",
        last.v_tilde,
        last.e_ll[2],
        tg,
        100.0 * rel(last.e_ll[2], tg),
        dt
    );
    ensure(rel(last.e_ll[2], tg) < 0.05 && *dt < Duration::from_secs(300), detail)
}

fn variational_order(scan: &(Vec<LadderRow>, Duration)) -> Check {
    let (rows, _) = scan;
    let mut worst = f64::NEG_INFINITY;
    let mut mismatch: f64 = 0.0;
    for r in rows {
        worst = worst.max(r.e_ll[2] - r.e_ll[1]).max(r.e_ll[1] - r.e_ll[0]);
        for got in r.v_tilde_got {
            mismatch = mismatch.max(rel(got, r.v_tilde));
        }
    }
    let detail = format!(
        "{} points, max(E14 - E2, E2 - E1) = {worst:.3e}, max v_tilde mismatch {mismatch:.1e}",
        rows.len()
    );
    ensure(worst <= 1e-6, detail)
}

fn energy_and_antibunching_trend(scan: &(Vec<LadderRow>, Duration)) -> Check {
    let (rows, _) = scan;
    let increasing = rows.windows(2).all(|w| w[1].e_ll[2] > w[0].e_ll[2]);
    let decreasing = rows.windows(2).all(|w| w[1].g2_x0 < w[0].g2_x0);
    let first = &rows[0];
    let last = rows.last().unwrap();
    let decades = (last.v_tilde / first.v_tilde).log10();
    let detail = format!(
        "D=14 over {decades:.0} decades: E_LL {:.4} -> {:.4} (strict: {increasing}), g2_x(0) {:.3} -> {:.2e} (monotone: {decreasing})",
        first.e_ll[2], last.e_ll[2], first.g2_x0, last.g2_x0
    );
    ensure(
        decades >= 2.0 && increasing && decreasing && first.g2_x0 > 0.9 && last.g2_x0 < 0.5,
        detail,
    )
}

fn linear_cavity_exactness() -> Check {
    let t = Instant::now();
    let dev = CavityParams::device();
    let p = CavityParams {
        g: 0.0,
        omega_res: dev.omega_d,
        drive: 0.2 * dev.kappa,
        n_cav: 12,
        ..dev
    };
    let r = simulate(&p, &SimOptions::default()).map_err(|e| e.to_string())?;
    let g2_dev = r.g2.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
    let g1_dev = (r.g1[0].re - p.kappa * r.mean_photons).abs();
    let norm = |s: &Spectrum| s.density.iter().sum::<f64>() * s.d_omega;
    let lin_norm = rel(norm(&r.spectrum), r.flux);
    let q = design_point(5.2).with_drive(2.0 * omega_0());
    let jc = simulate(&q, &SimOptions::default()).map_err(|e| e.to_string())?;
    let jc_norm = rel(norm(&jc.spectrum), jc.flux);
    let dt = t.elapsed();
    let detail = format!(
        "max|g2 - 1| = {g2_dev:.1e} over {} taus, |G1(0) - kappa n| = {g1_dev:.1e}, spectrum norm err {lin_norm:.1e} (driven JC {jc_norm:.1e}), {dt:?}",
        r.g2.len()
    );
    ensure(
        g2_dev < 1e-8 && g1_dev < 1e-10 && lin_norm < 1e-6 && jc_norm < 1e-6 && dt < Duration::from_secs(10),
        detail,
    )
}

fn antibunching_at_design_point() -> Check {
    let p = design_point(5.2);
    let weak = simulate(&p.with_drive(omega_0()), &SimOptions::default()).map_err(|e| e.to_string())?;
    let strong = simulate(&p.with_drive(4.5 * omega_0()), &SimOptions::default()).map_err(|e| e.to_string())?;
    let crossings = strong.g2.windows(2).filter(|w| (w[0] - 1.0) * (w[1] - 1.0) < 0.0).count();
    let peak = strong.g2[1..].iter().cloned().fold(0.0, f64::max);
    let detail = format!(
        "g = {:.3} MHz, g2(0) = {:.3} at Omega_0; at 4.5 Omega_0 g2 crosses 1 {crossings} times, max g2(tau>0) = {peak:.3}",
        to_mhz(p.g),
        weak.g2_zero
    );
    ensure(weak.g2_zero < 0.5 && crossings >= 2 && peak > 1.0, detail)
}

fn broad_filter_convergence() -> Check {
    let p = design_point(5.2).with_drive(omega_0());
    let spec = FilterSpec {
        gamma_f: 100.0 * p.kappa,
        ..FilterSpec::default()
    };
    let tau = [0.0, 0.02, 0.05, 0.1, 0.2, 0.4, 0.8];
    let filtered = filtered_g2(&p, &spec, &tau).map_err(|e| e.to_string())?;
    let l = build_liouvillian(&p, None).map_err(|e| e.to_string())?;
    let rho = steady_state_me(&l).map_err(|e| e.to_string())?;
    let direct = g2_correlation(&l, &rho, &tau).map_err(|e| e.to_string())?;
    let worst = filtered.iter().zip(&direct).map(|(f, d)| rel(*f, *d)).fold(0.0, f64::max);
    let detail = format!(
        "{} taus, g2(0) filtered {:.4} vs direct {:.4}, worst pointwise {:.2}%",
        tau.len(),
        filtered[0],
        direct[0],
        100.0 * worst
    );
    ensure(worst < 0.02, detail)
}

fn bisect_scale(t0: f64, w0: f64, n0: f64, v: f64, mu: f64) -> f64 {
    let slope = |s: f64| mu * n0 / (s * s) - 2.0 * v * w0 / (s * s * s) - 3.0 * t0 / (s * s * s * s);
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    while slope(lo) >= 0.0 {
        lo *= 0.5;
    }
    while slope(hi) <= 0.0 {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = (lo * hi).sqrt();
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-14 {
            break;
        }
    }
    (lo * hi).sqrt()
}

fn closed_form_scale() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draw = |rng: &mut ChaCha8Rng| 10f64.powf(rng.random_range(-3.0..3.0));
    let (mut worst_num, mut worst_scale) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (t0, w0, n0, v, mu) = (draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let s = optimal_scale(t0, w0, n0, v, mu).map_err(|e| e.to_string())?;
        worst_num = worst_num.max(rel(s, bisect_scale(t0, w0, n0, v, mu)));
        let y = draw(&mut rng);
        let sy = optimal_scale(t0, w0, n0, v * y, mu * y * y).map_err(|e| e.to_string())?;
        worst_scale = worst_scale.max(rel(sy * y, s) / f64::EPSILON);
    }
    let grid: Vec<LandscapePoint> = (0..64)
        .map(|k| LandscapePoint {
            alpha: (k % 8) as f64,
            omega: (k / 8) as f64,
            flux: draw(&mut rng),
            kinetic_integral: draw(&mut rng),
            g2_zero: rng.random_range(0.0..2.0),
        })
        .collect();
    let mut moved = 0;
    for v in [0.01, 0.3, 3.0, 100.0] {
        let base = find_ground_state(&grid, v, 1.0).map_err(|e| e.to_string())?.0;
        for y in [1e-3, 0.2, 7.0, 1e3] {
            if find_ground_state(&grid, v * y, y * y).map_err(|e| e.to_string())?.0 != base {
                moved += 1;
            }
        }
    }
    let detail = format!(
        "200 draws: worst rel err vs bisection {worst_num:.1e}, worst s/y deviation {worst_scale:.1} eps; argmin moved in {moved}/16 rescalings"
    );
    ensure(worst_num < 1e-9 && worst_scale <= 8.0 && moved == 0, detail)
}

fn landscape_trend() -> Check {
    let t = Instant::now();
    let land = simulate_landscape(&GridSpec::default(), &CavityParams::device(), &SimOptions::default(), false)
        .map_err(|e| e.to_string())?;
    let sim = t.elapsed();
    let vs: Vec<f64> = (0..=6).map(|k| 10f64.powf(2.0 - 0.5 * k as f64)).collect();
    let mut path = Vec::new();
    for &v in &vs {
        let (i, _) = find_ground_state(&land.points, v, 1.0).map_err(|e| e.to_string())?;
        path.push(point_axes(&land.points[i]));
    }
    let monotone = path.windows(2).all(|w| w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
    let (a, b) = (path[0], *path.last().unwrap());
    let moved = b.0 < a.0 && b.1 > a.1;
    let db = |f: f64| 20.0 * f.log10();
    let detail = format!(
        "v {} -> {}: argmin ({:.2} MHz, {:.1} dB) -> ({:.2} MHz, {:.1} dB), monotone {monotone}, grid {sim:?}",
        vs[0],
        vs[vs.len() - 1],
        a.0,
        db(a.1),
        b.0,
        db(b.1)
    );
    ensure(monotone && moved && sim < Duration::from_secs(1800), detail)
}

fn g2_zero_runs(model: FieldModel, m: usize, seeds: std::ops::Range<u64>) -> Result<Vec<(f64, f64)>, String> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .map(|seed| {
                scope.spawn(move || {
                    let cfg = TraceConfig {
                        n_traces: m,
                        seed: 1000 + 2 * seed,
                        ..TraceConfig::default()
                    };
                    measure(model, &cfg).map(|e| (e.g2_zero, e.g2_zero_se))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap().map_err(|e| e.to_string()))
            .collect()
    })
}

fn log_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>()
}

fn trace_statistics() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, model, want, tol) in [
        ("coherent", FieldModel::Coherent { flux: 5.0 }, 1.0, 0.1),
        ("thermal", FieldModel::Thermal { flux: 5.0 }, 2.0, 0.15),
    ] {
        let runs = g2_zero_runs(model, 2000, 0..10)?;
        let inside = runs.iter().filter(|r| (r.0 - want).abs() <= tol).count();
        let mean = runs.iter().map(|r| r.0).sum::<f64>() / runs.len() as f64;
        let sd = (runs.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (runs.len() - 1) as f64).sqrt();
        ok &= inside == runs.len();
        parts.push(format!("{name} {inside}/10 within {want} +- {tol} (mean {mean:.3}, sd {sd:.3})"));
    }
    let mut pts = Vec::new();
    for m in [250usize, 500, 1000, 2000, 4000] {
        let runs = g2_zero_runs(FieldModel::Coherent { flux: 5.0 }, m, 0..8)?;
        let se = runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64;
        pts.push(((m as f64).ln(), se.ln()));
    }
    let slope = log_slope(&pts);
    ok &= (slope + 0.5).abs() <= 0.1;
    parts.push(format!("SE ~ M^{slope:.3} over M = 250..4000"));
    ensure(ok, parts.join("; "))
}

fn sample_transmission(p: &TransmissionParams, w: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nd = Normal::new(0.0, 1.0).unwrap();
    w.iter()
        .map(|&x| transmission(x, p).norm_sqr() * (1.0 + noise * nd.sample(rng)))
        .collect()
}

fn span(center: f64, half: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| center - half + 2.0 * half * k as f64 / (n - 1) as f64).collect()
}

fn calibration_round_trips() -> Check {
    let dev = CavityParams::device();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_g: f64 = 0.0;
    let mut worst_d: f64 = 0.0;
    let mut cases: Vec<(f64, f64)> = [-6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0].iter().map(|&d| (1.75, d)).collect();
    for _ in 0..20 {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        cases.push((rng.random_range(1.5..6.0), sign * rng.random_range(0.0..6.0)));
    }
    for &(g, d) in &cases {
        let p = TransmissionParams {
            a: 0.8,
            omega_res: dev.omega_res,
            omega_ge: dev.omega_res - mhz(d),
            g: mhz(g),
            gamma: dev.gamma,
            kappa: dev.kappa,
        };
        let w = span(p.omega_res, mhz(d.abs() + 3.0 * g + 8.0), 601);
        let y = sample_transmission(&p, &w, 0.01, &mut rng);
        let fit = fit_transmission(&w, &y, None, &FitOptions::default()).map_err(|e| format!("g {g} Delta {d}: {e}"))?;
        let [gf, df] = fitted_bias(&fit.params);
        worst_g = worst_g.max(rel(gf, g));
        worst_d = worst_d.max((df - d).abs() / g.max(d.abs()));
    }
    let transmission_ok = worst_g < 0.02 && worst_d < 0.02;

    let truth = VoltageMap::new([[12.0, -3.5], [-40.0, 95.0]], [0.21, -0.37]).map_err(|e| e.to_string())?;
    let samples: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let y = truth.apply(v);
            [v[0], v[1], y[0], y[1]]
        })
        .collect();
    let map = fit_voltage_map(&samples).map_err(|e| e.to_string())?;
    let mut map_err: f64 = 0.0;
    for target in [[5.7, 3.0], [1.75, -6.0], [0.0, 0.0]] {
        let back = truth.apply(map.invert(target));
        map_err = map_err.max((back[0] - target[0]).abs()).max((back[1] - target[1]).abs());
    }
    let map_ok = map_err < 1e-10;

    let target = [5.7, 3.0];
    let tol = [0.01 * 5.7, 0.01 * 3.0];
    let mut iters = Vec::new();
    for seed in 0..5 {
        let mut plant = SimulatedPlant::new(map.clone(), 40 + seed);
        plant.quad = 0.10;
        plant.scale = target;
        plant.noise = 0.002;
        let r = iterative_tune(&mut plant, &map, target, tol, 10).map_err(|e| e.to_string())?;
        iters.push(r.iterations);
    }
    let tune_ok = iters.iter().all(|&n| n <= 5);

    let bias = CavityParams::at_bias(mhz(3.0), mhz(5.7), dev.omega_d);
    let drive: Vec<f64> = (1..=10).map(|k| mhz(0.3) * k as f64).collect();
    let nd = Normal::new(0.0, 1.0).unwrap();
    let (mut coherent, mut total) = (Vec::new(), Vec::new());
    for &om in &drive {
        let (c, t) = me_flux(&bias, 1.3 * om).map_err(|e| e.to_string())?;
        coherent.push(0.27 * c * (1.0 + 0.01 * nd.sample(&mut rng)));
        total.push(0.27 * t * (1.0 + 0.01 * nd.sample(&mut rng)));
    }
    let curves = FluxCurves { drive, coherent, total };
    let eff = calibrate_efficiency(&curves, |om| me_flux(&bias, om), 2.0, None, (0.3, 3.0)).map_err(|e| e.to_string())?;
    let split = EfficiencyParams::compose(0.27, 2.0, 1.0, 1.0);
    let eff_ok = rel(eff.eta_tot, 0.27) < 0.05
        && (eff.eta_amp * eff.eta_loss - eff.eta_tot).abs() < 1e-12
        && (split.eta_amp - 0.5).abs() < 1e-12
        && (split.eta_loss - 0.54).abs() < 1e-12;

    let detail = format!(
        "{} fits: worst g err {:.2}%, worst Delta err {:.2}%; map round trip {map_err:.1e}; tuner iterations {iters:?}; eta_tot {:.4} (eta_amp {:.2} x eta_loss {:.2})",
        cases.len(),
        100.0 * worst_g,
        100.0 * worst_d,
        eff.eta_tot,
        split.eta_amp,
        split.eta_loss
    );
    ensure(transmission_ok && map_ok && tune_ok && eff_ok, detail)
}

fn report(n: usize, start: Instant, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &r {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!(
        "criterion {n:2}: {tag}  {detail}  [{:.1}s, total {:.1}s]",
        t.elapsed().as_secs_f64(),
        start.elapsed().as_secs_f64()
    );
    r.is_ok()
}

fn main() {
    let start = Instant::now();
    let mut results = Vec::new();
    results.push(report(1, start, scalar_closed_form));
    let scan = catch_unwind(ladder_scan).unwrap_or_else(|_| Err("ladder scan panicked".into()));
    for (n, check) in [
        (2, tonks_anchor as fn(&(Vec<LadderRow>, Duration)) -> Check),
        (3, variational_order),
        (4, energy_and_antibunching_trend),
    ] {
        results.push(report(n, start, || scan.as_ref().map_err(|e| e.clone()).and_then(check)));
    }
    results.push(report(5, start, linear_cavity_exactness));
    results.push(report(6, start, antibunching_at_design_point));
    results.push(report(7, start, broad_filter_convergence));
    results.push(report(8, start, closed_form_scale));
    results.push(report(9, start, landscape_trend));
    results.push(report(10, start, trace_statistics));
    results.push(report(11, start, calibration_round_trips));
    let total = start.elapsed();
    results.push(report(12, start, || {
        ensure(
            total < Duration::from_secs(600),
            format!("acceptance run {total:.1?} of the 600s budget"),
        )
    }));
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
