use cmpsim::cavity::*;
use cmpsim::linalg::*;

fn linear_cavity(drive: f64, n_cav: usize) -> CavityParams {
    let dev = CavityParams::device();
    CavityParams {
        g: 0.0,
        omega_res: dev.omega_d,
        drive,
        n_cav,
        ..dev
    }
}

fn design_point(alpha_mhz: f64) -> CavityParams {
    let dev = CavityParams::device();
    coupling_for_anharmonicity(mhz(alpha_mhz), dev.omega_d, &dev, mhz(0.5), mhz(40.0), mhz(1e-4))
        .unwrap()
        .params
}

#[test]
fn generator_preserves_trace() {
    let p = design_point(4.0).with_drive(2.0 * omega_0());
    let l = build_liouvillian(&p, None).unwrap();
    let d = l.dim;
    let id = vectorize(&eye(d));
    let left = id.mapv(|z| z.conj()).dot(&l.generator);
    assert!(left.iter().all(|z| z.norm() < 1e-9), "tr(L X) must vanish");
}

#[test]
fn undriven_steady_state_is_vacuum() {
    let p = design_point(4.0);
    let l = build_liouvillian(&p, None).unwrap();
    let rho = steady_state_me(&l).unwrap();
    assert!((rho[[0, 0]].re - 1.0).abs() < 1e-10);
    assert!(steady_state_residual(&l, &rho) < 1e-10);
}

#[test]
fn driven_linear_cavity_is_coherent() {
    let kappa = CavityParams::device().kappa;
    let drive = 0.2 * kappa;
    let p = linear_cavity(drive, 12);
    let l = build_liouvillian(&p, None).unwrap();
    let rho = steady_state_me(&l).unwrap();
    let amp = l.expect(&l.a, &rho);
    let want = c(0.0, -2.0 * drive / kappa);
    assert!((amp - want).norm() < 1e-9, "{amp} vs {want}");
    let n = l.expect(&dag(&l.a).dot(&l.a), &rho).re;
    assert!((n - 4.0 * drive * drive / (kappa * kappa)).abs() < 1e-9);

    let tau = uniform_grid(5.0 / kappa, 64);
    let g2 = g2_correlation(&l, &rho, &tau).unwrap();
    assert!(g2.iter().all(|x| (x - 1.0).abs() < 1e-6), "{g2:?}");
    let g1 = g1_correlation(&l, &rho, &tau);
    assert!((g1[0].re - kappa * n).abs() < 1e-10);
}

#[test]
fn jaynes_cummings_ladder_at_resonance() {
    let dev = CavityParams::device();
    let g = mhz(5.0);
    let p = CavityParams {
        omega_ge: dev.omega_res,
        g,
        n_q: 2,
        ..dev
    };
    let alpha = effective_anharmonicity(&p);
    assert!((alpha - (2.0 - 2f64.sqrt()) * g).abs() < 1e-9 * g);
}

#[test]
fn bias_path_pins_upper_polariton() {
    let p = CavityParams::at_bias(mhz(3.0), mhz(5.7), mhz(7350.0));
    assert!((to_mhz(p.omega_ge) - 7342.606).abs() < 1e-3);
    assert!((upper_polariton(&p) - mhz(7350.0)).abs() < 1e-8);

    let dev = CavityParams::device();
    let gs: Vec<f64> = [1.0, 4.0, 10.0, 25.0].iter().map(|&x| mhz(x)).collect();
    let path = constant_omega_plus_path(dev.omega_d, &gs, &dev).unwrap();
    let alphas: Vec<f64> = path.iter().map(|b| effective_anharmonicity(&b.params)).collect();
    for b in &path {
        assert!((upper_polariton(&b.params) - dev.omega_d).abs() < 1e-6);
    }
    assert!(alphas.windows(2).all(|w| w[1] < w[0]), "{alphas:?}");

    let below = CavityParams {
        omega_res: dev.omega_d + mhz(1.0),
        ..dev.clone()
    };
    assert!(matches!(
        constant_omega_plus_path(dev.omega_d, &[mhz(5.0)], &below),
        Err(CavityError::NoSolution { .. })
    ));
}

#[test]
fn anharmonicity_inversion_hits_target() {
    let dev = CavityParams::device();
    for a in [1.5, 3.0, 5.5] {
        let bp = coupling_for_anharmonicity(mhz(a), dev.omega_d, &dev, mhz(0.5), mhz(40.0), mhz(1e-4)).unwrap();
        assert!((to_mhz(effective_anharmonicity(&bp.params)) - a).abs() <= 1e-4);
    }
}

#[test]
fn spectrum_integrates_to_flux() {
    let p = design_point(5.2).with_drive(2.0 * omega_0());
    let r = simulate(&p, &SimOptions::default()).unwrap();
    let total: f64 = r.spectrum.density.iter().sum::<f64>() * r.spectrum.d_omega;
    assert!((total - r.flux).abs() < 1e-6 * r.flux);
    assert!((r.flux - p.kappa * r.mean_photons).abs() < 1e-10);
    assert!(r.kinetic_integral > 0.0);
    assert!(r.warnings.is_empty());
}

#[test]
fn plateau_check_rejects_short_windows() {
    let p = design_point(5.2).with_drive(omega_0());
    let l = build_liouvillian(&p, None).unwrap();
    let rho = steady_state_me(&l).unwrap();
    let tau = uniform_grid(0.5 / p.kappa, 128);
    let g1 = g1_correlation(&l, &rho, &tau);
    let plateau = p.kappa * l.expect(&l.a, &rho).norm_sqr();
    assert!(matches!(
        spectrum_and_kinetic(&tau, &g1, plateau),
        Err(CavityError::PlateauNotReached { .. })
    ));
}

#[test]
fn antibunching_and_oscillation() {
    let p = design_point(5.2);
    let weak = simulate(&p.with_drive(omega_0()), &SimOptions::default()).unwrap();
    assert!(weak.g2_zero < 0.5, "g2(0) = {}", weak.g2_zero);
    let strong = simulate(&p.with_drive(4.5 * omega_0()), &SimOptions::default()).unwrap();
    assert!(strong.g2.iter().any(|&x| x > 1.05));
    let crossings = strong.g2.windows(2).filter(|w| (w[0] - 1.0) * (w[1] - 1.0) < 0.0).count();
    assert!(crossings >= 2, "g2 crosses unity {crossings} times");
    assert!((strong.g2.last().unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn cavity_truncation_is_converged() {
    let p = design_point(5.2).with_drive(4.5 * omega_0());
    let stats = |n_cav: usize| {
        let q = CavityParams { n_cav, ..p.clone() };
        let l = build_liouvillian(&q, None).unwrap();
        let rho = steady_state_me(&l).unwrap();
        let ad = dag(&l.a);
        let n = l.expect(&ad.dot(&l.a), &rho).re;
        let g2 = l.expect(&ad.dot(&ad).dot(&l.a).dot(&l.a), &rho).re / (n * n);
        (n, g2)
    };
    let (n6, g6) = stats(6);
    let (n12, g12) = stats(12);
    assert!((n6 - n12).abs() < 0.01 * n12);
    assert!((g6 - g12).abs() < 0.01 * g12);
}

#[test]
fn broad_filter_matches_direct_detection() {
    let p = design_point(5.2).with_drive(omega_0());
    let spec = FilterSpec {
        gamma_f: 100.0 * p.kappa,
        ..FilterSpec::default()
    };
    let tau = [0.0, 0.05, 0.2];
    let filtered = filtered_g2(&p, &spec, &tau).unwrap();
    let l = build_liouvillian(&p, None).unwrap();
    let rho = steady_state_me(&l).unwrap();
    let direct = g2_correlation(&l, &rho, &tau).unwrap();
    for (f, d) in filtered.iter().zip(&direct) {
        assert!((f - d).abs() < 0.02 * d, "{f} vs {d}");
    }
}

#[test]
fn dephasing_only_qubit_has_no_unique_steady_state() {
    let p = CavityParams {
        gamma: 0.0,
        g: 0.0,
        ..CavityParams::device()
    };
    let l = build_liouvillian(&p, None).unwrap();
    assert!(matches!(
        steady_state_me(&l),
        Err(CavityError::NonUniqueSteadyState { .. })
    ));
}

#[test]
fn oversized_space_is_rejected() {
    let p = CavityParams {
        n_cav: 30,
        ..CavityParams::device()
    };
    assert!(matches!(
        build_liouvillian(&p, None),
        Err(CavityError::DimensionOverflow { dim: 90, cap: 64 })
    ));
}

#[test]
fn vacuum_has_no_flux() {
    let p = design_point(4.0);
    let l = build_liouvillian(&p, None).unwrap();
    let rho = steady_state_me(&l).unwrap();
    assert!(matches!(
        g2_correlation(&l, &rho, &[0.0]),
        Err(CavityError::ZeroFlux(_))
    ));
}

#[test]
fn filtered_g2_converges_with_bandwidth() {
    let p = design_point(5.2).with_drive(omega_0());
    let l = build_liouvillian(&p, None).unwrap();
    let rho = steady_state_me(&l).unwrap();
    let direct = g2_correlation(&l, &rho, &[0.0]).unwrap()[0];
    let gaps: Vec<f64> = [mhz(10.0), 10.0 * p.kappa, 100.0 * p.kappa]
        .iter()
        .map(|&gamma_f| {
            let spec = FilterSpec { gamma_f, ..FilterSpec::default() };
            (filtered_g2(&p, &spec, &[0.0]).unwrap()[0] - direct).abs()
        })
        .collect();
    assert!(gaps[0] > 0.01 * direct, "{gaps:?}");
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");

    let lin = linear_cavity(0.2 * p.kappa, 6);
    let g = filtered_g2(&lin, &FilterSpec::default(), &[0.0, 0.3]).unwrap();
    assert!(g.iter().all(|x| (x - 1.0).abs() < 1e-3), "{g:?}");
}

#[test]
fn empty_cavity_coherence_decays_at_half_kappa() {
    let p = linear_cavity(0.0, 6);
    let l = build_liouvillian(&p, None).unwrap();
    let mut psi = CVec::zeros(l.dim);
    psi[0] = c(0.6, 0.0);
    psi[p.n_q] = c(0.8, 0.0);
    let seed = CMat::from_shape_fn((l.dim, l.dim), |(i, j)| psi[i] * psi[j].conj());
    let tau = uniform_grid(3.0 / p.kappa, 32);
    let g1 = g1_correlation(&l, &seed, &tau);
    for (t, z) in tau.iter().zip(&g1) {
        let want = g1[0].re * (-p.kappa * t / 2.0).exp();
        assert!((z.norm() - want).abs() < 1e-10);
    }
}

#[test]
fn zero_delay_values_match_moments() {
    for f in [1.0, 2.5, 4.5] {
        let p = design_point(3.0).with_drive(f * omega_0());
        let l = build_liouvillian(&p, None).unwrap();
        let rho = steady_state_me(&l).unwrap();
        assert!((trace(&rho).re - 1.0).abs() < 1e-12);
        let ad = dag(&l.a);
        let n = l.expect(&ad.dot(&l.a), &rho).re;
        let direct = l.expect(&ad.dot(&ad).dot(&l.a).dot(&l.a), &rho).re / (n * n);
        let tau = uniform_grid(2.0 / p.kappa, 200);
        let g2 = g2_correlation(&l, &rho, &tau).unwrap();
        assert!((g2[0] - direct).abs() < 1e-10);
        assert!(g2[0] >= 1.0 - 1.0 / n - 1e-8);
        let g1 = g1_correlation(&l, &rho, &tau);
        assert!(g1.iter().all(|z| z.norm() <= g1[0].re + 1e-10));
    }
}

#[test]
fn synthetic_lines_give_known_kinetic_integrals() {
    let tau = uniform_grid(20.0, 4096);
    let flat: Vec<C64> = tau.iter().map(|_| c(2.0, 0.0)).collect();
    let s = spectrum_and_kinetic(&tau, &flat, 2.0).unwrap();
    assert!(s.kinetic_integral.abs() < 1e-12);

    let (f, w0, sigma) = (1.5, 6.0, 1.0);
    let line: Vec<C64> = tau
        .iter()
        .map(|&t| C64::from_polar(f, w0 * t) * (-0.5 * sigma * sigma * t * t).exp())
        .collect();
    let s = spectrum_and_kinetic(&tau, &line, 0.0).unwrap();
    let want = f * (w0 * w0 + sigma * sigma);
    assert!((s.kinetic_integral - want).abs() < 1e-6 * want, "{}", s.kinetic_integral);
    let peak = s
        .density
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert!((s.omega[peak] - w0).abs() < 2.0 * s.d_omega);
}

#[test]
fn flux_and_kinetic_grow_with_drive() {
    let p = design_point(5.2);
    let mut last = (0.0, 0.0);
    for f in [1.0, 2.0, 3.0, 4.5] {
        let r = simulate(&p.with_drive(f * omega_0()), &SimOptions::default()).unwrap();
        assert!(r.flux > last.0 && r.kinetic_integral > last.1);
        last = (r.flux, r.kinetic_integral);
    }
}
