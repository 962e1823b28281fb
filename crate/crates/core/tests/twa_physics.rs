use pomega_core::twa::*;
use pomega_core::Complex64;

fn quiet(n: usize, scheme: Scheme) -> ModelParams {
    ModelParams { n, l: 0.9 * n as f64, p0: 0.0, noise: false, scheme, dt: if scheme == Scheme::Rk4 { 0.02 } else { 0.05 }, ..ModelParams::default() }
}

fn plane_wave(q: &ModelParams, mx: i32, my: i32, amp: f64) -> (CondensateState, f64) {
    let n = q.n;
    let (kx, ky) = (2.0 * std::f64::consts::PI * mx as f64 / q.l, 2.0 * std::f64::consts::PI * my as f64 / q.l);
    let mut psi = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (i as f64 * q.dx(), j as f64 * q.dx());
            psi.push(Complex64::from_polar(amp, kx * x + ky * y));
        }
    }
    (CondensateState { psi, n_res: vec![0.0; n * n], t: 0.0 }, kx * kx + ky * ky)
}

#[test]
fn plane_wave_matches_linear_mode_solution() {
    for scheme in [Scheme::Rk4, Scheme::Rk4Ip] {
        let q = quiet(16, scheme);
        let sim = Simulator::new(&q).unwrap();
        let amp = 0.8;
        let (mut s, k2) = plane_wave(&q, 2, -1, amp);
        let start = s.psi.clone();
        let mut rng = trajectory_rng(0, 0);
        let t = 10.0;
        sim.advance(&mut s, &mut rng, sim.steps_between(0.0, t)).unwrap();
        // |ψ|² = A² e^{−γt}; phase from kinetic energy and the renormalized density
        let g = q.gamma_c;
        let vac = 1.0 / q.cell_area();
        let phase = -q.kinetic_coefficient() * k2 * t - q.g_c / q.hbar * (amp * amp * (1.0 - (-g * t).exp()) / g - vac * t);
        let factor = Complex64::from_polar((-0.5 * g * t).exp(), phase);
        let worst = s.psi.iter().zip(&start).map(|(z, z0)| (z - z0 * factor).norm() / (z0 * factor).norm()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{scheme:?}: {worst:e}");
        assert!(s.n_res.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn noise_only_growth_follows_injected_variance() {
    let q = ModelParams { noise: true, ..quiet(8, Scheme::Rk4Ip) };
    let sim = Simulator::new(&q).unwrap();
    let m = 1000;
    let mut ens = TrajectoryEnsemble {
        seed: 3,
        trajectories: (0..m as u64)
            .map(|id| Trajectory { id, state: CondensateState { psi: vec![Complex64::new(0.0, 0.0); 64], n_res: vec![0.0; 64], t: 0.0 }, rng: trajectory_rng(3, id) })
            .collect(),
    };
    let cells = (m * 64) as f64;
    for t in [1.0, 4.0, 20.0] {
        ens.evolve_to(&sim, t).unwrap();
        let mean = ens.trajectories.iter().flat_map(|tr| tr.state.psi.iter().map(|z| z.norm_sqr())).sum::<f64>() / cells;
        // d⟨|ψ|²⟩/dt = γ/(2ΔV) − γ⟨|ψ|²⟩
        let want = (1.0 - (-q.gamma_c * ens.time()).exp()) / (2.0 * q.cell_area());
        let sigma = want / cells.sqrt();
        assert!((mean - want).abs() < 5.0 * sigma, "t={t}: {mean} vs {want} ± {sigma}");
    }
}

fn conservative_drift(scheme: Scheme, dt: f64, steps: usize) -> f64 {
    let q = ModelParams { gamma_c: 0.0, r_r: 0.0, dt, ..quiet(16, scheme) };
    let sim = Simulator::new(&q).unwrap();
    let mut rng = trajectory_rng(1, 0);
    let mut s = CondensateState::vacuum(&ModelParams { renormalize: false, ..q.clone() }, &mut rng).unwrap();
    for (c, z) in s.psi.iter_mut().enumerate() {
        *z += Complex64::new(2.0 + (c % 5) as f64 * 0.3, 0.0);
    }
    let n0 = s.norm(&q);
    sim.advance(&mut s, &mut rng, steps).unwrap();
    (s.norm(&q) - n0).abs() / n0
}

#[test]
fn conservative_limit_keeps_norm() {
    for (scheme, dt) in [(Scheme::Rk4, 0.005), (Scheme::Rk4Ip, 0.02)] {
        let d = conservative_drift(scheme, dt, 100);
        assert!(d < 1e-8, "{scheme:?}: {d:e}");
    }
}

#[test]
fn conservative_drift_is_fourth_order() {
    for scheme in [Scheme::Rk4, Scheme::Rk4Ip] {
        // same physical time, half the step
        let (coarse, fine) = (conservative_drift(scheme, 0.02, 100), conservative_drift(scheme, 0.01, 200));
        assert!(fine < coarse / 10.0, "{scheme:?}: {coarse:e} -> {fine:e}");
    }
}

#[test]
fn halving_dt_converges() {
    for scheme in [Scheme::Rk4, Scheme::Rk4Ip] {
        let mut q = ModelParams { p0: 8.0, ..quiet(32, scheme) };
        q.pump_width = 8.0;
        let run = |dt: f64| {
            let q = ModelParams { dt, ..q.clone() };
            let sim = Simulator::new(&q).unwrap();
            let mut s = CondensateState::empty(&q).unwrap();
            let pump = pump_profile(&q);
            for (z, p) in s.psi.iter_mut().zip(&pump) {
                *z = Complex64::new(0.5 + p / 8.0, 0.1);
            }
            sim.advance(&mut s, &mut trajectory_rng(0, 0), sim.steps_between(0.0, 10.0)).unwrap();
            (s.norm(&q), mode_amplitude(&s, &q, WaveVector::ZERO).unwrap())
        };
        let dt = if scheme == Scheme::Rk4 { 0.02 } else { 0.1 };
        let (n1, a1) = run(dt);
        let (n2, a2) = run(dt / 2.0);
        assert!((n1 - n2).abs() / n2 < 1e-4, "{scheme:?}: norm {n1} {n2}");
        assert!((a1 - a2).norm() / a2.norm() < 1e-4, "{scheme:?}: mode {a1} {a2}");
    }
}

#[test]
fn uniform_threshold_by_bisection() {
    let q = ModelParams::with_grid(64);
    let p = homogeneous_threshold_bisect(&q, 1e-3).unwrap();
    assert!((p - 4.0).abs() / 4.0 < 0.02, "{p}");
    assert!((q.homogeneous_threshold() - 4.0).abs() < 1e-12);
}

#[test]
fn reservoir_relaxes_to_exact_stationary_value() {
    for renormalize in [false, true] {
        let q = ModelParams { p0: 8.0, renormalize, ..quiet(16, Scheme::Rk4Ip) };
        let sim = Simulator::new(&q).unwrap();
        let mut s = CondensateState { psi: vec![Complex64::new(0.0, 0.0); 256], n_res: vec![0.0; 256], t: 0.0 };
        sim.advance(&mut s, &mut trajectory_rng(0, 0), sim.steps_between(0.0, 200.0)).unwrap();
        let exact = reservoir_steady(&q).unwrap();
        for (a, b) in s.n_res.iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-8 * b.max(1.0), "{a} {b}");
        }
        let centre = exact[8 * 16 + 8];
        if renormalize {
            assert!((centre - 8.0 / (q.gamma_r - q.r_r / q.cell_area())).abs() < 1e-12);
        } else {
            assert!((centre - 8.0 / 0.3).abs() < 1e-12);
        }
    }
}

#[test]
fn fixed_seed_is_bit_identical() {
    let q = ModelParams { scheme: Scheme::Rk4Ip, dt: 0.2, ..ModelParams::with_grid(16) };
    let sim = Simulator::new(&q).unwrap();
    let run = || {
        let mut e = TrajectoryEnsemble::vacuum(&q, 4, 11).unwrap();
        e.evolve_to(&sim, 20.0).unwrap();
        e.trajectories.into_iter().map(|t| t.state).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_dynamics_keep_phase_variance() {
    let q = ModelParams {
        gamma_c: 0.0,
        gamma_r: 0.0,
        r_r: 0.0,
        g_c: 0.0,
        g_r: 0.0,
        p0: 0.0,
        noise: false,
        scheme: Scheme::Rk4Ip,
        dt: 0.5,
        ..ModelParams::with_grid(8)
    };
    let sim = Simulator::new(&q).unwrap();
    let mut e = TrajectoryEnsemble::vacuum(&q, 50, 2).unwrap();
    for (i, tr) in e.trajectories.iter_mut().enumerate() {
        tr.state.psi.iter_mut().for_each(|z| *z += Complex64::from_polar(1.0, 0.05 * i as f64));
    }
    let times: Vec<f64> = (1..=5).map(|i| i as f64 * 10.0).collect();
    let s = phase_variance_series(&mut e, &sim, WaveVector::ZERO, &times, &PhaseEstimator::Samples).unwrap();
    assert!(s.values.iter().all(|v| (v - s.values[0]).abs() < 1e-10), "{:?}", s.values);
}

#[test]
fn aligned_ensemble_starts_phase_locked() {
    let q = ModelParams { scheme: Scheme::Rk4Ip, dt: 0.2, ..ModelParams::with_grid(16) };
    let mut e = TrajectoryEnsemble::vacuum(&q, 30, 4).unwrap();
    let before = mode_stats(&e, &q, WaveVector::ZERO).unwrap();
    e.align_phase(&q, WaveVector::ZERO).unwrap();
    let after = mode_stats(&e, &q, WaveVector::ZERO).unwrap();
    assert!((before.n_mean - after.n_mean).abs() < 1e-9 && (before.n_var - after.n_var).abs() < 1e-9);
    assert!(after.phase_samples.iter().all(|p| p.abs() < 1e-12));
}
