//! End-to-end acceptance gate. Each test prints a single pass/fail line and
//! enforces its runtime budget; run with `--nocapture` to see the lines on
//! success.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use delay_smp::backward::{solve_absee, AbseeData, RunningTerminal};
use delay_smp::config::ExperimentConfig;
use delay_smp::estimator::{CondEstimator, EstimatorMode};
use delay_smp::forward::{solve_sdee_with_noise, CoefficientBundle, ControlPath};
use delay_smp::grid::TimeGrid;
use delay_smp::hilbert::{
    ito_energy_check, sample_increments, FiniteVariationIntegrator, GelfandTriple, NoiseModel,
};
use delay_smp::lq::{
    control_l2_distance, control_l2_norm, lq_fixed_point, lq_gradient_residual, riccati_oracle,
};
use delay_smp::measure::{
    check_anticipated_inequality, check_delay_inequality, duality_residual, DelayMeasure, Density,
};
use delay_smp::smp::{
    ensemble_for, eval_cost, gateaux_check, optimize, sufficiency_check,
};
use delay_smp::spde::{build_operators, run_demo, SPDESpec};

const SEED: u64 = 42;

fn record(name: &str, pass: bool, budget_s: f64, start: Instant, detail: String) {
    let elapsed = start.elapsed().as_secs_f64();
    let verdict = if pass && elapsed <= budget_s { "PASS" } else { "FAIL" };
    println!("acceptance {name}: {verdict} [{elapsed:.1}s / {budget_s:.0}s] {detail}");
    assert!(pass, "{name}: {detail}");
    assert!(elapsed <= budget_s, "{name}: {elapsed:.1}s over the {budget_s:.0}s budget");
}

fn random_measure(rng: &mut ChaCha8Rng, grid: &TimeGrid) -> DelayMeasure {
    let n_atoms = rng.gen_range(1..=3);
    let mut atoms = Vec::new();
    for _ in 0..n_atoms {
        let cell = rng.gen_range(0..=grid.delay_steps());
        atoms.push((-(cell as f64) * grid.dt, rng.gen_range(0.1..1.0)));
    }
    DelayMeasure::new(grid.delta, atoms, None).expect("aligned atoms")
}

fn boundary_paths(
    rng: &mut ChaCha8Rng,
    grid: &TimeGrid,
    dim: usize,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let nn = grid.n_nodes();
    let mut eta = vec![DVector::zeros(dim); nn];
    let mut g = vec![DVector::zeros(dim); nn];
    for i in grid.idx_zero()..=grid.idx_t() {
        eta[i] = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        g[i] = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
    }
    for item in g.iter_mut().take(grid.idx_zero()) {
        *item = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
    }
    (eta, g)
}

#[test]
fn a01_duality_identity() {
    let start = Instant::now();
    let grid = TimeGrid::new(0.2, 1.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xd0a1);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let m = random_measure(&mut rng, &grid);
        let (eta, g) = boundary_paths(&mut rng, &grid, 2);
        let r = duality_residual(&m, &grid, |i| eta[i].clone(), |i| g[i].clone()).unwrap();
        worst = worst.max(r.abs());
    }
    // density measures across a 3-level dt ladder: the grid quadrature makes
    // the identity exact by summation swap, so each residual must sit at the
    // atomic tolerance or halve from the previous level
    let mut ladder = Vec::new();
    for &dt in &[0.05, 0.025, 0.0125] {
        let grid = TimeGrid::new(0.2, 1.0, dt).unwrap();
        let m = DelayMeasure::new(0.2, vec![], Some(Density::Exp { lambda: 1.5 })).unwrap();
        let (eta, g) = boundary_paths(&mut rng, &grid, 2);
        let r = duality_residual(&m, &grid, |i| eta[i].clone(), |i| g[i].clone()).unwrap();
        ladder.push(r.abs());
    }
    let density_ok =
        (1..ladder.len()).all(|k| ladder[k] <= (0.6 * ladder[k - 1]).max(1e-12));
    record(
        "01_duality",
        worst <= 1e-12 && density_ok,
        10.0,
        start,
        format!("atomic worst {worst:.3e}, density ladder {ladder:?}"),
    );
}

#[test]
fn a02_delay_inequalities() {
    let start = Instant::now();
    let grid = TimeGrid::new(0.2, 1.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x1eab);
    let mut violations = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let m = random_measure(&mut rng, &grid);
        let (eta, g) = boundary_paths(&mut rng, &grid, 1);
        let lam0 = rng.gen_range(0.5..2.0);
        let decay = rng.gen_range(0.0..1.0);
        let nn = grid.n_nodes() as f64;
        let lam_dec = move |i: usize| lam0 * (1.0 - decay * i as f64 / nn);
        let lam_inc = move |i: usize| lam0 * (1.0 + decay * i as f64 / nn);
        let rep =
            check_delay_inequality(&m, &grid, grid.idx_t(), |i| eta[i].clone(), lam_dec).unwrap();
        worst = worst.max(rep.lhs - rep.rhs);
        violations += usize::from(!rep.holds);
        let rep =
            check_anticipated_inequality(&m, &grid, grid.idx_zero(), |i| g[i].clone(), lam_inc)
                .unwrap();
        worst = worst.max(rep.lhs - rep.rhs);
        violations += usize::from(!rep.holds);
    }
    record(
        "02_inequalities",
        violations == 0,
        30.0,
        start,
        format!("1000 instances each, {violations} violations, worst margin {worst:.3e}"),
    );
}

#[test]
fn a03_energy_identity() {
    let start = Instant::now();
    let grid = TimeGrid::new(0.0, 1.0, 0.05).unwrap();
    let triple = GelfandTriple::identity(2);
    let noise = NoiseModel::identity(1);
    let fv = FiniteVariationIntegrator::from_atoms(vec![(0.4, 1.0), (0.8, 0.5)]);
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let vstar = |i: usize| DVector::from_vec(vec![0.3 - 0.01 * i as f64, 0.1]);
    let zeta = |_i: usize| DVector::from_vec(vec![0.7, -0.2]);
    let det = ito_energy_check(
        &vstar,
        &zeta,
        &fv,
        &|_i| DMatrix::zeros(2, 1),
        &x0,
        &triple,
        &noise,
        &grid,
        1,
        SEED,
        &[0.5, 1.0],
    )
    .unwrap();
    let sto = ito_energy_check(
        &vstar,
        &zeta,
        &fv,
        &|_i| DMatrix::from_vec(2, 1, vec![0.4, 0.2]),
        &x0,
        &triple,
        &noise,
        &grid,
        10_000,
        SEED,
        &[1.0],
    )
    .unwrap();
    // the jump correction must carry weight: dropping it breaks the identity
    let corr: f64 = det.probes.iter().map(|p| p.jump_correction.abs()).fold(0.0, f64::max);
    let omission_detected = corr > 1e-6 && det.max_abs_residual + corr > 1e-6;
    record(
        "03_energy",
        det.max_abs_residual <= 1e-10 && sto.pass && omission_detected,
        60.0,
        start,
        format!(
            "deterministic {:.3e}, stochastic within 4 SE over 1e4 paths: {}, correction {corr:.3e}",
            det.max_abs_residual, sto.pass
        ),
    );
}

fn scalar_bundle(a: f64, a1: f64, s0: f64) -> CoefficientBundle {
    CoefficientBundle::linear(
        Box::new(move |_| DMatrix::from_element(1, 1, a)),
        Box::new(|_| vec![DMatrix::zeros(1, 1)]),
        DMatrix::from_element(1, 1, a1),
        DMatrix::zeros(1, 1),
        DMatrix::zeros(1, 1),
        vec![DMatrix::zeros(1, 1)],
        vec![DMatrix::zeros(1, 1)],
        vec![DMatrix::zeros(1, 1)],
        DVector::zeros(1),
        DMatrix::from_element(1, 1, s0),
    )
}

#[test]
fn a04_forward_order() {
    let start = Instant::now();
    // linear system with additive noise: the weak error |E x_T - e^{aT}|
    // halves when dt halves
    let a = 0.8_f64;
    let triple = GelfandTriple::identity(1);
    let noise = NoiseModel::identity(1);
    let mut errs = Vec::new();
    for &dt in &[0.04, 0.02, 0.01] {
        let grid = TimeGrid::new(0.0, 1.0, dt).unwrap();
        let bundle = scalar_bundle(a, 0.0, 0.05);
        let ens = sample_increments(&noise, &grid, 10_000, SEED);
        let u = ControlPath::zero(&grid, 1);
        let x = solve_sdee_with_noise(
            &bundle,
            &triple,
            &|_t| DVector::from_element(1, 1.0),
            &u,
            &DelayMeasure::zero(0.0),
            &grid,
            &noise,
            &ens,
        )
        .unwrap();
        errs.push((x.mean_at(grid.idx_t())[0] - a.exp()).abs());
    }
    let halving = errs[1] <= 0.65 * errs[0] && errs[2] <= 0.65 * errs[1];

    // method of steps oracle: x' = x(t - 1/2), x = 1 on [-1/2, 0]
    let det = NoiseModel::new(vec![0.0]).unwrap();
    let mut mos = Vec::new();
    for &dt in &[0.01, 0.005] {
        let grid = TimeGrid::new(0.5, 1.0, dt).unwrap();
        let bundle = scalar_bundle(0.0, 1.0, 0.0);
        let ens = sample_increments(&det, &grid, 1, SEED);
        let u = ControlPath::zero(&grid, 1);
        let x = solve_sdee_with_noise(
            &bundle,
            &triple,
            &|_t| DVector::from_element(1, 1.0),
            &u,
            &DelayMeasure::dirac(0.5),
            &grid,
            &det,
            &ens,
        )
        .unwrap();
        let exact = |t: f64| {
            if t <= 0.5 {
                1.0 + t
            } else {
                1.0 + t + (t - 0.5) * (t - 0.5) / 2.0
            }
        };
        let mut sup = 0.0_f64;
        for i in grid.idx_zero()..=grid.idx_t() {
            sup = sup.max((x.x[0][i][0] - exact(grid.time(i))).abs());
        }
        mos.push(sup);
    }
    let mos_ok = mos[1] <= 0.6 * mos[0];
    record(
        "04_forward_order",
        halving && mos_ok,
        60.0,
        start,
        format!(
            "weak errors {errs:?}; method-of-steps sup errors {mos:?}, constant {:.3}",
            mos[0] / 0.01
        ),
    );
}

#[test]
fn a05_backward_oracles() {
    let start = Instant::now();
    let triple = GelfandTriple::identity(1);
    let noise = NoiseModel::new(vec![0.0]).unwrap();
    let est = CondEstimator::new(EstimatorMode::Mean);

    let grid = TimeGrid::new(0.0, 1.0, 0.05).unwrap();
    let ens = sample_increments(&noise, &grid, 1, SEED);
    let pair = solve_absee(
        &AbseeData::zero_ops(1),
        &RunningTerminal::plain(vec![DVector::zeros(1)], 1),
        &DelayMeasure::zero(0.0),
        &grid,
        &triple,
        &noise,
        &ens,
        &|_tr, _i| DVector::zeros(1),
        &est,
    )
    .unwrap();
    let zero_worst = pair.p[0].iter().map(|p| p.norm()).fold(0.0, f64::max);

    // -p' = c p, p(T) = 1: O(dt) convergence to e^c at t = 0
    let c = 0.9_f64;
    let mut errs = Vec::new();
    for &dt in &[0.01, 0.005] {
        let grid = TimeGrid::new(0.0, 1.0, dt).unwrap();
        let ens = sample_increments(&noise, &grid, 1, SEED);
        let mut data = AbseeData::zero_ops(1);
        data.m_op = Box::new(move |_t| DMatrix::from_element(1, 1, c));
        let pair = solve_absee(
            &data,
            &RunningTerminal::plain(vec![DVector::from_element(1, 1.0)], 1),
            &DelayMeasure::zero(0.0),
            &grid,
            &triple,
            &noise,
            &ens,
            &|_tr, _i| DVector::zeros(1),
            &est,
        )
        .unwrap();
        errs.push((pair.p[0][grid.idx_zero()][0] - c.exp()).abs());
    }
    let ode_ok = errs[1] <= 0.6 * errs[0];

    // single atom at 0.6 with weight 1.5 and zeta = 2: p = 3 before, 0 after
    let term = RunningTerminal {
        xi: vec![DVector::zeros(1)],
        zeta: Box::new(|_tr, _i| DVector::from_element(1, 2.0)),
        fv: FiniteVariationIntegrator::from_atoms(vec![(0.6, 1.5)]),
    };
    let pair = solve_absee(
        &AbseeData::zero_ops(1),
        &term,
        &DelayMeasure::zero(0.0),
        &grid,
        &triple,
        &noise,
        &ens,
        &|_tr, _i| DVector::zeros(1),
        &est,
    )
    .unwrap();
    let mut atom_worst = 0.0_f64;
    for i in grid.idx_zero()..=grid.idx_t() {
        let expect = if grid.time(i) < 0.6 { 3.0 } else { 0.0 };
        atom_worst = atom_worst.max((pair.p[0][i][0] - expect).abs());
    }
    record(
        "05_backward_oracles",
        zero_worst == 0.0 && ode_ok && atom_worst <= 1e-12,
        60.0,
        start,
        format!("zero-data {zero_worst:.1e}, ODE errors {errs:?}, atom residual {atom_worst:.1e}"),
    );
}

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_str(text).unwrap()
}

#[test]
fn a06_gradient_consistency() {
    let start = Instant::now();
    // frozen smooth delayed scenario; the adjoint gradient is O(dt)-consistent
    // with the discrete cost, so the step is fine and the rho rungs sit above
    // the dt bias floor
    let cfg = config(
        r#"{"problem": {"kind": "lq", "preset": "delayed"},
            "grid": {"dt": 0.00625, "t_end": 1.0, "delta": 0.25}}"#,
    );
    let spec = cfg.lq_spec().unwrap();
    let problem = spec.to_problem(CondEstimator::new(EstimatorMode::Linear)).unwrap();
    let grid = spec.grid().unwrap();
    let ens = ensemble_for(&problem, 16, SEED);
    let u = ControlPath::open_loop_from_fn(&grid, 1, |t| DVector::from_element(1, 0.3 * t));
    let v: Vec<DVector<f64>> =
        (0..grid.n_nodes()).map(|i| DVector::from_element(1, 1.0 + grid.time(i))).collect();
    let rep = gateaux_check(&problem, &u, &v, &[0.5, 0.1, 0.02], &ens).unwrap();
    record(
        "06_gradient_consistency",
        rep.decreasing && rep.smallest_rel_error <= 1e-2,
        120.0,
        start,
        format!(
            "ladder {:?}, predicted {:.6e}, smallest-rho rel error {:.3e}",
            rep.ladder, rep.predicted, rep.smallest_rel_error
        ),
    );
}

/// Fixed-point, projected-gradient, and Riccati controls for one no-delay
/// preset; returns (pairwise-worst relative L2 distance, worst relative J
/// spread).
fn triple_agreement(cfg_text: &str) -> (f64, f64) {
    let cfg = config(cfg_text);
    let spec = cfg.lq_spec().unwrap();
    let grid = spec.grid().unwrap();
    let est = CondEstimator::new(EstimatorMode::Mean);
    let (u_fp, hist) = lq_fixed_point(&spec, 1e-9, 300, 0.5, 1, SEED, est).unwrap();
    assert!(hist.converged, "fixed point failed to converge");
    let problem = spec.to_problem(est).unwrap();
    let ens = ensemble_for(&problem, 1, SEED);
    let (u_grad, _) = optimize(
        &problem,
        ControlPath::zero(&grid, spec.m_ctrl),
        1e-7,
        300,
        &ens,
        SEED ^ 0x09f1,
    )
    .unwrap();
    let ric = riccati_oracle(&spec, &grid).unwrap();
    let us = [&u_fp, &u_grad, &ric.u_star];
    let js: Vec<f64> = us.iter().map(|u| eval_cost(&problem, u, &ens).unwrap().2).collect();
    let scale = control_l2_norm(&grid, &u_fp).max(1e-12);
    let mut worst_l2 = 0.0_f64;
    let mut worst_j = 0.0_f64;
    for i in 0..3 {
        for j in (i + 1)..3 {
            worst_l2 = worst_l2.max(control_l2_distance(&grid, us[i], us[j]) / scale);
            worst_j = worst_j.max((js[i] - js[j]).abs() / js[j].abs().max(1e-30));
        }
    }
    (worst_l2, worst_j)
}

#[test]
fn a07_lq_triple_agreement() {
    let start = Instant::now();
    let (l2_s, j_s) = triple_agreement(
        r#"{"problem": {"kind": "lq", "preset": "scalar"},
            "grid": {"dt": 0.01, "t_end": 1.0}}"#,
    );
    let (l2_2, j_2) = triple_agreement(
        r#"{"problem": {"kind": "lq", "preset": "two-dim"},
            "grid": {"dt": 0.01, "t_end": 1.0}}"#,
    );
    record(
        "07_lq_triple_agreement",
        l2_s <= 0.02 && j_s <= 0.01 && l2_2 <= 0.02 && j_2 <= 0.01,
        120.0,
        start,
        format!(
            "scalar: L2 {l2_s:.3e}, J spread {j_s:.3e}; two-dim: L2 {l2_2:.3e}, J spread {j_2:.3e}"
        ),
    );
}

#[test]
fn a08_delayed_lq_certification() {
    let start = Instant::now();
    let cfg = config(
        r#"{"problem": {"kind": "lq", "preset": "delayed"},
            "grid": {"dt": 0.0125, "t_end": 1.0, "delta": 0.25}}"#,
    );
    let spec = cfg.lq_spec().unwrap();
    let grid = spec.grid().unwrap();
    let est = CondEstimator::new(EstimatorMode::Mean);
    let (u_bar, hist) = lq_fixed_point(&spec, 1e-10, 500, 0.5, 1, SEED, est).unwrap();
    assert!(hist.converged, "fixed point failed to converge");
    let res = lq_gradient_residual(&spec, &u_bar, 1, SEED, est).unwrap();
    let scale = 1.0 + control_l2_norm(&grid, &u_bar);
    let problem = spec.to_problem(est).unwrap();
    let ens = ensemble_for(&problem, 1, SEED);
    let suff = sufficiency_check(&problem, &u_bar, 100, &ens, SEED ^ 0x51ff).unwrap();
    record(
        "08_delayed_lq_certification",
        res <= 1e-3 * scale && suff.pass,
        300.0,
        start,
        format!(
            "gradient residual {res:.3e} vs scale {scale:.3}, sufficiency: {} candidates, {} violations, worst margin {:.3e}",
            suff.candidates_checked, suff.violations, suff.worst_margin
        ),
    );
}

#[test]
fn a09_spde_demo() {
    let start = Instant::now();
    let spec = SPDESpec::default_scenario(8);
    let coercive = build_operators(&spec).is_ok();
    let mut bad = SPDESpec::default_scenario(8);
    bad.beta = bad.a.iter().map(|&a| (2.0 * a).sqrt()).collect();
    let counterexample_rejected = build_operators(&bad).is_err();
    let run = run_demo(&spec, 12, 25, 21).unwrap();
    let fine = run_demo(&SPDESpec::default_scenario(16), 12, 25, 21).unwrap();
    let mesh_rel =
        (run.report.j_opt - fine.report.j_opt).abs() / run.report.j_opt.abs().max(1e-30);
    record(
        "09_spde_demo",
        coercive && counterexample_rejected && run.report.improvement >= 0.05 && mesh_rel <= 0.05,
        600.0,
        start,
        format!(
            "coercivity {coercive}, counterexample rejected {counterexample_rejected}, improvement {:.3}, mesh-doubling drift {mesh_rel:.3e}",
            run.report.improvement
        ),
    );
}

#[test]
fn a10_determinism() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_delay-smp");
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/verify.json");
    let mut reports = Vec::new();
    let mut statuses = Vec::new();
    for workers in ["1", "1", "4"] {
        let dir = tempfile::tempdir().unwrap();
        let status = std::process::Command::new(bin)
            .args(["--config", cfg, "--workers", workers, "--out"])
            .arg(dir.path())
            .arg("--quiet")
            .arg("verify")
            .status()
            .unwrap();
        statuses.push(status.code());
        reports.push(std::fs::read(dir.path().join("verify.json")).unwrap());
    }
    let identical = reports[1] == reports[0] && reports[2] == reports[0];
    let exits_ok = statuses.iter().all(|c| *c == Some(0));
    record(
        "10_determinism",
        identical && exits_ok,
        120.0,
        start,
        format!(
            "exit codes {statuses:?}, byte-identical across repeat run and worker counts: {identical}"
        ),
    );
}
