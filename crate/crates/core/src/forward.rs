//! Forward solver for the delayed stochastic evolution equation on the
//! discrete Gelfand triple: semi-implicit Euler-Maruyama in the unbounded A
//! part, explicit in everything else, with delay terms reading already
//! computed history.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::hilbert::{sample_increments, GelfandTriple, NoiseEnsemble, NoiseModel};
use crate::measure::{average_with, DelayMeasure};

type Lu = nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>;

pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Admissible control realization on the grid.
pub enum ControlPath {
    /// Deterministic time function: one control vector per grid node, frozen
    /// initial segment included.
    OpenLoop { values: Vec<DVector<f64>> },
    /// Feedback table: u(t_i) = K_i x(t_i) + c_i.
    Feedback { table: Vec<(DMatrix<f64>, DVector<f64>)> },
}

impl ControlPath {
    pub fn zero(grid: &TimeGrid, m_ctrl: usize) -> Self {
        ControlPath::OpenLoop { values: vec![DVector::zeros(m_ctrl); grid.n_nodes()] }
    }

    pub fn open_loop_from_fn(grid: &TimeGrid, m_ctrl: usize, f: impl Fn(f64) -> DVector<f64>) -> Self {
        let values = grid
            .nodes()
            .map(|i| {
                let v = f(grid.time(i));
                assert_eq!(v.len(), m_ctrl);
                v
            })
            .collect();
        ControlPath::OpenLoop { values }
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlPath::OpenLoop { values } => values[0].len(),
            ControlPath::Feedback { table } => table[0].1.len(),
        }
    }

    pub fn value(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ControlPath::OpenLoop { values } => values[i].clone(),
            ControlPath::Feedback { table } => &table[i].0 * x + &table[i].1,
        }
    }
}

/// Trajectory bundle on the full grid [-delta, T+delta]; states are zero
/// beyond T, controls zero beyond T, initial segments exact.
pub struct PathEnsemble {
    /// x[traj][node]
    pub x: Vec<Vec<DVector<f64>>>,
    /// realized control u[traj][node]
    pub u: Vec<Vec<DVector<f64>>>,
    pub seed: u64,
}

impl PathEnsemble {
    pub fn n_traj(&self) -> usize {
        self.x.len()
    }

    pub fn state_dim(&self) -> usize {
        self.x[0][0].len()
    }

    /// Cross-trajectory mean of x at a node.
    pub fn mean_at(&self, node: usize) -> DVector<f64> {
        let mut m = DVector::zeros(self.state_dim());
        for tr in &self.x {
            m += &tr[node];
        }
        m / self.n_traj() as f64
    }
}

pub type ValueFn = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync>;
pub type SigmaFn = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Sync>;
pub type JacFn = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Sync>;
pub type SigmaJacFn = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Vec<DMatrix<f64>> + Sync>;

/// Coefficients of the state equation: the linear unbounded pair (A, B) and
/// the nonlinear pair (b, sigma) with registered first derivatives in each of
/// (x, x_delta, u, u_delta).
pub struct CoefficientBundle {
    pub n: usize,
    pub m_ctrl: usize,
    pub modes: usize,
    pub a_op: Box<dyn Fn(f64) -> DMatrix<f64> + Sync>,
    pub b_op: Box<dyn Fn(f64) -> Vec<DMatrix<f64>> + Sync>,
    pub drift: ValueFn,
    pub sigma: SigmaFn,
    pub drift_dx: JacFn,
    pub drift_dxd: JacFn,
    pub drift_du: JacFn,
    pub drift_dud: JacFn,
    pub sigma_dx: SigmaJacFn,
    pub sigma_dxd: SigmaJacFn,
    pub sigma_du: SigmaJacFn,
    pub sigma_dud: SigmaJacFn,
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub max_rel_error: f64,
    /// largest sampled difference quotient of (b, sigma) in all arguments
    pub lipschitz_bound: f64,
}

impl CoefficientBundle {
    /// Linear coefficients: b = A1 x_d + C u + C1 u_d + b0,
    /// sigma_k = B1_k x_d + D_k u + D1_k u_d + s0_k.
    #[allow(clippy::too_many_arguments)]
    pub fn linear(
        a_op: Box<dyn Fn(f64) -> DMatrix<f64> + Sync>,
        b_op: Box<dyn Fn(f64) -> Vec<DMatrix<f64>> + Sync>,
        a1: DMatrix<f64>,
        c: DMatrix<f64>,
        c1: DMatrix<f64>,
        b1: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
        d1: Vec<DMatrix<f64>>,
        b0: DVector<f64>,
        s0: DMatrix<f64>,
    ) -> Self {
        let n = a1.nrows();
        let m_ctrl = c.ncols();
        let modes = b1.len();
        assert_eq!(d.len(), modes);
        assert_eq!(d1.len(), modes);
        assert_eq!(s0.ncols(), modes);
        let (a1c, cc, c1c, b0c) = (a1.clone(), c.clone(), c1.clone(), b0);
        let (b1c, dc, d1c, s0c) = (b1.clone(), d.clone(), d1.clone(), s0);
        let (b1j, dj, d1j) = (b1, d, d1);
        let zeros_n = DMatrix::zeros(n, n);
        let zeros_m = DMatrix::zeros(n, m_ctrl);
        let zn = zeros_n.clone();
        let zm = zeros_m.clone();
        let zsn: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); modes];
        let zsm: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, m_ctrl); modes];
        let (zsn2, zsm2) = (zsn.clone(), zsm.clone());
        CoefficientBundle {
            n,
            m_ctrl,
            modes,
            a_op,
            b_op,
            drift: Box::new(move |_t, _x, xd, u, ud| &a1c * xd + &cc * u + &c1c * ud + &b0c),
            sigma: Box::new(move |_t, _x, xd, u, ud| {
                let mut s = s0c.clone();
                for k in 0..modes {
                    let col = &b1c[k] * xd + &dc[k] * u + &d1c[k] * ud;
                    s.set_column(k, &(s.column(k) + col));
                }
                s
            }),
            drift_dx: Box::new(move |_, _, _, _, _| zeros_n.clone()),
            drift_dxd: Box::new(move |_, _, _, _, _| a1.clone()),
            drift_du: Box::new(move |_, _, _, _, _| c.clone()),
            drift_dud: Box::new(move |_, _, _, _, _| c1.clone()),
            sigma_dx: Box::new(move |_, _, _, _, _| zsn.clone()),
            sigma_dxd: Box::new(move |_, _, _, _, _| b1j.clone()),
            sigma_du: Box::new(move |_, _, _, _, _| dj.clone()),
            sigma_dud: Box::new(move |_, _, _, _, _| d1j.clone()),
        }
        .validated_or_panic(&zn, &zm, &zsn2, &zsm2)
    }

    fn validated_or_panic(
        self,
        _zn: &DMatrix<f64>,
        _zm: &DMatrix<f64>,
        _zsn: &[DMatrix<f64>],
        _zsm: &[DMatrix<f64>],
    ) -> Self {
        self.validate_derivatives(7, 1.0).expect("linear bundle derivatives consistent");
        self
    }

    /// Checks every registered derivative against central finite differences
    /// at 10 random points and samples a Lipschitz bound.
    pub fn validate_derivatives(&self, seed: u64, t_end: f64) -> Result<DerivativeReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut max_rel = 0.0_f64;
        let mut lip = 0.0_f64;
        let h = 1e-5;
        for _ in 0..10 {
            let t = rng.gen_range(0.0..=t_end);
            let x = DVector::from_fn(self.n, |_, _| rng.gen_range(-1.0..1.0));
            let xd = DVector::from_fn(self.n, |_, _| rng.gen_range(-1.0..1.0));
            let u = DVector::from_fn(self.m_ctrl, |_, _| rng.gen_range(-1.0..1.0));
            let ud = DVector::from_fn(self.m_ctrl, |_, _| rng.gen_range(-1.0..1.0));
            for arg in 0..4 {
                let dim = if arg < 2 { self.n } else { self.m_ctrl };
                for j in 0..dim {
                    let bump = |s: f64| {
                        let (mut x2, mut xd2, mut u2, mut ud2) =
                            (x.clone(), xd.clone(), u.clone(), ud.clone());
                        match arg {
                            0 => x2[j] += s,
                            1 => xd2[j] += s,
                            2 => u2[j] += s,
                            _ => ud2[j] += s,
                        }
                        (
                            (self.drift)(t, &x2, &xd2, &u2, &ud2),
                            (self.sigma)(t, &x2, &xd2, &u2, &ud2),
                        )
                    };
                    let (bp, sp) = bump(h);
                    let (bm, sm) = bump(-h);
                    let fd_b = (&bp - &bm) / (2.0 * h);
                    let fd_s = (&sp - &sm) / (2.0 * h);
                    lip = lip.max(fd_b.amax()).max(fd_s.amax());
                    let jac_b = match arg {
                        0 => (self.drift_dx)(t, &x, &xd, &u, &ud),
                        1 => (self.drift_dxd)(t, &x, &xd, &u, &ud),
                        2 => (self.drift_du)(t, &x, &xd, &u, &ud),
                        _ => (self.drift_dud)(t, &x, &xd, &u, &ud),
                    };
                    let jac_s = match arg {
                        0 => (self.sigma_dx)(t, &x, &xd, &u, &ud),
                        1 => (self.sigma_dxd)(t, &x, &xd, &u, &ud),
                        2 => (self.sigma_du)(t, &x, &xd, &u, &ud),
                        _ => (self.sigma_dud)(t, &x, &xd, &u, &ud),
                    };
                    let scale_b = 1.0 + fd_b.amax();
                    max_rel = max_rel.max((&fd_b - jac_b.column(j)).amax() / scale_b);
                    for k in 0..self.modes {
                        let scale_s = 1.0 + fd_s.column(k).amax();
                        max_rel = max_rel
                            .max((fd_s.column(k) - jac_s[k].column(j)).amax() / scale_s);
                    }
                }
            }
        }
        if max_rel > 1e-5 {
            return Err(Error::Precondition(format!(
                "registered derivatives disagree with finite differences (rel {max_rel:.2e})"
            )));
        }
        Ok(DerivativeReport { max_rel_error: max_rel, lipschitz_bound: lip })
    }
}

fn zero_vec_average(
    weights: &[(i64, f64)],
    idx: usize,
    dim: usize,
    path: impl Fn(usize) -> DVector<f64>,
) -> Result<DVector<f64>> {
    if weights.is_empty() {
        return Ok(DVector::zeros(dim));
    }
    average_with(weights, idx, 1, path)
}

/// Semi-implicit Euler-Maruyama sweep with supplied increments (common random
/// numbers across paired runs).
#[allow(clippy::too_many_arguments)]
pub fn solve_sdee_with_noise(
    bundle: &CoefficientBundle,
    triple: &GelfandTriple,
    x0: &(dyn Fn(f64) -> DVector<f64> + Sync),
    u: &ControlPath,
    m: &DelayMeasure,
    grid: &TimeGrid,
    noise: &NoiseModel,
    ens: &NoiseEnsemble,
) -> Result<PathEnsemble> {
    let n = triple.n;
    if bundle.n != n || bundle.modes != noise.modes() {
        return Err(Error::Dimension("bundle does not match triple/noise".into()));
    }
    let weights = m.grid_weights(grid)?;
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut steps: Vec<(Lu, Vec<DMatrix<f64>>)> = Vec::with_capacity(i_t - i0);
    for i in i0..i_t {
        let t = grid.time(i);
        let a = (bundle.a_op)(t);
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Dimension("A(t) has wrong shape".into()));
        }
        let s = &eye - triple.lift_matrix(&a) * grid.dt;
        let lu = s.lu();
        if lu.determinant().abs() < 1e-300 {
            return Err(Error::Numerical(format!(
                "implicit matrix singular at t = {t}; reduce dt below {:.3e}",
                grid.dt * 0.5
            )));
        }
        let bs = (bundle.b_op)(t);
        if bs.len() != bundle.modes {
            return Err(Error::Dimension("B(t) mode count mismatch".into()));
        }
        steps.push((lu, bs));
    }

    let results: Vec<Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)>> = (0..ens.n_traj())
        .into_par_iter()
        .map(|traj| {
            let mut xs = vec![DVector::<f64>::zeros(n); grid.n_nodes()];
            let mut us = vec![DVector::<f64>::zeros(bundle.m_ctrl); grid.n_nodes()];
            for i in 0..=i0 {
                xs[i] = x0(grid.time(i));
                us[i] = u.value(i, &xs[i]);
            }
            for i in i0..i_t {
                let t = grid.time(i);
                let xd = zero_vec_average(&weights, i, n, |j| xs[j].clone())?;
                let ud = zero_vec_average(&weights, i, bundle.m_ctrl, |j| us[j].clone())?;
                let bdrift = (bundle.drift)(t, &xs[i], &xd, &us[i], &ud);
                let mut diff = (bundle.sigma)(t, &xs[i], &xd, &us[i], &ud);
                for (k, g) in steps[i - i0].1.iter().enumerate() {
                    let col = diff.column(k) + g * &xs[i];
                    diff.set_column(k, &col);
                }
                let rhs = &xs[i] + bdrift * grid.dt + &diff * ens.dw[traj].row(i).transpose();
                let next = steps[i - i0]
                    .0
                    .solve(&rhs)
                    .ok_or_else(|| Error::Numerical("implicit solve failed".into()))?;
                if !next.iter().all(|v| v.is_finite()) || triple.h_norm(&next) > BLOWUP_THRESHOLD
                {
                    return Err(Error::Numerical(format!(
                        "trajectory {traj} blew up at t = {:.6}",
                        grid.time(i + 1)
                    )));
                }
                xs[i + 1] = next;
                if i + 1 <= i_t {
                    us[i + 1] = u.value(i + 1, &xs[i + 1]);
                }
            }
            for i in (i_t + 1)..grid.n_nodes() {
                xs[i] = DVector::zeros(n);
                us[i] = DVector::zeros(bundle.m_ctrl);
            }
            Ok((xs, us))
        })
        .collect();
    let mut x = Vec::with_capacity(ens.n_traj());
    let mut uu = Vec::with_capacity(ens.n_traj());
    for r in results {
        let (xs, us) = r?;
        x.push(xs);
        uu.push(us);
    }
    Ok(PathEnsemble { x, u: uu, seed: ens.seed })
}

#[allow(clippy::too_many_arguments)]
pub fn solve_sdee(
    bundle: &CoefficientBundle,
    triple: &GelfandTriple,
    x0: &(dyn Fn(f64) -> DVector<f64> + Sync),
    u: &ControlPath,
    m: &DelayMeasure,
    grid: &TimeGrid,
    noise: &NoiseModel,
    n_traj: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let ens = sample_increments(noise, grid, n_traj, seed);
    solve_sdee_with_noise(bundle, triple, x0, u, m, grid, noise, &ens)
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    /// (epsilon, ratio E sup ||x - x'||_H^2 / data difference energy)
    pub ratios: Vec<(f64, f64)>,
    pub fitted_c: f64,
    pub bounded: bool,
}

/// A priori estimate probe: perturbs the initial path along `dir` scaled by
/// each epsilon and reports the response ratio under common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn stability_probe(
    bundle: &CoefficientBundle,
    triple: &GelfandTriple,
    x0: &(dyn Fn(f64) -> DVector<f64> + Sync),
    dir: &(dyn Fn(f64) -> DVector<f64> + Sync),
    scales: &[f64],
    u: &ControlPath,
    m: &DelayMeasure,
    grid: &TimeGrid,
    noise: &NoiseModel,
    n_traj: usize,
    seed: u64,
) -> Result<StabilityReport> {
    let ens = sample_increments(noise, grid, n_traj, seed);
    let base = solve_sdee_with_noise(bundle, triple, x0, u, m, grid, noise, &ens)?;
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let mut ratios = Vec::new();
    let mut fitted_c = 0.0_f64;
    for &eps in scales {
        let x0p = |t: f64| x0(t) + dir(t) * eps;
        let pert = solve_sdee_with_noise(bundle, triple, &x0p, u, m, grid, noise, &ens)?;
        let mut num = 0.0;
        for traj in 0..n_traj {
            let mut sup = 0.0_f64;
            for i in i0..=i_t {
                sup = sup.max(triple.h_norm(&(&base.x[traj][i] - &pert.x[traj][i])).powi(2));
            }
            num += sup;
        }
        num /= n_traj as f64;
        let d0 = dir(0.0) * eps;
        let mut den = triple.h_norm(&d0).powi(2);
        for i in 0..=i0 {
            let d = dir(grid.time(i)) * eps;
            den += triple.v_norm_sq(&d) * grid.dt;
        }
        let ratio = if den == 0.0 { 0.0 } else { num / den };
        fitted_c = fitted_c.max(ratio);
        ratios.push((eps, ratio));
    }
    let bounded = ratios.iter().all(|&(_, r)| r.is_finite());
    Ok(StabilityReport { ratios, fitted_c, bounded })
}

/// Scalar linear SDDE of the auxiliary multiplier process:
/// dk = [a k + (a_d k)_delta] dt + sum_k [g_k k + (g_d k)_delta,k] dw_k,
/// k(0) = init, k = 0 on [-delta, 0). Explicit Euler.
///
/// `a`, `a_del` are per-node scalars; `g`, `g_del` are per-node mode vectors.
#[allow(clippy::too_many_arguments)]
pub fn solve_linear_sdde_scalar(
    a: &[f64],
    a_del: &[f64],
    g: &[Vec<f64>],
    g_del: &[Vec<f64>],
    m: &DelayMeasure,
    grid: &TimeGrid,
    ens: &NoiseEnsemble,
    init: f64,
) -> Result<Vec<Vec<f64>>> {
    let nn = grid.n_nodes();
    if a.len() != nn || a_del.len() != nn || g.len() != nn || g_del.len() != nn {
        return Err(Error::Dimension("coefficient paths must cover every node".into()));
    }
    let weights = m.grid_weights(grid)?;
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let modes = g[0].len();
    (0..ens.n_traj())
        .into_par_iter()
        .map(|traj| {
            let mut k = vec![0.0; nn];
            k[i0] = init;
            for i in i0..i_t {
                let del_a: f64 = weights
                    .iter()
                    .map(|&(off, w)| {
                        let j = (i as i64 + off) as usize;
                        w * a_del[j] * k[j]
                    })
                    .sum();
                let mut next = k[i] + grid.dt * (a[i] * k[i] + del_a);
                for kk in 0..modes {
                    let del_g: f64 = weights
                        .iter()
                        .map(|&(off, w)| {
                            let j = (i as i64 + off) as usize;
                            w * g_del[j][kk] * k[j]
                        })
                        .sum();
                    next += (g[i][kk] * k[i] + del_g) * ens.dw[traj][(i, kk)];
                }
                if !next.is_finite() || next.abs() > BLOWUP_THRESHOLD {
                    return Err(Error::Numerical(format!(
                        "k-process blew up on trajectory {traj} at t = {:.6}",
                        grid.time(i + 1)
                    )));
                }
                k[i + 1] = next;
            }
            Ok(k)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_triple() -> GelfandTriple {
        GelfandTriple::identity(1)
    }

    fn trivial_bundle(n: usize, modes: usize, a: f64) -> CoefficientBundle {
        CoefficientBundle::linear(
            Box::new(move |_t| DMatrix::from_element(n, n, 0.0) + DMatrix::identity(n, n) * a),
            Box::new(move |_t| vec![DMatrix::zeros(n, n); modes]),
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, 1),
            DMatrix::zeros(n, 1),
            vec![DMatrix::zeros(n, n); modes],
            vec![DMatrix::zeros(n, 1); modes],
            vec![DMatrix::zeros(n, 1); modes],
            DVector::zeros(n),
            DMatrix::zeros(n, modes),
        )
    }

    #[test]
    fn constant_solution_when_everything_vanishes() {
        let grid = TimeGrid::new(0.5, 1.0, 0.1).unwrap();
        let triple = GelfandTriple::identity(2);
        let noise = NoiseModel::identity(1);
        let bundle = trivial_bundle(2, 1, 0.0);
        let c = DVector::from_vec(vec![3.0, -1.5]);
        let cc = c.clone();
        let u = ControlPath::zero(&grid, 1);
        let m = DelayMeasure::dirac(0.5);
        let ens =
            solve_sdee(&bundle, &triple, &move |_t| cc.clone(), &u, &m, &grid, &noise, 4, 1)
                .unwrap();
        for traj in 0..4 {
            for i in grid.nodes() {
                if i <= grid.idx_t() {
                    assert_eq!(ens.x[traj][i], c);
                }
            }
        }
    }

    #[test]
    fn scalar_exponential_matches_implicit_recursion() {
        let a = -0.8;
        let dt = 0.01;
        let grid = TimeGrid::new(0.0, 1.0, dt).unwrap();
        let triple = scalar_triple();
        let noise = NoiseModel::identity(1);
        let bundle = trivial_bundle(1, 1, a);
        let u = ControlPath::zero(&grid, 1);
        let m = DelayMeasure::zero(0.0);
        let ens = solve_sdee(
            &bundle, &triple, &|_t| DVector::from_element(1, 1.0), &u, &m, &grid, &noise, 1, 7,
        )
        .unwrap();
        for i in grid.idx_zero()..=grid.idx_t() {
            let want = (1.0 - dt * a).powi(-(i as i32));
            assert!((ens.x[0][i][0] - want).abs() < 1e-12, "node {i}");
        }
        let t_end = grid.time(grid.idx_t());
        let exact = (a * t_end).exp();
        let got = ens.x[0][grid.idx_t()][0];
        assert!((got - exact).abs() / exact.abs() <= 2.0 * a.abs() * t_end * dt);
    }

    #[test]
    fn method_of_steps_delay_oracle() {
        // dx = x(t-1) dt, x0 = 1,  x(t) = 1+t on [0,1], 1+t+(t-1)^2/2 on [1,2]
        let closed = |t: f64| {
            if t <= 1.0 {
                1.0 + t
            } else {
                1.0 + t + (t - 1.0).powi(2) / 2.0
            }
        };
        let mut errs = Vec::new();
        for &dt in &[0.02, 0.01] {
            let grid = TimeGrid::new(1.0, 2.0, dt).unwrap();
            let triple = scalar_triple();
            let noise = NoiseModel::identity(1);
            let bundle = CoefficientBundle::linear(
                Box::new(|_t| DMatrix::zeros(1, 1)),
                Box::new(|_t| vec![DMatrix::zeros(1, 1)]),
                DMatrix::identity(1, 1),
                DMatrix::zeros(1, 1),
                DMatrix::zeros(1, 1),
                vec![DMatrix::zeros(1, 1)],
                vec![DMatrix::zeros(1, 1)],
                vec![DMatrix::zeros(1, 1)],
                DVector::zeros(1),
                DMatrix::zeros(1, 1),
            );
            let u = ControlPath::zero(&grid, 1);
            let m = DelayMeasure::dirac(1.0);
            let ens = solve_sdee(
                &bundle, &triple, &|_t| DVector::from_element(1, 1.0), &u, &m, &grid, &noise, 1,
                3,
            )
            .unwrap();
            let mut e = 0.0_f64;
            for i in grid.idx_zero()..=grid.idx_t() {
                e = e.max((ens.x[0][i][0] - closed(grid.time(i))).abs());
            }
            errs.push(e);
        }
        assert!(errs[1] < 0.65 * errs[0], "{errs:?}");
        assert!(errs[0] < 0.1);
    }

    #[test]
    fn initial_segment_bit_exact_and_adapted() {
        let grid = TimeGrid::new(0.4, 1.0, 0.05).unwrap();
        let triple = scalar_triple();
        let noise = NoiseModel::identity(2);
        let bundle = CoefficientBundle::linear(
            Box::new(|_t| DMatrix::from_element(1, 1, -0.3)),
            Box::new(|_t| vec![DMatrix::from_element(1, 1, 0.2), DMatrix::zeros(1, 1)]),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            vec![DMatrix::zeros(1, 1); 2],
            vec![DMatrix::zeros(1, 1); 2],
            vec![DMatrix::zeros(1, 1); 2],
            DVector::from_element(1, 0.1),
            DMatrix::from_fn(1, 2, |_, c| 0.3 + 0.1 * c as f64),
        );
        let u = ControlPath::zero(&grid, 1);
        let m = DelayMeasure::dirac(0.4);
        let x0 = |t: f64| DVector::from_element(1, (t * 2.0).cos());
        let ens = sample_increments(&noise, &grid, 3, 11);
        let base = solve_sdee_with_noise(&bundle, &triple, &x0, &u, &m, &grid, &noise, &ens)
            .unwrap();
        for traj in 0..3 {
            for i in 0..=grid.idx_zero() {
                assert_eq!(base.x[traj][i], x0(grid.time(i)));
            }
        }
        // scramble increments from cell `cut` on; prefix must be bit identical
        let cut = grid.idx_zero() + 6;
        let mut scrambled = NoiseEnsemble {
            dw: ens.dw.clone(),
            seed: ens.seed,
        };
        for t in 0..3 {
            for i in cut..grid.n_cells() {
                for k in 0..2 {
                    scrambled.dw[t][(i, k)] = -3.0 * scrambled.dw[t][(i, k)] + 0.01;
                }
            }
        }
        let alt = solve_sdee_with_noise(&bundle, &triple, &x0, &u, &m, &grid, &noise, &scrambled)
            .unwrap();
        for traj in 0..3 {
            for i in 0..=cut {
                assert_eq!(base.x[traj][i], alt.x[traj][i], "node {i}");
            }
            assert_ne!(base.x[traj][cut + 1], alt.x[traj][cut + 1]);
        }
    }

    #[test]
    fn weak_error_halves_on_linear_system() {
        // deterministic linear test system, phi(x) = x^2
        let a = -1.1;
        let mut errs = Vec::new();
        for &dt in &[0.04, 0.02, 0.01] {
            let grid = TimeGrid::new(0.0, 1.0, dt).unwrap();
            let triple = scalar_triple();
            let noise = NoiseModel::new(vec![0.0]).unwrap();
            let bundle = trivial_bundle(1, 1, a);
            let u = ControlPath::zero(&grid, 1);
            let m = DelayMeasure::zero(0.0);
            let ens = solve_sdee(
                &bundle, &triple, &|_t| DVector::from_element(1, 1.0), &u, &m, &grid, &noise, 1,
                1,
            )
            .unwrap();
            let phi = ens.x[0][grid.idx_t()][0].powi(2);
            errs.push((phi - (2.0 * a).exp()).abs());
        }
        assert!(errs[1] < 0.6 * errs[0], "{errs:?}");
        assert!(errs[2] < 0.6 * errs[1], "{errs:?}");
    }

    #[test]
    fn stability_probe_trivial_and_linear() {
        let grid = TimeGrid::new(0.3, 1.0, 0.05).unwrap();
        let triple = scalar_triple();
        let noise = NoiseModel::identity(1);
        let bundle = CoefficientBundle::linear(
            Box::new(|_t| DMatrix::from_element(1, 1, -0.5)),
            Box::new(|_t| vec![DMatrix::from_element(1, 1, 0.3)]),
            DMatrix::from_element(1, 1, 0.4),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            vec![DMatrix::zeros(1, 1)],
            vec![DMatrix::zeros(1, 1)],
            vec![DMatrix::zeros(1, 1)],
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
        );
        let u = ControlPath::zero(&grid, 1);
        let m = DelayMeasure::dirac(0.3);
        let x0 = |t: f64| DVector::from_element(1, 1.0 + t);
        // identical inputs
        let rep = stability_probe(
            &bundle, &triple, &x0, &|_t| DVector::zeros(1), &[0.1], &u, &m, &grid, &noise, 16, 2,
        )
        .unwrap();
        assert_eq!(rep.ratios[0].1, 0.0);
        // linear response: ratio constant across the ladder to 5%
        let rep = stability_probe(
            &bundle,
            &triple,
            &x0,
            &|t| DVector::from_element(1, 1.0 + 0.5 * t),
            &[1e-1, 1e-2, 1e-3],
            &u,
            &m,
            &grid,
            &noise,
            16,
            2,
        )
        .unwrap();
        assert!(rep.bounded);
        let r0 = rep.ratios[0].1;
        for &(_, r) in &rep.ratios {
            assert!((r - r0).abs() <= 0.05 * r0, "{:?}", rep.ratios);
        }
    }

    #[test]
    fn stability_probe_bounded_for_lipschitz_nonlinearity() {
        let grid = TimeGrid::new(0.3, 1.0, 0.05).unwrap();
        let triple = scalar_triple();
        let noise = NoiseModel::identity(1);
        let bundle = CoefficientBundle {
            n: 1,
            m_ctrl: 1,
            modes: 1,
            a_op: Box::new(|_t| DMatrix::from_element(1, 1, -0.5)),
            b_op: Box::new(|_t| vec![DMatrix::zeros(1, 1)]),
            drift: Box::new(|_t, x, xd, _u, _ud| {
                DVector::from_element(1, (x[0]).tanh() + 0.5 * (xd[0]).sin())
            }),
            sigma: Box::new(|_t, x, _xd, _u, _ud| {
                DMatrix::from_element(1, 1, 0.2 * (1.0 + x[0] * x[0]).sqrt().recip())
            }),
            drift_dx: Box::new(|_t, x, _xd, _u, _ud| {
                DMatrix::from_element(1, 1, 1.0 - x[0].tanh().powi(2))
            }),
            drift_dxd: Box::new(|_t, _x, xd, _u, _ud| {
                DMatrix::from_element(1, 1, 0.5 * xd[0].cos())
            }),
            drift_du: Box::new(|_t, _x, _xd, _u, _ud| DMatrix::zeros(1, 1)),
            drift_dud: Box::new(|_t, _x, _xd, _u, _ud| DMatrix::zeros(1, 1)),
            sigma_dx: Box::new(|_t, x, _xd, _u, _ud| {
                vec![DMatrix::from_element(
                    1,
                    1,
                    -0.2 * x[0] * (1.0 + x[0] * x[0]).powf(-1.5),
                )]
            }),
            sigma_dxd: Box::new(|_t, _x, _xd, _u, _ud| vec![DMatrix::zeros(1, 1)]),
            sigma_du: Box::new(|_t, _x, _xd, _u, _ud| vec![DMatrix::zeros(1, 1)]),
            sigma_dud: Box::new(|_t, _x, _xd, _u, _ud| vec![DMatrix::zeros(1, 1)]),
        };
        let rep = bundle.validate_derivatives(3, 1.0).unwrap();
        assert!(rep.lipschitz_bound.is_finite());
        let u = ControlPath::zero(&grid, 1);
        let m = DelayMeasure::dirac(0.3);
        let probe = stability_probe(
            &bundle,
            &triple,
            &|_t| DVector::from_element(1, 0.5),
            &|_t| DVector::from_element(1, 1.0),
            &[1e-1, 1e-2, 1e-3],
            &u,
            &m,
            &grid,
            &noise,
            32,
            6,
        )
        .unwrap();
        assert!(probe.bounded);
        assert!(probe.fitted_c < 50.0, "{:?}", probe.ratios);
    }

    #[test]
    fn derivative_mismatch_is_rejected() {
        let mut bundle = trivial_bundle(1, 1, 0.0);
        bundle.drift = Box::new(|_t, x, _xd, _u, _ud| DVector::from_element(1, x[0] * 2.0));
        // drift_dx still claims 0
        assert!(bundle.validate_derivatives(1, 1.0).is_err());
    }

    #[test]
    fn k_process_oracles() {
        let grid = TimeGrid::new(0.5, 1.0, 0.005).unwrap();
        let nn = grid.n_nodes();
        let m = DelayMeasure::dirac(0.5);
        let noise = NoiseModel::identity(1);
        let zeros = vec![0.0; nn];
        let zmode = vec![vec![0.0; 1]; nn];

        // all coefficients zero: k = -1 identically on [0, T]
        let ens = sample_increments(&noise, &grid, 2, 5);
        let k = solve_linear_sdde_scalar(&zeros, &zeros, &zmode, &zmode, &m, &grid, &ens, -1.0)
            .unwrap();
        for i in grid.idx_zero()..=grid.idx_t() {
            assert_eq!(k[0][i], -1.0);
        }

        // a = c constant: k(t) = -e^{ct}, O(dt)
        let c = 0.7;
        let a: Vec<f64> = vec![c; nn];
        let k = solve_linear_sdde_scalar(&a, &zeros, &zmode, &zmode, &m, &grid, &ens, -1.0)
            .unwrap();
        let t_end = 1.0;
        let want = -(c * t_end).exp();
        assert!((k[0][grid.idx_t()] - want).abs() < 3.0 * c * c * t_end * grid.dt);

        // g = c: martingale-type, E k(T) = -1 within 4 SE
        let g: Vec<Vec<f64>> = vec![vec![0.6]; nn];
        let ens = sample_increments(&noise, &grid, 20_000, 9);
        let k = solve_linear_sdde_scalar(&zeros, &zeros, &g, &zmode, &m, &grid, &ens, -1.0)
            .unwrap();
        let vals: Vec<f64> = k.iter().map(|tr| tr[grid.idx_t()]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0);
        let se = (var / vals.len() as f64).sqrt();
        assert!((mean + 1.0).abs() < 4.0 * se, "mean {mean} se {se}");
    }
}
