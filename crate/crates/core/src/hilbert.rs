//! Finite-dimensional Gelfand triple (V, H, V*), truncated Q-Brownian noise,
//! Hilbert-Schmidt norms, coercivity probe, and the energy identity check
//! with jump correction.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Coordinate surrogate of V ⊂ H ⊂ V*.
///
/// States are coordinate vectors; the H and V inner products are given by SPD
/// matrices. A functional f ∈ V* is stored by its coefficient vector with
/// pairing `<f, x>_* = f^T x`.
#[derive(Clone)]
pub struct GelfandTriple {
    pub n: usize,
    pub m_h: DMatrix<f64>,
    pub m_v: DMatrix<f64>,
    chol_h: Cholesky<f64, Dyn>,
    chol_v: Cholesky<f64, Dyn>,
    /// c with ||x||_H <= c ||x||_V.
    pub embedding_constant: f64,
}

impl GelfandTriple {
    pub fn new(m_h: DMatrix<f64>, m_v: DMatrix<f64>) -> Result<Self> {
        let n = m_h.nrows();
        if m_h.ncols() != n || m_v.nrows() != n || m_v.ncols() != n {
            return Err(Error::Dimension("M_H, M_V must be square, same size".into()));
        }
        for m in [&m_h, &m_v] {
            if (m - m.transpose()).amax() > 1e-10 * (1.0 + m.amax()) {
                return Err(Error::Precondition("inner-product matrix not symmetric".into()));
            }
        }
        let chol_h = Cholesky::new(m_h.clone())
            .ok_or_else(|| Error::Precondition("M_H is not positive definite".into()))?;
        let chol_v = Cholesky::new(m_v.clone())
            .ok_or_else(|| Error::Precondition("M_V is not positive definite".into()))?;
        // largest generalized eigenvalue of (M_H, M_V): eig of Lv^{-1} M_H Lv^{-T}
        let lv = chol_v.l();
        let mut w = m_h.clone();
        lv.solve_lower_triangular_mut(&mut w);
        let mut wt = w.transpose();
        lv.solve_lower_triangular_mut(&mut wt);
        let sym = (&wt + wt.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        Ok(GelfandTriple {
            n,
            m_h,
            m_v,
            chol_h,
            chol_v,
            embedding_constant: lam_max.sqrt(),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DMatrix::identity(n, n)).expect("identity SPD")
    }

    pub fn h_inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (x.transpose() * &self.m_h * y)[(0, 0)]
    }

    pub fn h_norm(&self, x: &DVector<f64>) -> f64 {
        self.h_inner(x, x).max(0.0).sqrt()
    }

    pub fn v_norm_sq(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.m_v * x)[(0, 0)]
    }

    /// Dual norm of a functional: sup f^T y / ||y||_V = sqrt(f^T M_V^{-1} f).
    pub fn dual_norm(&self, f: &DVector<f64>) -> f64 {
        f.dot(&self.chol_v.solve(f)).max(0.0).sqrt()
    }

    /// Lift a V* functional to H-coordinates: R f = M_H^{-1} f, so that
    /// `<R f, x>_H = f^T x` for all x.
    pub fn lift(&self, f: &DVector<f64>) -> DVector<f64> {
        self.chol_h.solve(f)
    }

    /// Column-wise lift of a V*-valued matrix: M_H^{-1} F.
    pub fn lift_matrix(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol_h.solve(f)
    }

    /// Functional representation of an H-vector: `<h, .>_H = (M_H h)^T .`.
    pub fn functional(&self, h: &DVector<f64>) -> DVector<f64> {
        &self.m_h * h
    }

    /// Random point on the V-unit sphere via M_V-Cholesky whitening.
    pub fn sample_v_sphere(&self, rng: &mut impl Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = &z / z.norm();
        // x = Lv^{-T} z has x^T M_V x = z^T z = 1
        let mut x = z.clone_owned();
        self.chol_v
            .l()
            .transpose()
            .solve_upper_triangular_mut(&mut x);
        x
    }
}

/// Truncated cylindrical Q-Brownian motion: N_modes one-dimensional Brownian
/// motions with covariance eigenvalues lambda_k. Identity eigenvalues give the
/// cylindrical case, summable ones the trace-class case.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub lambdas: Vec<f64>,
}

impl NoiseModel {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.iter().any(|&l| l < 0.0) {
            return Err(Error::Precondition("noise eigenvalues must be >= 0".into()));
        }
        Ok(NoiseModel { lambdas })
    }

    pub fn identity(modes: usize) -> Self {
        NoiseModel { lambdas: vec![1.0; modes] }
    }

    pub fn geometric(modes: usize, r: f64) -> Result<Self> {
        Self::new((1..=modes).map(|k| r.powi(k as i32)).collect())
    }

    pub fn modes(&self) -> usize {
        self.lambdas.len()
    }
}

/// Per-trajectory Brownian increments over every grid cell.
///
/// `dw[traj]` is an (n_cells x modes) matrix with entry
/// `sqrt(lambda_k dt) * xi`. Identical (seed, trajectory index) pairs give
/// bit-identical increments regardless of worker count.
pub struct NoiseEnsemble {
    pub dw: Vec<DMatrix<f64>>,
    pub seed: u64,
}

impl NoiseEnsemble {
    pub fn n_traj(&self) -> usize {
        self.dw.len()
    }
}

fn traj_rng(seed: u64, traj: usize) -> ChaCha8Rng {
    // splitmix-style mix so nearby trajectory indices decorrelate
    let mut z = seed ^ (traj as u64).wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

pub fn sample_increments(
    noise: &NoiseModel,
    grid: &TimeGrid,
    n_traj: usize,
    seed: u64,
) -> NoiseEnsemble {
    let sqrt_scale: Vec<f64> = noise
        .lambdas
        .iter()
        .map(|&l| (l * grid.dt).sqrt())
        .collect();
    let dw: Vec<DMatrix<f64>> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut rng = traj_rng(seed, traj);
            DMatrix::from_fn(grid.n_cells(), noise.modes(), |_, k| {
                let xi: f64 = rng.sample(StandardNormal);
                sqrt_scale[k] * xi
            })
        })
        .collect();
    NoiseEnsemble { dw, seed }
}

/// Hilbert-Schmidt-valued operator in coordinates: column k is Phi e_k.
pub type HsOperator = DMatrix<f64>;

/// ||Phi||_{L_2^0}^2 = sum_k lambda_k ||Phi e_k||_H^2.
pub fn hs_norm_sq(phi: &HsOperator, noise: &NoiseModel, triple: &GelfandTriple) -> Result<f64> {
    if phi.ncols() != noise.modes() || phi.nrows() != triple.n {
        return Err(Error::Dimension(format!(
            "HS operator is {}x{}, expected {}x{}",
            phi.nrows(),
            phi.ncols(),
            triple.n,
            noise.modes()
        )));
    }
    let mut s = 0.0;
    for (k, &lam) in noise.lambdas.iter().enumerate() {
        let col = phi.column(k).clone_owned();
        s += lam * triple.h_inner(&col, &col);
    }
    Ok(s)
}

pub fn hs_norm(phi: &HsOperator, noise: &NoiseModel, triple: &GelfandTriple) -> Result<f64> {
    Ok(hs_norm_sq(phi, noise, triple)?.sqrt())
}

/// <Phi, Psi>_{L_2^0} = sum_k lambda_k <Phi e_k, Psi e_k>_H.
pub fn hs_inner(
    phi: &HsOperator,
    psi: &HsOperator,
    noise: &NoiseModel,
    triple: &GelfandTriple,
) -> f64 {
    let mut s = 0.0;
    for (k, &lam) in noise.lambdas.iter().enumerate() {
        s += lam * triple.h_inner(&phi.column(k).clone_owned(), &psi.column(k).clone_owned());
    }
    s
}

/// Time-dependent operator pair (A, B): A(t) maps V-coordinates to V*
/// functional coefficients; B(t) is one n x n matrix per noise mode.
pub type OpA<'a> = dyn Fn(f64) -> DMatrix<f64> + Sync + 'a;
pub type OpB<'a> = dyn Fn(f64) -> Vec<DMatrix<f64>> + Sync + 'a;

#[derive(Debug, Clone, Serialize)]
pub struct CoercivityReport {
    pub alpha: f64,
    pub lambda: f64,
    /// max over samples of 2<Ax,x> + ||Bx||^2 + alpha ||x||_V^2 - lambda ||x||_H^2
    pub max_violation: f64,
    pub pass: bool,
    /// fitted bound in ||A(t)x||_* <= K1 ||x||_V
    pub fitted_k1: f64,
    /// fitted bound in ||B(t)x||_{L20} <= C1 ||x||_V
    pub fitted_c1: f64,
}

/// Samples the coercivity inequality (A2) and the boundedness constants of
/// (A3) on random (t, x) with x on the V-unit sphere.
pub fn check_coercivity(
    a_op: &OpA,
    b_op: &OpB,
    triple: &GelfandTriple,
    noise: &NoiseModel,
    alpha: f64,
    lambda: f64,
    t_end: f64,
    n_samples: usize,
    seed: u64,
) -> Result<CoercivityReport> {
    if alpha <= 0.0 {
        return Err(Error::Precondition("alpha must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_violation = f64::NEG_INFINITY;
    let mut k1 = 0.0_f64;
    let mut c1 = 0.0_f64;
    for _ in 0..n_samples {
        let t = rng.gen_range(0.0..=t_end);
        let x = triple.sample_v_sphere(&mut rng);
        let ax = a_op(t) * &x;
        let bs = b_op(t);
        if bs.len() != noise.modes() {
            return Err(Error::Dimension("B(t) must give one matrix per mode".into()));
        }
        let mut bx = DMatrix::zeros(triple.n, noise.modes());
        for (k, g) in bs.iter().enumerate() {
            bx.set_column(k, &(g * &x));
        }
        let quad = 2.0 * ax.dot(&x) + hs_norm_sq(&bx, noise, triple)?;
        let v2 = triple.v_norm_sq(&x); // = 1 on the sphere, kept for robustness
        let h2 = triple.h_norm(&x).powi(2);
        let viol = quad + alpha * v2 - lambda * h2;
        max_violation = max_violation.max(viol);
        k1 = k1.max(triple.dual_norm(&ax) / v2.sqrt());
        c1 = c1.max(hs_norm(&bx, noise, triple)? / v2.sqrt());
    }
    let scale = 1.0 + k1 * k1 + c1 * c1;
    Ok(CoercivityReport {
        alpha,
        lambda,
        max_violation,
        pass: max_violation <= 1e-10 * scale,
        fitted_k1: k1,
        fitted_c1: c1,
    })
}

/// Real-valued cadlag finite-variation integrator F on [0, T]: atoms plus an
/// optional density rate sampled on grid nodes.
#[derive(Debug, Clone)]
pub struct FiniteVariationIntegrator {
    /// (jump time, jump size dF)
    pub atoms: Vec<(f64, f64)>,
    /// dF/dt sampled at grid nodes (full grid length), or None.
    pub density_rate: Option<Vec<f64>>,
}

impl FiniteVariationIntegrator {
    pub fn zero() -> Self {
        FiniteVariationIntegrator { atoms: vec![], density_rate: None }
    }

    pub fn from_atoms(atoms: Vec<(f64, f64)>) -> Self {
        FiniteVariationIntegrator { atoms, density_rate: None }
    }

    pub fn total_variation(&self, grid: &TimeGrid) -> f64 {
        let a: f64 = self.atoms.iter().map(|&(_, df)| df.abs()).sum();
        let d: f64 = self
            .density_rate
            .as_ref()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>() * grid.dt)
            .unwrap_or(0.0);
        a + d
    }

    /// Grid-cell increments: atom at t_j lands in the half-open cell
    /// (t_i, t_{i+1}] containing it; density uses the right-endpoint rate.
    /// Returns dF per cell plus a flag marking cells with atoms.
    pub fn cell_increments(&self, grid: &TimeGrid) -> Result<Vec<(f64, f64)>> {
        // (total dF over cell, atomic part of it)
        let mut inc = vec![(0.0, 0.0); grid.n_cells()];
        for &(t, df) in &self.atoms {
            let idx = grid.index_of(t)?;
            if idx == 0 {
                return Err(Error::Alignment(format!(
                    "F atom at {t} is at the grid start; no cell (t_i, t_{{i+1}}] contains it"
                )));
            }
            inc[idx - 1].0 += df;
            inc[idx - 1].1 += df;
        }
        if let Some(rate) = &self.density_rate {
            if rate.len() != grid.n_nodes() {
                return Err(Error::Dimension(
                    "density rate must be sampled on every grid node".into(),
                ));
            }
            for i in 0..grid.n_cells() {
                inc[i].0 += rate[i + 1] * grid.dt;
            }
        }
        Ok(inc)
    }
}

/// Outcome of the energy identity probe at one probe time.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyProbe {
    pub t: f64,
    /// Monte Carlo mean of LHS - RHS.
    pub residual_mean: f64,
    pub residual_se: f64,
    /// Mean of the jump-correction term; residual when it is omitted.
    pub jump_correction: f64,
    pub within_4se: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub probes: Vec<EnergyProbe>,
    pub deterministic: bool,
    /// Max |residual| over probes on the deterministic branch.
    pub max_abs_residual: f64,
    pub pass: bool,
}

/// Simulates h(t) = v(0) + int v* ds + int zeta dF + int q dw on the grid and
/// checks the squared-norm identity with jump correction:
///
/// ||h(t)||^2 = ||v(0)||^2 + 2 int <v*, v>_* ds + 2 int <h, zeta> dF
///            + 2 int <h, dM> + <M>(t) - int ||zeta||^2 dF dF.
///
/// With q = 0 and a step drift the check is pathwise exact (trapezoid is exact
/// for the linear in-cell motion, and the jump algebra is exact).
#[allow(clippy::too_many_arguments)]
pub fn ito_energy_check(
    vstar: &(dyn Fn(usize) -> DVector<f64> + Sync),
    zeta: &(dyn Fn(usize) -> DVector<f64> + Sync),
    fv: &FiniteVariationIntegrator,
    q: &(dyn Fn(usize) -> HsOperator + Sync),
    x0: &DVector<f64>,
    triple: &GelfandTriple,
    noise: &NoiseModel,
    grid: &TimeGrid,
    n_traj: usize,
    seed: u64,
    probe_times: &[f64],
) -> Result<EnergyReport> {
    let inc = fv.cell_increments(grid)?;
    let ens = sample_increments(noise, grid, n_traj, seed);
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let probes_idx: Vec<usize> = probe_times
        .iter()
        .map(|&t| grid.index_of(t))
        .collect::<Result<_>>()?;
    let deterministic = (i0..i_t).all(|i| q(i).amax() == 0.0);

    // per trajectory, per probe: (residual, jump correction)
    let per_traj: Vec<Vec<(f64, f64)>> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut h = x0.clone();
            let mut drift_term = 0.0; // 2 int <v*, v> ds, trapezoid within cells
            let mut jump_term = 0.0; // 2 int <h, zeta> dF
            let mut mart_term = 0.0; // 2 int <h, dM>
            let mut bracket = 0.0; // <M>(t)
            let mut corr = 0.0; // int ||zeta||^2 dF dF over atoms
            let mut out = vec![(0.0, 0.0); probes_idx.len()];
            let record =
                |h: &DVector<f64>, sums: (f64, f64, f64, f64, f64), out: &mut Vec<(f64, f64)>, i: usize| {
                    for (p, &pi) in probes_idx.iter().enumerate() {
                        if pi == i {
                            let (dr, ju, ma, br, co) = sums;
                            let lhs = triple.h_norm(h).powi(2);
                            let rhs = triple.h_norm(x0).powi(2) + dr + ju + ma + br - co;
                            out[p] = (lhs - rhs, co);
                        }
                    }
                };
            record(&h, (0.0, 0.0, 0.0, 0.0, 0.0), &mut out, i0);
            for i in i0..i_t {
                let vs = vstar(i);
                let drift = triple.lift(&vs) * grid.dt;
                let qi = q(i);
                let dm = &qi * ens.dw[traj].row(i).transpose();
                let h_mid_end = &h + &drift; // pre-jump, pre-noise endpoint of the linear motion
                drift_term += 2.0 * 0.5 * (vs.dot(&h) + vs.dot(&h_mid_end)) * grid.dt;
                // Ito integrand and bracket use the left node value
                mart_term += 2.0 * triple.h_inner(&h, &dm);
                bracket += hs_norm_sq(&qi, noise, triple).unwrap() * grid.dt;
                let mut h_next = h_mid_end + dm;
                let (df, df_atomic) = inc[i];
                if df != 0.0 {
                    let z = zeta(i + 1);
                    h_next += &z * df;
                    // cadlag convention: integrand is the post-jump value h(t_{i+1})
                    jump_term += 2.0 * triple.h_inner(&h_next, &z) * df;
                    corr += triple.h_norm(&z).powi(2) * df_atomic * df;
                }
                h = h_next;
                record(&h, (drift_term, jump_term, mart_term, bracket, corr), &mut out, i + 1);
            }
            out
        })
        .collect();

    let scale = 1.0 + triple.h_norm(x0).powi(2);
    let mut probes = Vec::new();
    let mut max_abs = 0.0_f64;
    let mut pass = true;
    for (p, &t) in probe_times.iter().enumerate() {
        let vals: Vec<f64> = per_traj.iter().map(|tr| tr[p].0).collect();
        let corr_mean = per_traj.iter().map(|tr| tr[p].1).sum::<f64>() / n_traj as f64;
        let mean = vals.iter().sum::<f64>() / n_traj as f64;
        let var = if n_traj > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_traj as f64 - 1.0)
        } else {
            0.0
        };
        let se = (var / n_traj as f64).sqrt();
        let within = if deterministic {
            vals.iter().all(|v| v.abs() <= 1e-10 * scale)
        } else {
            mean.abs() <= 4.0 * se + 1e-10 * scale
        };
        pass &= within;
        max_abs = max_abs.max(vals.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        probes.push(EnergyProbe {
            t,
            residual_mean: mean,
            residual_se: se,
            jump_correction: corr_mean,
            within_4se: within,
        });
    }
    Ok(EnergyReport { probes, deterministic, max_abs_residual: max_abs, pass })
}
