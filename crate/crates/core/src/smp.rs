//! Maximum-principle machinery: Hamiltonian, multiplier process k, adjoint
//! backward pair, control gradient, projected gradient descent over a convex
//! admissible set, directional-derivative checks and a sufficiency check.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backward::{
    solve_absee, solve_recursive_utility, AbseeData, BackwardPair, GenArgs, RunningTerminal,
    UtilArgs, UtilityPair,
};
use crate::error::{Error, Result};
use crate::estimator::CondEstimator;
use crate::forward::{solve_sdee_with_noise, CoefficientBundle, ControlPath, PathEnsemble};
use crate::grid::TimeGrid;
use crate::hilbert::{sample_increments, FiniteVariationIntegrator, GelfandTriple, HsOperator, NoiseEnsemble, NoiseModel};
use crate::measure::DelayMeasure;

/// Convex admissible set in control coordinates.
#[derive(Debug, Clone)]
pub enum AdmissibleSet {
    WholeSpace,
    Box { lo: DVector<f64>, hi: DVector<f64> },
    Ball { center: DVector<f64>, radius: f64 },
}

impl AdmissibleSet {
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            AdmissibleSet::WholeSpace => u.clone(),
            AdmissibleSet::Box { lo, hi } => {
                DVector::from_fn(u.len(), |i, _| u[i].clamp(lo[i], hi[i]))
            }
            AdmissibleSet::Ball { center, radius } => {
                let d = u - center;
                let r = d.norm();
                if r <= *radius {
                    u.clone()
                } else {
                    center + d * (*radius / r)
                }
            }
        }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        (u - self.project(u)).amax() <= tol
    }

    pub fn sample(&self, dim: usize, rng: &mut impl Rng) -> DVector<f64> {
        match self {
            AdmissibleSet::WholeSpace => {
                DVector::from_fn(dim, |_, _| rng.gen_range(-3.0..3.0))
            }
            AdmissibleSet::Box { lo, hi } => {
                DVector::from_fn(dim, |i, _| rng.gen_range(lo[i]..=hi[i]))
            }
            AdmissibleSet::Ball { center, radius } => {
                let d = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0_f64..1.0));
                let n = d.norm().max(1e-12);
                let r = *radius * rng.gen_range(0.0_f64..1.0).powf(1.0 / dim as f64);
                center + d * (r / n)
            }
        }
    }
}

pub type FScalar<'a> = Box<dyn Fn(&UtilArgs) -> f64 + Sync + 'a>;
pub type FVec<'a> = Box<dyn Fn(&UtilArgs) -> DVector<f64> + Sync + 'a>;

/// Running cost generator f with its registered first derivatives. Vector
/// derivatives are Euclidean gradients in the respective coordinates.
pub struct UtilityGenerator<'a> {
    pub f: FScalar<'a>,
    pub f_x: FVec<'a>,
    pub f_xd: FVec<'a>,
    pub f_u: FVec<'a>,
    pub f_ud: FVec<'a>,
    pub f_y: FScalar<'a>,
    pub f_yd: FScalar<'a>,
    pub f_z: FVec<'a>,
    pub f_zd: FVec<'a>,
}

impl<'a> UtilityGenerator<'a> {
    pub fn zero(n: usize, m_ctrl: usize, modes: usize) -> Self {
        let _ = m_ctrl;
        UtilityGenerator {
            f: Box::new(|_| 0.0),
            f_x: Box::new(move |_| DVector::zeros(n)),
            f_xd: Box::new(move |_| DVector::zeros(n)),
            f_u: Box::new(move |a| DVector::zeros(a.u.len())),
            f_ud: Box::new(move |a| DVector::zeros(a.u.len())),
            f_y: Box::new(|_| 0.0),
            f_yd: Box::new(|_| 0.0),
            f_z: Box::new(move |_| DVector::zeros(modes)),
            f_zd: Box::new(move |_| DVector::zeros(modes)),
        }
    }
}

/// Terminal cost h(x(T), x_dn(T)) with Euclidean gradients.
pub struct TerminalCost<'a> {
    pub h: Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync + 'a>,
    pub h_x: Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync + 'a>,
    pub h_xd: Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync + 'a>,
}

impl<'a> TerminalCost<'a> {
    pub fn zero(n: usize) -> Self {
        TerminalCost {
            h: Box::new(|_, _| 0.0),
            h_x: Box::new(move |_, _| DVector::zeros(n)),
            h_xd: Box::new(move |_, _| DVector::zeros(n)),
        }
    }
}

pub struct ControlProblem<'a> {
    pub triple: GelfandTriple,
    pub noise: NoiseModel,
    pub bundle: CoefficientBundle,
    pub f_gen: UtilityGenerator<'a>,
    pub h_term: TerminalCost<'a>,
    pub m: DelayMeasure,
    pub nu: DelayMeasure,
    pub grid: TimeGrid,
    pub x0: Box<dyn Fn(f64) -> DVector<f64> + Sync + 'a>,
    pub admissible: AdmissibleSet,
    pub estimator: CondEstimator,
}

impl<'a> ControlProblem<'a> {
    /// Regression features at (trajectory, node): (x, x_delta, u).
    fn features<'b>(
        &'b self,
        x: &'b PathEnsemble,
    ) -> impl Fn(usize, usize) -> DVector<f64> + Sync + 'b {
        let weights = self.m.grid_weights(&self.grid).expect("aligned measure");
        move |tr: usize, i: usize| {
            let n = x.state_dim();
            let mc = x.u[tr][0].len();
            let mut f = DVector::zeros(2 * n + mc);
            f.rows_mut(0, n).copy_from(&x.x[tr][i]);
            let mut xd = DVector::zeros(n);
            for &(off, w) in &weights {
                let j = (i as i64 + off).max(0) as usize;
                xd.axpy(w, &x.x[tr][j], 1.0);
            }
            f.rows_mut(n, n).copy_from(&xd);
            f.rows_mut(2 * n, mc).copy_from(&x.u[tr][i]);
            f
        }
    }
}

/// Hamiltonian value: <b, p>_H + <sigma, q>_{L20} - f k.
pub fn hamiltonian(
    triple: &GelfandTriple,
    noise: &NoiseModel,
    b_val: &DVector<f64>,
    sigma_val: &HsOperator,
    f_val: f64,
    p: &DVector<f64>,
    q: &HsOperator,
    k: f64,
) -> f64 {
    crate::hilbert::hs_inner(sigma_val, q, noise, triple) + triple.h_inner(b_val, p) - f_val * k
}

/// One solved state of the whole pipeline at a fixed control.
pub struct PipelineState {
    pub x: PathEnsemble,
    pub util: UtilityPair,
    pub j: f64,
    /// multiplier k[traj][node], k(0) = -1
    pub k: Vec<Vec<f64>>,
    pub adjoint: BackwardPair,
}

fn util_args_at<'b>(
    problem: &ControlProblem,
    x: &'b PathEnsemble,
    util: &'b UtilityPair,
    weights: &[(i64, f64)],
    tr: usize,
    i: usize,
    scratch: &'b mut (DVector<f64>, DVector<f64>, DVector<f64>),
) -> (f64, DVector<f64>, DVector<f64>, f64, DVector<f64>) {
    let _ = scratch;
    let n = x.state_dim();
    let mc = x.u[tr][0].len();
    let modes = problem.noise.modes();
    let mut xd = DVector::zeros(n);
    let mut ud = DVector::zeros(mc);
    let mut y_ant = 0.0;
    let mut z_ant = DVector::zeros(modes);
    for &(off, w) in weights {
        let jp = (i as i64 + off).max(0) as usize;
        let jf = (i as i64 - off) as usize;
        xd.axpy(w, &x.x[tr][jp], 1.0);
        ud.axpy(w, &x.u[tr][jp], 1.0);
        y_ant += w * util.y[tr][jf];
        z_ant.axpy(w, &util.z[tr][jf], 1.0);
    }
    (y_ant, z_ant, xd, 0.0, ud)
}

/// Evaluates the forward state and the recursive utility only.
pub fn eval_cost(
    problem: &ControlProblem,
    u: &ControlPath,
    ens: &NoiseEnsemble,
) -> Result<(PathEnsemble, UtilityPair, f64)> {
    let x = solve_sdee_with_noise(
        &problem.bundle,
        &problem.triple,
        &problem.x0,
        u,
        &problem.m,
        &problem.grid,
        &problem.noise,
        ens,
    )?;
    let f = &problem.f_gen.f;
    let (util, j) = {
        let feats = problem.features(&x);
        solve_recursive_utility(
            &|a: UtilArgs| f(&a),
            &|xt, xd| (problem.h_term.h)(xt, xd),
            &x,
            &problem.m,
            &problem.nu,
            &problem.grid,
            &problem.noise,
            ens,
            &feats,
            &problem.estimator,
        )?
    };
    Ok((x, util, j))
}

/// Explicit Euler sweep of the multiplier SDDE
/// dk = [f_y k + (f_yd k)_d] dt + sum_k [f_z k + (f_zd k)_d] dw, k(0) = -1.
fn solve_k(
    problem: &ControlProblem,
    x: &PathEnsemble,
    util: &UtilityPair,
    ens: &NoiseEnsemble,
) -> Result<Vec<Vec<f64>>> {
    let grid = &problem.grid;
    let weights = problem.m.grid_weights(grid)?;
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let modes = problem.noise.modes();
    let mut out = Vec::with_capacity(x.n_traj());
    for tr in 0..x.n_traj() {
        // coefficient paths along this trajectory
        let mut fy = vec![0.0; grid.n_nodes()];
        let mut fyd = vec![0.0; grid.n_nodes()];
        let mut fz = vec![DVector::zeros(modes); grid.n_nodes()];
        let mut fzd = vec![DVector::zeros(modes); grid.n_nodes()];
        let mut scratch = (DVector::zeros(0), DVector::zeros(0), DVector::zeros(0));
        for i in i0..=i_t {
            let (y_ant, z_ant, xd, _, ud) =
                util_args_at(problem, x, util, &weights, tr, i, &mut scratch);
            let a = UtilArgs {
                t: grid.time(i),
                traj: tr,
                node: i,
                x: &x.x[tr][i],
                x_del: &xd,
                u: &x.u[tr][i],
                u_del: &ud,
                y: util.y[tr][i],
                y_ant,
                z: &util.z[tr][i],
                z_ant: &z_ant,
            };
            fy[i] = (problem.f_gen.f_y)(&a);
            fyd[i] = (problem.f_gen.f_yd)(&a);
            fz[i] = (problem.f_gen.f_z)(&a);
            fzd[i] = (problem.f_gen.f_zd)(&a);
        }
        let mut k = vec![0.0; grid.n_nodes()];
        k[i0] = -1.0;
        for i in i0..i_t {
            let del_dt: f64 = weights
                .iter()
                .map(|&(off, w)| {
                    let j = (i as i64 + off) as usize;
                    w * fyd[j] * k[j]
                })
                .sum();
            let mut next = k[i] + grid.dt * (fy[i] * k[i] + del_dt);
            for kk in 0..modes {
                let del_w: f64 = weights
                    .iter()
                    .map(|&(off, w)| {
                        let j = (i as i64 + off) as usize;
                        w * fzd[j][kk] * k[j]
                    })
                    .sum();
                next += (fz[i][kk] * k[i] + del_w) * ens.dw[tr][(i, kk)];
            }
            if !next.is_finite() {
                return Err(Error::Numerical("multiplier process not finite".into()));
            }
            k[i + 1] = next;
        }
        out.push(k);
    }
    Ok(out)
}

struct PathArgs<'b> {
    x: &'b PathEnsemble,
    util: &'b UtilityPair,
    k: &'b [Vec<f64>],
    weights: Vec<(i64, f64)>,
}

impl<'b> PathArgs<'b> {
    /// H_x-type functional coefficients at (tr, j) given (p, q) there:
    /// b_x^T M_H p + sum_k lam_k sigma_x,k^T M_H q_k - f_x k.
    fn hx_functional(
        &self,
        problem: &ControlProblem,
        tr: usize,
        j: usize,
        p: &DVector<f64>,
        q: &HsOperator,
        delayed: bool,
    ) -> DVector<f64> {
        let grid = &problem.grid;
        let t = grid.time(j);
        let mut scratch = (DVector::zeros(0), DVector::zeros(0), DVector::zeros(0));
        let (y_ant, z_ant, xd, _, ud) =
            util_args_at(problem, self.x, self.util, &self.weights, tr, j, &mut scratch);
        let xi = &self.x.x[tr][j];
        let ui = &self.x.u[tr][j];
        let jac_b = if delayed {
            (problem.bundle.drift_dxd)(t, xi, &xd, ui, &ud)
        } else {
            (problem.bundle.drift_dx)(t, xi, &xd, ui, &ud)
        };
        let jac_s = if delayed {
            (problem.bundle.sigma_dxd)(t, xi, &xd, ui, &ud)
        } else {
            (problem.bundle.sigma_dx)(t, xi, &xd, ui, &ud)
        };
        let a = UtilArgs {
            t,
            traj: tr,
            node: j,
            x: xi,
            x_del: &xd,
            u: ui,
            u_del: &ud,
            y: self.util.y[tr][j],
            y_ant,
            z: &self.util.z[tr][j],
            z_ant: &z_ant,
        };
        let fx = if delayed { (problem.f_gen.f_xd)(&a) } else { (problem.f_gen.f_x)(&a) };
        let mut out = jac_b.transpose() * problem.triple.functional(p);
        for (kk, &lam) in problem.noise.lambdas.iter().enumerate() {
            if lam > 0.0 {
                let qk = q.column(kk).clone_owned();
                out += jac_s[kk].transpose() * problem.triple.functional(&qk) * lam;
            }
        }
        out - fx * self.k[tr][j]
    }

    /// Control-gradient integrand at (tr, j):
    /// b_u^T M_H p + sum lam sigma_u^T M_H q - f_u k (Euclidean in u).
    fn hu(
        &self,
        problem: &ControlProblem,
        tr: usize,
        j: usize,
        p: &DVector<f64>,
        q: &HsOperator,
        delayed: bool,
    ) -> DVector<f64> {
        let grid = &problem.grid;
        let t = grid.time(j);
        let mut scratch = (DVector::zeros(0), DVector::zeros(0), DVector::zeros(0));
        let (y_ant, z_ant, xd, _, ud) =
            util_args_at(problem, self.x, self.util, &self.weights, tr, j, &mut scratch);
        let xi = &self.x.x[tr][j];
        let ui = &self.x.u[tr][j];
        let jac_b = if delayed {
            (problem.bundle.drift_dud)(t, xi, &xd, ui, &ud)
        } else {
            (problem.bundle.drift_du)(t, xi, &xd, ui, &ud)
        };
        let jac_s = if delayed {
            (problem.bundle.sigma_dud)(t, xi, &xd, ui, &ud)
        } else {
            (problem.bundle.sigma_du)(t, xi, &xd, ui, &ud)
        };
        let a = UtilArgs {
            t,
            traj: tr,
            node: j,
            x: xi,
            x_del: &xd,
            u: ui,
            u_del: &ud,
            y: self.util.y[tr][j],
            y_ant,
            z: &self.util.z[tr][j],
            z_ant: &z_ant,
        };
        let fu = if delayed { (problem.f_gen.f_ud)(&a) } else { (problem.f_gen.f_u)(&a) };
        let mut out = jac_b.transpose() * problem.triple.functional(p);
        for (kk, &lam) in problem.noise.lambdas.iter().enumerate() {
            if lam > 0.0 {
                let qk = q.column(kk).clone_owned();
                out += jac_s[kk].transpose() * problem.triple.functional(&qk) * lam;
            }
        }
        out - fu * self.k[tr][j]
    }
}

/// Solves the adjoint ABSEE of the current control: M = A*, N = B*, terminal
/// xi = -h_x(T) k(T), running datum zeta = -E_t[k(T) h_xd(T)] against
/// dF(t) = nu(d(t - T)) on [T - delta, T].
pub fn assemble_adjoint(
    problem: &ControlProblem,
    x: &PathEnsemble,
    util: &UtilityPair,
    k: &[Vec<f64>],
    ens: &NoiseEnsemble,
) -> Result<BackwardPair> {
    let grid = &problem.grid;
    let triple = &problem.triple;
    let n = triple.n;
    let i_t = grid.idx_t();
    let n_traj = x.n_traj();
    let nu_weights = problem.nu.grid_weights(grid)?;
    let t_end = grid.time(i_t);

    // terminal delayed state and terminal data per trajectory
    let mut xi = Vec::with_capacity(n_traj);
    let mut hxd_kt = Vec::with_capacity(n_traj);
    for tr in 0..n_traj {
        let mut xdel = DVector::zeros(n);
        for &(off, w) in &nu_weights {
            xdel.axpy(w, &x.x[tr][(i_t as i64 + off) as usize], 1.0);
        }
        let kt = k[tr][i_t];
        xi.push(triple.lift(&(problem.h_term.h_x)(&x.x[tr][i_t], &xdel)) * (-kt));
        hxd_kt.push(triple.lift(&(problem.h_term.h_xd)(&x.x[tr][i_t], &xdel)) * (-kt));
    }

    // running terminal: nu shifted to [T - delta, T]
    let mut atoms = Vec::new();
    for &(s, w) in &problem.nu.atoms {
        if w != 0.0 {
            atoms.push((t_end + s, w));
        }
    }
    let density_rate = problem.nu.density.as_ref().map(|d| {
        let mut rate = vec![0.0; grid.n_nodes()];
        for i in grid.nodes() {
            let s = grid.time(i) - t_end;
            if s >= -problem.nu.delta - 1e-12 && s <= 1e-12 {
                rate[i] = d.eval(s);
            }
        }
        rate
    });
    let fv = FiniteVariationIntegrator { atoms, density_rate };

    // zeta(tr, node): E_t of k(T) h_xd(T), fitted at every node where dF acts
    let inc = fv.cell_increments(grid)?;
    let feats_fn = problem.features(x);
    let mut zeta_tab: Vec<Option<Vec<DVector<f64>>>> = vec![None; grid.n_nodes()];
    for (cell, &(df, _)) in inc.iter().enumerate() {
        if df != 0.0 {
            let node = cell + 1;
            let feats: Vec<DVector<f64>> = (0..n_traj).map(|tr| feats_fn(tr, cell)).collect();
            let fitted = if n_traj == 1 {
                hxd_kt.clone()
            } else {
                let mut t = DMatrix::zeros(n_traj, n);
                for (r, v) in hxd_kt.iter().enumerate() {
                    t.row_mut(r).copy_from(&v.transpose());
                }
                let f = problem.estimator.fit_predict_cols(&feats, &t)?;
                (0..n_traj).map(|r| f.row(r).transpose()).collect()
            };
            zeta_tab[node] = Some(fitted);
        }
    }
    let zeta_tab = std::sync::Arc::new(zeta_tab);
    let zt = zeta_tab.clone();

    let pa = PathArgs { x, util, k, weights: problem.m.grid_weights(grid)? };
    let m_weights = problem.m.grid_weights(grid)?;
    let a_op = &problem.bundle.a_op;
    let b_op = &problem.bundle.b_op;
    let noise = &problem.noise;
    let data = AbseeData {
        m_op: Box::new(move |t| a_op(t).transpose()),
        n_op: Box::new(move |t, q: &HsOperator| {
            // B* q = M_H^{-1} sum_k lam_k B_k^T M_H q_k
            let bs = b_op(t);
            let mut acc = DVector::zeros(n);
            for (kk, &lam) in noise.lambdas.iter().enumerate() {
                if lam > 0.0 {
                    let qk = q.column(kk).clone_owned();
                    acc += bs[kk].transpose() * triple.functional(&qk) * lam;
                }
            }
            triple.lift(&acc)
        }),
        gen: Box::new(move |a: GenArgs| {
            // H_x + anticipated average of H_xd, all as one H-vector
            let i = a.node;
            let mut acc = pa.hx_functional(problem, a.traj, i, a.p, a.q, false);
            for &(off, w) in &m_weights {
                let j = (i as i64 - off) as usize;
                if j > i_t {
                    continue;
                }
                let (pj, qj) = if j == i { (a.p, a.q) } else { (&a.p_all[j], &a.q_all[j]) };
                let h_xd = pa.hx_functional(problem, a.traj, j, pj, qj, true);
                acc.axpy(w, &h_xd, 1.0);
            }
            triple.lift(&acc)
        }),
    };
    let terminal = RunningTerminal {
        xi,
        zeta: Box::new(move |tr, node| {
            zt[node].as_ref().map(|v| v[tr].clone()).unwrap_or_else(|| DVector::zeros(n))
        }),
        fv,
    };
    solve_absee(
        &data,
        &terminal,
        &problem.m,
        grid,
        triple,
        &problem.noise,
        ens,
        &feats_fn,
        &problem.estimator,
    )
}

pub fn solve_pipeline(
    problem: &ControlProblem,
    u: &ControlPath,
    ens: &NoiseEnsemble,
) -> Result<PipelineState> {
    let (x, util, j) = eval_cost(problem, u, ens)?;
    let k = solve_k(problem, &x, &util, ens)?;
    let adjoint = assemble_adjoint(problem, &x, &util, &k, ens)?;
    Ok(PipelineState { x, util, j, k, adjoint })
}

/// Maximum-principle gradient: trajectory-averaged for open-loop controls.
#[derive(Debug, Clone, Serialize)]
pub struct GradientPath {
    /// g[node] on the full grid; the discrete cost reads controls at cell
    /// left endpoints only, so the terminal node carries no sensitivity and
    /// g is zero outside [0, T)
    pub g: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub l2_norm: f64,
}

impl GradientPath {
    pub fn node(&self, i: usize) -> DVector<f64> {
        DVector::from_vec(self.g[i].clone())
    }
}

pub fn gradient(
    problem: &ControlProblem,
    state: &PipelineState,
) -> Result<GradientPath> {
    let grid = &problem.grid;
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let n_traj = state.x.n_traj();
    let mc = state.x.u[0][0].len();
    let pa = PathArgs {
        x: &state.x,
        util: &state.util,
        k: &state.k,
        weights: problem.m.grid_weights(grid)?,
    };
    let m_weights = problem.m.grid_weights(grid)?;
    let mut g = vec![vec![0.0; mc]; grid.n_nodes()];
    let mut se = vec![0.0; grid.n_nodes()];
    let mut l2 = 0.0;
    for i in i0..i_t {
        let mut vals: Vec<DVector<f64>> = Vec::with_capacity(n_traj);
        for tr in 0..n_traj {
            let mut v = pa.hu(
                problem,
                tr,
                i,
                &state.adjoint.p[tr][i],
                &state.adjoint.q[tr][i],
                false,
            );
            for &(off, w) in &m_weights {
                let j = (i as i64 - off) as usize;
                if j > i_t {
                    continue;
                }
                let hud = pa.hu(
                    problem,
                    tr,
                    j,
                    &state.adjoint.p[tr][j],
                    &state.adjoint.q[tr][j],
                    true,
                );
                v.axpy(w, &hud, 1.0);
            }
            vals.push(v);
        }
        let mut mean = DVector::zeros(mc);
        for v in &vals {
            mean += v;
        }
        mean /= n_traj as f64;
        let mut var = 0.0;
        for v in &vals {
            var += (v - &mean).norm_squared();
        }
        se[i] = if n_traj > 1 {
            (var / (n_traj as f64 - 1.0) / n_traj as f64).sqrt()
        } else {
            0.0
        };
        l2 += mean.norm_squared() * grid.dt;
        g[i] = mean.iter().cloned().collect();
    }
    Ok(GradientPath { g, se, l2_norm: l2.sqrt() })
}

#[derive(Debug, Clone, Serialize)]
pub struct GateauxReport {
    /// (rho, finite difference D(rho), |D(rho) - predicted|)
    pub ladder: Vec<(f64, f64, f64)>,
    pub predicted: f64,
    pub decreasing: bool,
    pub smallest_rel_error: f64,
}

/// Compares [J(u + rho v) - J(u)] / rho against the gradient prediction
/// E int <G, v> dt under common random numbers.
pub fn gateaux_check(
    problem: &ControlProblem,
    u: &ControlPath,
    v: &[DVector<f64>],
    rhos: &[f64],
    ens: &NoiseEnsemble,
) -> Result<GateauxReport> {
    let grid = &problem.grid;
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let u_vals = match u {
        ControlPath::OpenLoop { values } => values.clone(),
        _ => return Err(Error::Precondition("directional check needs an open-loop control".into())),
    };
    let state = solve_pipeline(problem, u, ens)?;
    let gp = gradient(problem, &state)?;
    let mut predicted = 0.0;
    for i in i0..i_t {
        predicted += gp.node(i).dot(&v[i]) * grid.dt;
    }
    let j0 = state.j;
    let mut ladder = Vec::new();
    for &rho in rhos {
        // the initial control segment on [-delta, 0) is problem data, not a
        // decision variable; admissible perturbations live on [0, T]
        let pert: Vec<DVector<f64>> = (0..grid.n_nodes())
            .map(|i| {
                if i >= i0 && i <= i_t {
                    &u_vals[i] + &v[i] * rho
                } else {
                    u_vals[i].clone()
                }
            })
            .collect();
        for (i, p) in pert.iter().enumerate() {
            if i >= i0 && i <= i_t && !problem.admissible.contains(p, 1e-9) {
                return Err(Error::Precondition(format!(
                    "perturbed control leaves the admissible set at node {i}"
                )));
            }
        }
        let up = ControlPath::OpenLoop { values: pert };
        let (_, _, jr) = eval_cost(problem, &up, ens)?;
        let d = (jr - j0) / rho;
        ladder.push((rho, d, (d - predicted).abs()));
    }
    let decreasing = ladder.windows(2).all(|w| w[1].2 <= w[0].2 + 1e-14);
    let last = ladder.last().unwrap();
    let smallest_rel_error = last.2 / (1.0 + predicted.abs());
    Ok(GateauxReport { ladder, predicted, decreasing, smallest_rel_error })
}

#[derive(Debug, Clone, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub j: f64,
    pub grad_norm: f64,
    pub residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeReport {
    pub history: Vec<IterRecord>,
    pub converged: bool,
}

/// Variational-inequality residual r(u) = -min over sampled admissible w of
/// int <G, w - u> dt; for the whole space the gradient L2 norm.
fn vi_residual(
    problem: &ControlProblem,
    grid: &TimeGrid,
    u_vals: &[DVector<f64>],
    gp: &GradientPath,
    n_samples: usize,
    rng: &mut impl Rng,
) -> f64 {
    if matches!(problem.admissible, AdmissibleSet::WholeSpace) {
        return gp.l2_norm;
    }
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let mc = u_vals[0].len();
    let mut worst = 0.0_f64;
    for _ in 0..n_samples {
        let mut acc = 0.0;
        for i in i0..i_t {
            let w = problem.admissible.sample(mc, rng);
            acc += gp.node(i).dot(&(&w - &u_vals[i])) * grid.dt;
        }
        worst = worst.max(-acc);
    }
    worst
}

/// Projected gradient descent with Armijo backtracking and frozen noise
/// (sample-average approximation).
pub fn optimize(
    problem: &ControlProblem,
    u0: ControlPath,
    tol: f64,
    max_iter: usize,
    ens: &NoiseEnsemble,
    seed: u64,
) -> Result<(ControlPath, OptimizeReport)> {
    let grid = &problem.grid;
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let mut u_vals = match u0 {
        ControlPath::OpenLoop { values } => values,
        _ => return Err(Error::Precondition("optimizer runs on open-loop controls".into())),
    };
    for (i, v) in u_vals.iter().enumerate() {
        if i >= i0 && i <= i_t && !problem.admissible.contains(v, 1e-9) {
            return Err(Error::Precondition("initial control is not admissible".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let mut history = Vec::new();
    let mut converged = false;
    let mut gamma0 = 1.0;
    for it in 0..=max_iter {
        let u = ControlPath::OpenLoop { values: u_vals.clone() };
        let state = solve_pipeline(problem, &u, ens)?;
        let gp = gradient(problem, &state)?;
        let res = vi_residual(problem, grid, &u_vals, &gp, 200, &mut rng);
        let mut rec = IterRecord {
            iter: it,
            j: state.j,
            grad_norm: gp.l2_norm,
            residual: res,
            step: 0.0,
        };
        if res <= tol {
            history.push(rec);
            converged = true;
            break;
        }
        if it == max_iter {
            history.push(rec);
            break;
        }
        // Armijo backtracking on the projected step
        let mut gamma = gamma0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<DVector<f64>> = (0..grid.n_nodes())
                .map(|i| {
                    if i >= i0 && i <= i_t {
                        problem.admissible.project(&(&u_vals[i] - gp.node(i) * gamma))
                    } else {
                        u_vals[i].clone()
                    }
                })
                .collect();
            let mut slope = 0.0;
            for i in i0..i_t {
                slope += gp.node(i).dot(&(&cand[i] - &u_vals[i])) * grid.dt;
            }
            if slope >= -1e-16 {
                break;
            }
            let (_, _, jc) =
                eval_cost(problem, &ControlPath::OpenLoop { values: cand.clone() }, ens)?;
            if jc <= state.j + 1e-4 * slope {
                u_vals = cand;
                rec.step = gamma;
                accepted = true;
                break;
            }
            gamma *= 0.5;
        }
        history.push(rec);
        if !accepted {
            break;
        }
        // let the trial step grow; badly scaled gradients (e.g. mass-matrix
        // weighted spatial controls) need gamma >> 1 and Armijo still guards
        // the decrease
        gamma0 = (gamma * 2.0).min(1e9);
    }
    Ok((ControlPath::OpenLoop { values: u_vals }, OptimizeReport { history, converged }))
}

#[derive(Debug, Clone, Serialize)]
pub struct SufficiencyReport {
    pub convexity_ok: bool,
    pub candidates_checked: usize,
    pub violations: usize,
    pub worst_margin: f64,
    pub pass: bool,
}

/// Convexity probes on (h, f) plus paired comparisons J(u_bar) <= J(u) for
/// random admissible candidates, at 3 paired standard errors.
pub fn sufficiency_check(
    problem: &ControlProblem,
    u_bar: &ControlPath,
    n_candidates: usize,
    ens: &NoiseEnsemble,
    seed: u64,
) -> Result<SufficiencyReport> {
    let grid = &problem.grid;
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let n = problem.triple.n;
    let mc = problem.bundle.m_ctrl;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // sampled second differences of h and of f in (x, xd, u, ud)
    let mut convex = true;
    for _ in 0..50 {
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let e1 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let e2 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let h = &problem.h_term.h;
        let sd = h(&(&a + &e1), &(&b + &e2)) + h(&(&a - &e1), &(&b - &e2)) - 2.0 * h(&a, &b);
        if sd < -1e-9 {
            convex = false;
        }
        let xu = DVector::from_fn(mc, |_, _| rng.gen_range(-1.0..1.0));
        let eu = DVector::from_fn(mc, |_, _| rng.gen_range(-0.5..0.5));
        let z = DVector::zeros(problem.noise.modes());
        let eval = |x: &DVector<f64>, u: &DVector<f64>| {
            (problem.f_gen.f)(&UtilArgs {
                t: 0.5 * grid.time(i_t),
                traj: 0,
                node: i0,
                x,
                x_del: x,
                u,
                u_del: u,
                y: 0.0,
                y_ant: 0.0,
                z: &z,
                z_ant: &z,
            })
        };
        let sd = eval(&(&a + &e1), &(&xu + &eu)) + eval(&(&a - &e1), &(&xu - &eu))
            - 2.0 * eval(&a, &xu);
        if sd < -1e-9 {
            convex = false;
        }
    }
    if !convex {
        return Err(Error::Precondition(
            "cost fails the sampled convexity probe; sufficiency check refused".into(),
        ));
    }

    let u_bar_vals = match u_bar {
        ControlPath::OpenLoop { values } => values,
        _ => return Err(Error::Precondition("sufficiency check needs open-loop controls".into())),
    };
    let (x_bar, util_bar, j_bar) = eval_cost(problem, u_bar, ens)?;
    let _ = (x_bar, j_bar);
    let n_traj = util_bar.y.len();
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..n_candidates {
        let cand: Vec<DVector<f64>> = (0..grid.n_nodes())
            .map(|i| {
                if i >= i0 && i <= i_t {
                    problem.admissible.sample(mc, &mut rng)
                } else {
                    u_bar_vals[i].clone()
                }
            })
            .collect();
        let (_, util_c, _) = eval_cost(problem, &ControlPath::OpenLoop { values: cand }, ens)?;
        // paired per-trajectory differences
        let diffs: Vec<f64> = (0..n_traj)
            .map(|tr| util_c.y[tr][i0] - util_bar.y[tr][i0])
            .collect();
        let mean = diffs.iter().sum::<f64>() / n_traj as f64;
        let se = if n_traj > 1 {
            (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n_traj as f64 - 1.0)
                / n_traj as f64)
                .sqrt()
        } else {
            0.0
        };
        let margin = mean + 3.0 * se;
        worst = worst.min(margin);
        if margin < 0.0 {
            violations += 1;
        }
    }
    Ok(SufficiencyReport {
        convexity_ok: true,
        candidates_checked: n_candidates,
        violations,
        worst_margin: worst,
        pass: violations == 0,
    })
}

/// Convenience: noise ensemble for a problem run.
pub fn ensemble_for(problem: &ControlProblem, n_traj: usize, seed: u64) -> NoiseEnsemble {
    sample_increments(&problem.noise, &problem.grid, n_traj, seed)
}
