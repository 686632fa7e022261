//! Backward solvers: the anticipated backward evolution equation with a
//! running terminal, and the scalar recursive-utility equation defining the
//! cost J = y(0). Conditional expectations are realized by cross-sectional
//! regression.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::CondEstimator;
use crate::forward::PathEnsemble;
use crate::grid::TimeGrid;
use crate::hilbert::{FiniteVariationIntegrator, GelfandTriple, HsOperator, NoiseEnsemble, NoiseModel};
use crate::measure::DelayMeasure;

/// Solution pair of the backward equation on the full grid; p and q vanish
/// identically on (T, T+delta].
pub struct BackwardPair {
    /// p[traj][node]
    pub p: Vec<Vec<DVector<f64>>>,
    /// q[traj][node], each an n x modes HS operator
    pub q: Vec<Vec<HsOperator>>,
}

impl BackwardPair {
    pub fn n_traj(&self) -> usize {
        self.p.len()
    }
}

pub type ZetaFn<'a> = Box<dyn Fn(usize, usize) -> DVector<f64> + Sync + 'a>;

/// Terminal data: a value at T plus a datum integrated against dF on (0, T].
pub struct RunningTerminal<'a> {
    /// xi[traj]
    pub xi: Vec<DVector<f64>>,
    /// zeta(traj, node)
    pub zeta: ZetaFn<'a>,
    pub fv: FiniteVariationIntegrator,
}

impl<'a> RunningTerminal<'a> {
    pub fn plain(xi: Vec<DVector<f64>>, n: usize) -> Self {
        RunningTerminal {
            xi,
            zeta: Box::new(move |_tr, _i| DVector::zeros(n)),
            fv: FiniteVariationIntegrator::zero(),
        }
    }
}

/// Arguments handed to the generator at one (trajectory, node).
pub struct GenArgs<'b> {
    pub t: f64,
    pub traj: usize,
    pub node: usize,
    /// explicit proxy for p(t): the value one node ahead
    pub p: &'b DVector<f64>,
    pub q: &'b HsOperator,
    /// anticipated delay average of p (atom at 0 reads the proxy)
    pub p_ant: &'b DVector<f64>,
    pub q_ant: &'b HsOperator,
    /// full per-trajectory paths; entries at nodes > `node` are valid sweep
    /// output, the entry at `node` itself is not yet written
    pub p_all: &'b [DVector<f64>],
    pub q_all: &'b [HsOperator],
}

pub struct AbseeData<'a> {
    /// drift operator M(t), handled implicitly, V-coords to V* coefficients
    pub m_op: Box<dyn Fn(f64) -> DMatrix<f64> + Sync + 'a>,
    /// q-coefficient term N(t)q as an H-vector, handled explicitly
    pub n_op: Box<dyn Fn(f64, &HsOperator) -> DVector<f64> + Sync + 'a>,
    pub gen: Box<dyn Fn(GenArgs) -> DVector<f64> + Sync + 'a>,
}

impl<'a> AbseeData<'a> {
    pub fn zero_ops(n: usize) -> Self {
        AbseeData {
            m_op: Box::new(move |_t| DMatrix::zeros(n, n)),
            n_op: Box::new(move |_t, _q| DVector::zeros(n)),
            gen: Box::new(move |_a| DVector::zeros(n)),
        }
    }
}

fn fit_vectors(
    estimator: &CondEstimator,
    features: &[DVector<f64>],
    raw: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let n_traj = raw.len();
    let dim = raw[0].len();
    if n_traj == 1 {
        return Ok(raw.to_vec());
    }
    let mut t = DMatrix::zeros(n_traj, dim);
    for (i, v) in raw.iter().enumerate() {
        t.row_mut(i).copy_from(&v.transpose());
    }
    let fitted = estimator.fit_predict_cols(features, &t)?;
    Ok((0..n_traj).map(|i| fitted.row(i).transpose()).collect())
}

/// Backward sweep for the anticipated backward evolution equation with
/// running terminal. Anticipated arguments read future sweep output; the
/// atom at lag 0 reads the one-node-ahead proxy to keep the step explicit.
#[allow(clippy::too_many_arguments)]
pub fn solve_absee(
    data: &AbseeData,
    terminal: &RunningTerminal,
    m: &DelayMeasure,
    grid: &TimeGrid,
    triple: &GelfandTriple,
    noise: &NoiseModel,
    ens: &NoiseEnsemble,
    features: &(dyn Fn(usize, usize) -> DVector<f64> + Sync),
    estimator: &CondEstimator,
) -> Result<BackwardPair> {
    let n = triple.n;
    let modes = noise.modes();
    let n_traj = ens.n_traj();
    if terminal.xi.len() != n_traj {
        return Err(Error::Dimension("one terminal value per trajectory required".into()));
    }
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let inc = terminal.fv.cell_increments(grid)?;
    for (i, &(df, _)) in inc.iter().enumerate() {
        if df != 0.0 && (i + 1 < i0 || i + 1 > i_t) {
            return Err(Error::Alignment(format!(
                "F increment outside (0, T] at cell {i}"
            )));
        }
    }
    let weights = m.grid_weights(grid)?;
    // integrability of the running datum, sampled
    let mut zeta_energy = 0.0;
    for (i, &(df, _)) in inc.iter().enumerate() {
        if df != 0.0 {
            for tr in 0..n_traj {
                zeta_energy += triple.h_norm(&(terminal.zeta)(tr, i + 1)).powi(2) * df.abs();
            }
        }
    }
    if !zeta_energy.is_finite() {
        return Err(Error::Precondition("running datum has infinite energy".into()));
    }

    let eye = DMatrix::<f64>::identity(n, n);
    let mut p = vec![vec![DVector::<f64>::zeros(n); grid.n_nodes()]; n_traj];
    let mut q = vec![vec![DMatrix::<f64>::zeros(n, modes); grid.n_nodes()]; n_traj];
    for tr in 0..n_traj {
        p[tr][i_t] = terminal.xi[tr].clone();
    }

    for i in (i0..i_t).rev() {
        let t = grid.time(i);
        let feats: Vec<DVector<f64>> = (0..n_traj).map(|tr| features(tr, i)).collect();

        // q(t_i): regression of p(t_{i+1}) dw_k / (lambda_k dt) per mode
        let mut raw_q: Vec<DVector<f64>> = Vec::with_capacity(n_traj);
        for tr in 0..n_traj {
            let mut v = DVector::zeros(n * modes);
            for k in 0..modes {
                let lam = noise.lambdas[k];
                if lam > 0.0 {
                    let w = ens.dw[tr][(i, k)] / (lam * grid.dt);
                    for r in 0..n {
                        v[k * n + r] = p[tr][i + 1][r] * w;
                    }
                }
            }
            raw_q.push(v);
        }
        let fit_q = fit_vectors(estimator, &feats, &raw_q)?;
        for tr in 0..n_traj {
            for k in 0..modes {
                for r in 0..n {
                    q[tr][i][(r, k)] = fit_q[tr][k * n + r];
                }
            }
        }

        // rhs(t_i) = p_{i+1} + zeta dF + dt (N q + g)
        let (df, _) = inc[i];
        let mut raw_rhs: Vec<DVector<f64>> = Vec::with_capacity(n_traj);
        for tr in 0..n_traj {
            let proxy = &p[tr][i + 1];
            let (p_ant, q_ant) = if weights.is_empty() {
                (DVector::zeros(n), DMatrix::zeros(n, modes))
            } else {
                let mut pa = DVector::zeros(n);
                let mut qa = DMatrix::zeros(n, modes);
                for &(off, w) in &weights {
                    let j = (i as i64 - off) as usize;
                    if j == i {
                        pa.axpy(w, proxy, 1.0);
                        qa += &q[tr][i] * w;
                    } else {
                        pa.axpy(w, &p[tr][j], 1.0);
                        qa += &q[tr][j] * w;
                    }
                }
                (pa, qa)
            };
            let g = (data.gen)(GenArgs {
                t,
                traj: tr,
                node: i,
                p: proxy,
                q: &q[tr][i],
                p_ant: &p_ant,
                q_ant: &q_ant,
                p_all: &p[tr],
                q_all: &q[tr],
            });
            let mut rhs = p[tr][i + 1].clone();
            if df != 0.0 {
                rhs.axpy(df, &(terminal.zeta)(tr, i + 1), 1.0);
            }
            rhs += ((data.n_op)(t, &q[tr][i]) + g) * grid.dt;
            raw_rhs.push(rhs);
        }
        let fit_rhs = fit_vectors(estimator, &feats, &raw_rhs)?;

        let m_mat = (data.m_op)(t);
        let step = (&eye - triple.lift_matrix(&m_mat) * grid.dt).lu();
        for tr in 0..n_traj {
            let sol = step
                .solve(&fit_rhs[tr])
                .ok_or_else(|| Error::Numerical(format!("implicit backward solve failed at t = {t}")))?;
            if !sol.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "backward solution not finite at t = {t}"
                )));
            }
            p[tr][i] = sol;
        }
    }
    Ok(BackwardPair { p, q })
}

/// Scalar utility pair; z is a mode vector per node.
pub struct UtilityPair {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<DVector<f64>>>,
    /// cross-trajectory standard deviation of y(0), an estimator diagnostic
    pub y0_spread: f64,
}

/// Generator arguments of the recursive-utility equation.
pub struct UtilArgs<'b> {
    pub t: f64,
    pub traj: usize,
    pub node: usize,
    pub x: &'b DVector<f64>,
    pub x_del: &'b DVector<f64>,
    pub u: &'b DVector<f64>,
    pub u_del: &'b DVector<f64>,
    /// explicit proxy for y(t)
    pub y: f64,
    pub y_ant: f64,
    pub z: &'b DVector<f64>,
    pub z_ant: &'b DVector<f64>,
}

/// Backward sweep of the recursive-utility equation
/// -dy = f(t, x, x_d, y, y_ant, z, z_ant, u, u_d) dt - z dw,
/// y(T) = h(x(T), int x(T+s) nu(ds)), J = mean y(0).
#[allow(clippy::too_many_arguments)]
pub fn solve_recursive_utility(
    f: &(dyn Fn(UtilArgs) -> f64 + Sync),
    h: &(dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync),
    x: &PathEnsemble,
    m: &DelayMeasure,
    nu: &DelayMeasure,
    grid: &TimeGrid,
    noise: &NoiseModel,
    ens: &NoiseEnsemble,
    features: &(dyn Fn(usize, usize) -> DVector<f64> + Sync),
    estimator: &CondEstimator,
) -> Result<(UtilityPair, f64)> {
    let n_traj = x.n_traj();
    if ens.n_traj() != n_traj {
        return Err(Error::Dimension("forward ensemble and noise ensemble disagree".into()));
    }
    let modes = noise.modes();
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let weights = m.grid_weights(grid)?;
    let nu_weights = nu.grid_weights(grid)?;

    let mut y = vec![vec![0.0; grid.n_nodes()]; n_traj];
    let mut z = vec![vec![DVector::<f64>::zeros(modes); grid.n_nodes()]; n_traj];
    for tr in 0..n_traj {
        let mut xdel = DVector::zeros(x.state_dim());
        for &(off, w) in &nu_weights {
            let j = (i_t as i64 + off) as usize;
            xdel.axpy(w, &x.x[tr][j], 1.0);
        }
        y[tr][i_t] = h(&x.x[tr][i_t], &xdel);
    }

    for i in (i0..i_t).rev() {
        let t = grid.time(i);
        let feats: Vec<DVector<f64>> = (0..n_traj).map(|tr| features(tr, i)).collect();
        let mut raw_z: Vec<DVector<f64>> = Vec::with_capacity(n_traj);
        for tr in 0..n_traj {
            let mut v = DVector::zeros(modes);
            for k in 0..modes {
                let lam = noise.lambdas[k];
                if lam > 0.0 {
                    v[k] = y[tr][i + 1] * ens.dw[tr][(i, k)] / (lam * grid.dt);
                }
            }
            raw_z.push(v);
        }
        let fit_z = fit_vectors(estimator, &feats, &raw_z)?;
        for tr in 0..n_traj {
            z[tr][i] = fit_z[tr].clone();
        }

        let mut raw_rhs = Vec::with_capacity(n_traj);
        for tr in 0..n_traj {
            let proxy = y[tr][i + 1];
            let mut y_ant = 0.0;
            let mut z_ant = DVector::zeros(modes);
            for &(off, w) in &weights {
                let j = (i as i64 - off) as usize;
                y_ant += w * if j == i { proxy } else { y[tr][j] };
                z_ant.axpy(w, if j == i { &z[tr][i] } else { &z[tr][j] }, 1.0);
            }
            let mut x_del = DVector::zeros(x.state_dim());
            let mut u_del = DVector::zeros(x.u[tr][0].len());
            for &(off, w) in &weights {
                let j = (i as i64 + off) as usize;
                x_del.axpy(w, &x.x[tr][j], 1.0);
                u_del.axpy(w, &x.u[tr][j], 1.0);
            }
            let fval = f(UtilArgs {
                t,
                traj: tr,
                node: i,
                x: &x.x[tr][i],
                x_del: &x_del,
                u: &x.u[tr][i],
                u_del: &u_del,
                y: proxy,
                y_ant,
                z: &z[tr][i],
                z_ant: &z_ant,
            });
            raw_rhs.push(y[tr][i + 1] + grid.dt * fval);
        }
        let fit_y = if n_traj == 1 {
            raw_rhs
        } else {
            estimator.fit_predict(&feats, &raw_rhs)?
        };
        for tr in 0..n_traj {
            if !fit_y[tr].is_finite() {
                return Err(Error::Numerical(format!("utility sweep not finite at t = {t}")));
            }
            y[tr][i] = fit_y[tr];
        }
    }

    let mean = y.iter().map(|tr| tr[i0]).sum::<f64>() / n_traj as f64;
    let spread = if n_traj > 1 {
        (y.iter().map(|tr| (tr[i0] - mean).powi(2)).sum::<f64>() / (n_traj as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((UtilityPair { y, z, y0_spread: spread }, mean))
}

#[derive(Debug, Clone, Serialize)]
pub struct BackwardStabilityReport {
    pub ratios: Vec<(f64, f64)>,
    pub bounded: bool,
}

/// Continuity of the data-to-solution map: solves the problem with terminal
/// data perturbed along (d_xi, and optionally a zeta bump) at each scale, with
/// common randomness, and reports solution-energy over data-energy ratios.
#[allow(clippy::too_many_arguments)]
pub fn absee_stability_probe(
    data: &AbseeData,
    terminal: &RunningTerminal,
    d_xi: &[DVector<f64>],
    scales: &[f64],
    m: &DelayMeasure,
    grid: &TimeGrid,
    triple: &GelfandTriple,
    noise: &NoiseModel,
    ens: &NoiseEnsemble,
    features: &(dyn Fn(usize, usize) -> DVector<f64> + Sync),
    estimator: &CondEstimator,
) -> Result<BackwardStabilityReport> {
    let base = solve_absee(data, terminal, m, grid, triple, noise, ens, features, estimator)?;
    let n_traj = ens.n_traj();
    let i0 = grid.idx_zero();
    let i_t = grid.idx_t();
    let mut ratios = Vec::new();
    for &eps in scales {
        let xi2: Vec<DVector<f64>> = (0..n_traj)
            .map(|tr| &terminal.xi[tr] + &d_xi[tr] * eps)
            .collect();
        let pert_term = RunningTerminal {
            xi: xi2,
            zeta: Box::new(|tr, i| (terminal.zeta)(tr, i)),
            fv: terminal.fv.clone(),
        };
        let pert =
            solve_absee(data, &pert_term, m, grid, triple, noise, ens, features, estimator)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for tr in 0..n_traj {
            for i in i0..=i_t {
                num += triple.h_norm(&(&base.p[tr][i] - &pert.p[tr][i])).powi(2) * grid.dt;
            }
            den += triple.h_norm(&(&d_xi[tr] * eps)).powi(2);
        }
        num /= n_traj as f64;
        den /= n_traj as f64;
        ratios.push((eps, if den == 0.0 { 0.0 } else { num / den }));
    }
    let bounded = ratios.iter().all(|&(_, r)| r.is_finite());
    Ok(BackwardStabilityReport { ratios, bounded })
}
