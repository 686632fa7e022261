//! Finite signed measures on [-delta, 0] and the moving-average / anticipated
//! average / duality machinery built on them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Values that can be accumulated by measure quadrature: scalars, H-vectors,
/// Hilbert-Schmidt coefficient matrices.
pub trait LinearData: Clone {
    fn zeros_like(&self) -> Self;
    /// self += w * other
    fn axpy_in(&mut self, w: f64, other: &Self);
    fn scale_in(&mut self, w: f64);
}

impl LinearData for f64 {
    fn zeros_like(&self) -> Self {
        0.0
    }
    fn axpy_in(&mut self, w: f64, other: &Self) {
        *self += w * other;
    }
    fn scale_in(&mut self, w: f64) {
        *self *= w;
    }
}

impl LinearData for DVector<f64> {
    fn zeros_like(&self) -> Self {
        DVector::zeros(self.len())
    }
    fn axpy_in(&mut self, w: f64, other: &Self) {
        self.axpy(w, other, 1.0);
    }
    fn scale_in(&mut self, w: f64) {
        *self *= w;
    }
}

impl LinearData for DMatrix<f64> {
    fn zeros_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn axpy_in(&mut self, w: f64, other: &Self) {
        *self += other * w;
    }
    fn scale_in(&mut self, w: f64) {
        *self *= w;
    }
}

/// Density part of a delay measure, given in closed form so that exact masses
/// are available alongside the grid quadrature.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Density {
    /// rho(s) = value on [-delta, 0].
    Const { value: f64 },
    /// rho(s) = exp(lambda * s) on [-delta, 0].
    Exp { lambda: f64 },
}

impl Density {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Density::Const { value } => *value,
            Density::Exp { lambda } => (lambda * s).exp(),
        }
    }

    /// Exact integral over [-delta, 0].
    pub fn mass(&self, delta: f64) -> f64 {
        match self {
            Density::Const { value } => value * delta,
            Density::Exp { lambda } => {
                if lambda.abs() < 1e-14 {
                    delta
                } else {
                    (1.0 - (-lambda * delta).exp()) / lambda
                }
            }
        }
    }
}

/// Finite signed measure on [-delta, 0]: atoms plus an optional density.
///
/// Atom locations must be integer multiples of the grid step, which the
/// quadrature-weight builder enforces; this is what makes the duality identity
/// exact for atomic measures.
#[derive(Debug, Clone)]
pub struct DelayMeasure {
    pub delta: f64,
    /// (location in [-delta, 0], signed weight)
    pub atoms: Vec<(f64, f64)>,
    pub density: Option<Density>,
}

impl DelayMeasure {
    pub fn new(delta: f64, atoms: Vec<(f64, f64)>, density: Option<Density>) -> Result<Self> {
        if delta < 0.0 {
            return Err(Error::Config(format!("delta must be >= 0, got {delta}")));
        }
        for &(s, _) in &atoms {
            if s < -delta - 1e-12 || s > 1e-12 {
                return Err(Error::Config(format!(
                    "atom location {s} outside [-{delta}, 0]"
                )));
            }
        }
        Ok(DelayMeasure {
            delta,
            atoms,
            density,
        })
    }

    /// Dirac at -delta with unit weight (pointwise delay).
    pub fn dirac(delta: f64) -> Self {
        DelayMeasure {
            delta,
            atoms: vec![(-delta, 1.0)],
            density: None,
        }
    }

    /// The zero measure (no delay coupling). Carries one weight-0 atom so
    /// grid averages evaluate to zero instead of erroring on empty support.
    pub fn zero(delta: f64) -> Self {
        DelayMeasure {
            delta,
            atoms: vec![(0.0, 0.0)],
            density: None,
        }
    }

    /// Signed total mass m([-delta, 0]), using exact density integrals.
    pub fn total_mass(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|&(_, w)| w).sum();
        atoms + self.density.as_ref().map_or(0.0, |d| d.mass(self.delta))
    }

    /// Total variation |m|([-delta, 0]).
    pub fn total_variation(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|&(_, w)| w.abs()).sum();
        // Const densities may be signed; Exp is positive.
        let dens = match &self.density {
            None => 0.0,
            Some(Density::Const { value }) => value.abs() * self.delta,
            Some(d) => d.mass(self.delta),
        };
        atoms + dens
    }

    pub fn is_nonnegative(&self) -> bool {
        let atoms_ok = self.atoms.iter().all(|&(_, w)| w >= 0.0);
        let dens_ok = match &self.density {
            None => true,
            Some(Density::Const { value }) => *value >= 0.0,
            Some(Density::Exp { .. }) => true,
        };
        atoms_ok && dens_ok
    }

    /// Discrete representation: signed weights at integer step offsets in
    /// [-delay_steps, 0]. Atoms contribute their weight at their (exactly
    /// aligned) node; the density contributes trapezoid weights on the grid.
    pub fn grid_weights(&self, grid: &TimeGrid) -> Result<Vec<(i64, f64)>> {
        let d_steps = grid.offset_of(self.delta)?;
        let mut weights: Vec<(i64, f64)> = Vec::new();
        for &(s, w) in &self.atoms {
            let off = grid.offset_of(s)?;
            if off < -d_steps || off > 0 {
                return Err(Error::Alignment(format!(
                    "atom at {s} outside the delay window"
                )));
            }
            weights.push((off, w));
        }
        if let Some(d) = &self.density {
            if d_steps == 0 {
                return Err(Error::Config(
                    "density part requires delta > 0".to_string(),
                ));
            }
            for j in 0..=d_steps {
                let s = -self.delta + j as f64 * grid.dt;
                let trap = if j == 0 || j == d_steps { 0.5 } else { 1.0 };
                weights.push((j - d_steps, trap * grid.dt * d.eval(s)));
            }
        }
        // Merge duplicate offsets so downstream loops see one weight per node.
        weights.sort_by_key(|&(o, _)| o);
        let mut merged: Vec<(i64, f64)> = Vec::with_capacity(weights.len());
        for (o, w) in weights {
            match merged.last_mut() {
                Some((lo, lw)) if *lo == o => *lw += w,
                _ => merged.push((o, w)),
            }
        }
        Ok(merged)
    }

    /// Quadrature mass: sum of the discrete weights. Equals `total_mass` up to
    /// the trapezoid error of the density part.
    pub fn grid_mass(&self, grid: &TimeGrid) -> Result<f64> {
        Ok(self.grid_weights(grid)?.iter().map(|&(_, w)| w).sum())
    }
}

/// Moving average (eta_delta)(t_i) = int_{-delta}^0 eta(t_i + s) m(ds).
///
/// `path` is indexed by grid node; the caller guarantees it is defined on
/// [t - delta, t].
pub fn moving_average<V: LinearData>(
    m: &DelayMeasure,
    grid: &TimeGrid,
    idx: usize,
    path: impl Fn(usize) -> V,
) -> Result<V> {
    let weights = m.grid_weights(grid)?;
    average_with(&weights, idx, 1, path)
}

/// Anticipated average (g_{delta+})(t_i) = int_{-delta}^0 g(t_i - s) m(ds).
pub fn anticipated_average<V: LinearData>(
    m: &DelayMeasure,
    grid: &TimeGrid,
    idx: usize,
    path: impl Fn(usize) -> V,
) -> Result<V> {
    let weights = m.grid_weights(grid)?;
    average_with(&weights, idx, -1, path)
}

pub(crate) fn average_with<V: LinearData>(
    weights: &[(i64, f64)],
    idx: usize,
    direction: i64,
    path: impl Fn(usize) -> V,
) -> Result<V> {
    let mut acc: Option<V> = None;
    for &(off, w) in weights {
        let j = idx as i64 + direction * off;
        if j < 0 {
            return Err(Error::Alignment(format!(
                "measure read past the start of the grid (node {j})"
            )));
        }
        let v = path(j as usize);
        match &mut acc {
            None => {
                let mut z = v.zeros_like();
                z.axpy_in(w, &v);
                acc = Some(z);
            }
            Some(a) => a.axpy_in(w, &v),
        }
    }
    acc.ok_or_else(|| Error::Precondition("measure has no atoms and no density".to_string()))
}

/// Residual of the pathwise duality identity
/// `int_0^T <eta_delta(t), g(t)> dt - int_0^T <eta(t), g_{delta+}(t)> dt`,
/// for eta vanishing on [-delta, 0) and g vanishing on (T, T+delta].
///
/// Both integrals use the uniform closed node sum (weight dt at every node of
/// [0, T]), under which the shift argument cancels exactly for atomic
/// measures on aligned grids.
pub fn duality_residual(
    m: &DelayMeasure,
    grid: &TimeGrid,
    eta: impl Fn(usize) -> DVector<f64>,
    g: impl Fn(usize) -> DVector<f64>,
) -> Result<f64> {
    // Boundary-zero conventions, checked on the grid.
    for j in 0..grid.idx_zero() {
        if eta(j).norm() != 0.0 {
            return Err(Error::Precondition(
                "eta must vanish on [-delta, 0)".to_string(),
            ));
        }
    }
    for j in grid.idx_t() + 1..=grid.n_cells() {
        if g(j).norm() != 0.0 {
            return Err(Error::Precondition(
                "g must vanish on (T, T+delta]".to_string(),
            ));
        }
    }
    let weights = m.grid_weights(grid)?;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for i in grid.idx_zero()..=grid.idx_t() {
        let eta_d = average_with(&weights, i, 1, &eta)?;
        let g_ant = average_with(&weights, i, -1, &g)?;
        lhs += grid.dt * eta_d.dot(&g(i));
        rhs += grid.dt * eta(i).dot(&g_ant);
    }
    Ok(lhs - rhs)
}

/// Result of a delay-inequality evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks the moving-average energy inequality
/// `int_0^t lam ||eta_delta||^2 ds <= m([-delta,0])^2 int_{-delta}^t lam ||eta||^2 ds`
/// for a nonnegative measure and a nonnegative non-increasing weight.
pub fn check_delay_inequality(
    m: &DelayMeasure,
    grid: &TimeGrid,
    idx_t: usize,
    eta: impl Fn(usize) -> DVector<f64>,
    lam: impl Fn(usize) -> f64,
) -> Result<InequalityReport> {
    if !m.is_nonnegative() {
        return Err(Error::Precondition(
            "the delay inequality is stated for nonnegative measures; signed measure rejected"
                .to_string(),
        ));
    }
    check_monotone_weight(grid, grid.idx_zero(), idx_t, &lam, true)?;
    let weights = m.grid_weights(grid)?;
    let mass: f64 = weights.iter().map(|&(_, w)| w).sum();
    let mut lhs = 0.0;
    for i in grid.idx_zero()..=idx_t {
        let eta_d = average_with(&weights, i, 1, &eta)?;
        lhs += grid.dt * lam(i) * eta_d.norm_squared();
    }
    let mut rhs = 0.0;
    for i in 0..=idx_t {
        rhs += grid.dt * lam(i) * eta(i).norm_squared();
    }
    rhs *= mass * mass;
    let scale = 1.0 + lhs.abs() + rhs.abs();
    Ok(InequalityReport {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-10 * scale,
    })
}

/// Anticipated twin: `int_t^T lam ||g_{delta+}||^2 ds <= m^2 int_t^{T+delta} lam ||g||^2 ds`
/// for a nonnegative non-decreasing weight.
pub fn check_anticipated_inequality(
    m: &DelayMeasure,
    grid: &TimeGrid,
    idx_from: usize,
    g: impl Fn(usize) -> DVector<f64>,
    lam: impl Fn(usize) -> f64,
) -> Result<InequalityReport> {
    if !m.is_nonnegative() {
        return Err(Error::Precondition(
            "the delay inequality is stated for nonnegative measures; signed measure rejected"
                .to_string(),
        ));
    }
    check_monotone_weight(grid, idx_from, grid.n_cells(), &lam, false)?;
    let weights = m.grid_weights(grid)?;
    let mass: f64 = weights.iter().map(|&(_, w)| w).sum();
    let mut lhs = 0.0;
    for i in idx_from..=grid.idx_t() {
        let g_ant = average_with(&weights, i, -1, &g)?;
        lhs += grid.dt * lam(i) * g_ant.norm_squared();
    }
    let mut rhs = 0.0;
    for i in idx_from..=grid.n_cells() {
        rhs += grid.dt * lam(i) * g(i).norm_squared();
    }
    rhs *= mass * mass;
    let scale = 1.0 + lhs.abs() + rhs.abs();
    Ok(InequalityReport {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-10 * scale,
    })
}

fn check_monotone_weight(
    _grid: &TimeGrid,
    from: usize,
    to: usize,
    lam: &impl Fn(usize) -> f64,
    non_increasing: bool,
) -> Result<()> {
    let mut prev = lam(from);
    if prev < 0.0 {
        return Err(Error::Precondition("weight lambda must be >= 0".to_string()));
    }
    for i in from + 1..=to {
        let cur = lam(i);
        if cur < 0.0 {
            return Err(Error::Precondition("weight lambda must be >= 0".to_string()));
        }
        let ok = if non_increasing { cur <= prev + 1e-12 } else { cur >= prev - 1e-12 };
        if !ok {
            return Err(Error::Precondition(format!(
                "weight lambda must be {} on the integration window",
                if non_increasing { "non-increasing" } else { "non-decreasing" }
            )));
        }
        prev = cur;
    }
    Ok(())
}
