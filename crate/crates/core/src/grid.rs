//! Uniform time grid on [-delta, T+delta] shared by every path in the toolkit.

use crate::error::{Error, Result};

/// Relative tolerance used when snapping continuous times onto grid nodes.
const SNAP_TOL: f64 = 1e-9;

/// Uniform grid covering `[-delta, T + delta]`.
///
/// All paths (forward states, backward pairs, controls, coefficient samples)
/// are stored nodewise against one shared grid so that delay shifts become
/// integer index offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub delta: f64,
    pub t_end: f64,
    pub dt: f64,
    /// Number of cells in [-delta, T+delta].
    n_cells: usize,
    /// Index of t = 0.
    idx_zero: usize,
    /// Index of t = T.
    idx_t: usize,
}

impl TimeGrid {
    /// Build a grid for horizon `t_end` with delay `delta` and step `dt`.
    /// `dt` must divide both `delta` and `t_end` so that 0 and T are nodes.
    pub fn new(delta: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !(t_end > 0.0) || delta < 0.0 {
            return Err(Error::Config(format!(
                "need dt > 0, t_end > 0, delta >= 0; got dt={dt}, t_end={t_end}, delta={delta}"
            )));
        }
        let d_steps = Self::exact_multiple(delta, dt).ok_or_else(|| {
            Error::Alignment(format!("dt={dt} does not divide delta={delta}"))
        })?;
        let t_steps = Self::exact_multiple(t_end, dt).ok_or_else(|| {
            Error::Alignment(format!("dt={dt} does not divide t_end={t_end}"))
        })?;
        Ok(TimeGrid {
            delta,
            t_end,
            dt,
            n_cells: t_steps + 2 * d_steps,
            idx_zero: d_steps,
            idx_t: d_steps + t_steps,
        })
    }

    fn exact_multiple(x: f64, dt: f64) -> Option<usize> {
        let k = (x / dt).round();
        if (k * dt - x).abs() <= SNAP_TOL * (1.0 + x.abs()) && k >= 0.0 {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Total number of nodes, `n_cells + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Node index of t = 0.
    pub fn idx_zero(&self) -> usize {
        self.idx_zero
    }

    /// Node index of t = T.
    pub fn idx_t(&self) -> usize {
        self.idx_t
    }

    /// Number of steps spanning the delay window.
    pub fn delay_steps(&self) -> usize {
        self.idx_zero
    }

    pub fn time(&self, idx: usize) -> f64 {
        -self.delta + idx as f64 * self.dt
    }

    /// Signed step offset of a time shift `s` (must be an exact multiple of dt).
    pub fn offset_of(&self, s: f64) -> Result<i64> {
        let k = (s / self.dt).round();
        if (k * self.dt - s).abs() <= SNAP_TOL * (1.0 + s.abs()) {
            Ok(k as i64)
        } else {
            Err(Error::Alignment(format!(
                "time shift {s} is not a multiple of dt={}",
                self.dt
            )))
        }
    }

    /// Node index of an absolute time t in [-delta, T+delta].
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let off = self.offset_of(t + self.delta)?;
        if off < 0 || off as usize > self.n_cells {
            return Err(Error::Alignment(format!(
                "time {t} outside grid [{}, {}]",
                -self.delta,
                self.t_end + self.delta
            )));
        }
        Ok(off as usize)
    }

    /// Iterator over all node indices.
    pub fn nodes(&self) -> std::ops::RangeInclusive<usize> {
        0..=self.n_cells
    }
}
