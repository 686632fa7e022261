//! JSON experiment configuration. Parsing is total: any unknown field,
//! type error, or cross-field violation surfaces as a config error with the
//! line/column from the parser where available.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimator::{CondEstimator, EstimatorMode};
use crate::grid::TimeGrid;
use crate::hilbert::NoiseModel;
use crate::lq::LQSpec;
use crate::measure::{DelayMeasure, Density};
use crate::spde::SPDESpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub grid: GridSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub measures: MeasuresSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: String,
}

fn default_seed() -> u64 {
    42
}

fn default_out() -> String {
    "out".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSection {
    /// Built-in LQ scenarios; grid parameters come from the grid section.
    Lq { preset: LqPreset },
    /// The SPDE tracking demo; unset fields take the shipped defaults.
    Spde {
        #[serde(default = "default_n_space")]
        n_space: usize,
        #[serde(default)]
        overrides: SpdeOverrides,
    },
    /// Arbitrary constant-coefficient linear problem given by matrices.
    Custom(Box<CustomProblem>),
}

fn default_n_space() -> usize {
    8
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LqPreset {
    Scalar,
    TwoDim,
    Delayed,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpdeOverrides {
    pub a: Option<Vec<f64>>,
    pub atilde: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub modes: Option<usize>,
    pub lambda_r: Option<f64>,
    pub noise_amp: Option<f64>,
    pub c_del: Option<f64>,
    pub rho_u: Option<f64>,
    pub x0_amp: Option<f64>,
    pub atom_shift: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomProblem {
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub a1: Option<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default)]
    pub c1: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub b1: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub d: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub d1: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub s0: Option<Vec<Vec<f64>>>,
    pub f: Vec<Vec<f64>>,
    pub n: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    #[serde(default)]
    pub g1: f64,
    #[serde(default)]
    pub g2: f64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default)]
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default)]
    pub eigenvalues: EigSection,
}

fn default_modes() -> usize {
    1
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { modes: 1, eigenvalues: EigSection::Identity }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EigSection {
    #[default]
    Identity,
    Geometric {
        r: f64,
    },
    List {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasuresSection {
    pub m: MeasureSection,
    pub nu: MeasureSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeasureSection {
    #[default]
    Zero,
    /// Unit atom at -delta.
    Dirac,
    /// Atoms (s, w) with s in [-delta, 0].
    Multipoint { atoms: Vec<(f64, f64)> },
    /// Absolutely continuous part, plus optional atoms.
    Density {
        density: Density,
        #[serde(default)]
        atoms: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorMode,
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
}

fn default_estimator() -> EstimatorMode {
    EstimatorMode::Linear
}

fn default_n_traj() -> usize {
    64
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection { estimator: EstimatorMode::Linear, n_traj: 64 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    1e-4
}

fn default_max_iter() -> usize {
    50
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection { tol: 1e-4, max_iter: 50 }
    }
}

fn to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    if nr == 0 {
        return Err(Error::Config(format!("{name}: empty matrix")));
    }
    let nc = rows[0].len();
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Config(format!("{name}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field validation run before any compute: grid alignment of the
    /// time step and of every measure atom.
    pub fn validate(&self) -> Result<()> {
        let grid = self.time_grid()?;
        self.measure_m()?.grid_weights(&grid)?;
        self.measure_nu()?.grid_weights(&grid)?;
        self.noise_model()?;
        if let ProblemSection::Custom(c) = &self.problem {
            self.custom_lq_spec(c)?;
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.delta, self.grid.t_end, self.grid.dt)
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        match &self.noise.eigenvalues {
            EigSection::Identity => Ok(NoiseModel::identity(self.noise.modes)),
            EigSection::Geometric { r } => NoiseModel::geometric(self.noise.modes, *r),
            EigSection::List { values } => {
                if values.len() != self.noise.modes {
                    return Err(Error::Config(format!(
                        "noise: {} eigenvalues listed for {} modes",
                        values.len(),
                        self.noise.modes
                    )));
                }
                NoiseModel::new(values.clone())
            }
        }
    }

    fn build_measure(&self, section: &MeasureSection) -> Result<DelayMeasure> {
        let delta = self.grid.delta;
        match section {
            MeasureSection::Zero => Ok(DelayMeasure::zero(delta)),
            MeasureSection::Dirac => Ok(DelayMeasure::dirac(delta)),
            MeasureSection::Multipoint { atoms } => DelayMeasure::new(delta, atoms.clone(), None),
            MeasureSection::Density { density, atoms } => {
                DelayMeasure::new(delta, atoms.clone(), Some(density.clone()))
            }
        }
    }

    pub fn measure_m(&self) -> Result<DelayMeasure> {
        self.build_measure(&self.measures.m)
    }

    pub fn measure_nu(&self) -> Result<DelayMeasure> {
        self.build_measure(&self.measures.nu)
    }

    pub fn estimator(&self) -> CondEstimator {
        CondEstimator::new(self.solver.estimator)
    }

    /// The LQ data for lq presets and custom problems.
    pub fn lq_spec(&self) -> Result<LQSpec> {
        match &self.problem {
            ProblemSection::Lq { preset } => self.preset_lq_spec(*preset),
            ProblemSection::Custom(c) => self.custom_lq_spec(c),
            ProblemSection::Spde { .. } => {
                Err(Error::Config("spde problem has no LQ form; use the spde command".into()))
            }
        }
    }

    fn preset_lq_spec(&self, preset: LqPreset) -> Result<LQSpec> {
        let g = &self.grid;
        let eye = |n: usize| DMatrix::<f64>::identity(n, n);
        match preset {
            LqPreset::Scalar => {
                if g.delta != 0.0 {
                    return Err(Error::Config("scalar preset is delay-free; set delta 0".into()));
                }
                LQSpec::no_delay(
                    DMatrix::from_element(1, 1, 0.5),
                    vec![DMatrix::zeros(1, 1)],
                    eye(1),
                    vec![DMatrix::zeros(1, 1)],
                    DMatrix::zeros(1, 1),
                    eye(1),
                    eye(1),
                    eye(1) * 0.5,
                    g.t_end,
                    g.dt,
                    DVector::from_element(1, 1.0),
                    NoiseModel::identity(1),
                )
            }
            LqPreset::TwoDim => {
                if g.delta != 0.0 {
                    return Err(Error::Config("two-dim preset is delay-free; set delta 0".into()));
                }
                let a = DMatrix::from_row_slice(2, 2, &[0.2, -0.4, 0.4, 0.2]);
                LQSpec::no_delay(
                    a,
                    vec![DMatrix::zeros(2, 2)],
                    eye(2),
                    vec![DMatrix::zeros(2, 2)],
                    DMatrix::zeros(2, 1),
                    eye(2),
                    eye(2),
                    eye(2) * 0.5,
                    g.t_end,
                    g.dt,
                    DVector::from_vec(vec![1.0, -0.5]),
                    NoiseModel::identity(1),
                )
            }
            LqPreset::Delayed => {
                if g.delta <= 0.0 {
                    return Err(Error::Config("delayed preset needs delta > 0".into()));
                }
                let mut spec = LQSpec::no_delay(
                    DMatrix::from_element(1, 1, 0.2),
                    vec![DMatrix::zeros(1, 1)],
                    eye(1),
                    vec![DMatrix::zeros(1, 1)],
                    DMatrix::zeros(1, 1),
                    eye(1),
                    eye(1),
                    eye(1) * 0.5,
                    g.t_end,
                    g.dt,
                    DVector::from_element(1, 1.0),
                    NoiseModel::identity(1),
                )?;
                spec.delta = g.delta;
                spec.m = DelayMeasure::dirac(g.delta);
                spec.a1 = DMatrix::from_element(1, 1, 0.6);
                spec.c1 = DMatrix::from_element(1, 1, 0.3);
                Ok(spec)
            }
        }
    }

    fn custom_lq_spec(&self, c: &CustomProblem) -> Result<LQSpec> {
        let a = to_matrix(&c.a, "a")?;
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Config("a must be square".into()));
        }
        let cm = to_matrix(&c.c, "c")?;
        let m_ctrl = cm.ncols();
        let modes = self.noise.modes;
        let opt_nn = |v: &Option<Vec<Vec<f64>>>, name: &str| -> Result<DMatrix<f64>> {
            match v {
                Some(rows) => to_matrix(rows, name),
                None => Ok(DMatrix::zeros(n, n)),
            }
        };
        let opt_nm = |v: &Option<Vec<Vec<f64>>>, name: &str| -> Result<DMatrix<f64>> {
            match v {
                Some(rows) => to_matrix(rows, name),
                None => Ok(DMatrix::zeros(n, m_ctrl)),
            }
        };
        let opt_modes = |v: &Option<Vec<Vec<Vec<f64>>>>,
                         cols: usize,
                         name: &str|
         -> Result<Vec<DMatrix<f64>>> {
            match v {
                Some(list) => {
                    if list.len() != modes {
                        return Err(Error::Config(format!(
                            "{name}: {} matrices for {} noise modes",
                            list.len(),
                            modes
                        )));
                    }
                    list.iter().map(|rows| to_matrix(rows, name)).collect()
                }
                None => Ok(vec![DMatrix::zeros(n, cols); modes]),
            }
        };
        let s0 = match &c.s0 {
            Some(rows) => to_matrix(rows, "s0")?,
            None => DMatrix::zeros(n, modes),
        };
        LQSpec {
            n,
            m_ctrl,
            a,
            a1: opt_nn(&c.a1, "a1")?,
            b: opt_modes(&c.b, n, "b")?,
            b1: opt_modes(&c.b1, n, "b1")?,
            c: cm,
            c1: opt_nm(&c.c1, "c1")?,
            d: opt_modes(&c.d, m_ctrl, "d")?,
            d1: opt_modes(&c.d1, m_ctrl, "d1")?,
            s0,
            f_w: to_matrix(&c.f, "f")?,
            n_w: to_matrix(&c.n, "n")?,
            phi: to_matrix(&c.phi, "phi")?,
            g1: c.g1,
            g2: c.g2,
            m: self.measure_m()?,
            delta: self.grid.delta,
            t_end: self.grid.t_end,
            dt: self.grid.dt,
            x0: DVector::from_vec(c.x0.clone()),
            noise: self.noise_model()?,
            n_min_eig: 0.0,
        }
        .validate()
    }

    pub fn spde_spec(&self) -> Result<SPDESpec> {
        let (n_space, ov) = match &self.problem {
            ProblemSection::Spde { n_space, overrides } => (*n_space, overrides.clone()),
            _ => return Err(Error::Config("not an spde problem".into())),
        };
        let mut spec = SPDESpec::default_scenario(n_space);
        spec.delta = self.grid.delta;
        spec.t_end = self.grid.t_end;
        spec.dt = self.grid.dt;
        if let Some(v) = ov.a {
            spec.a = v;
        }
        if let Some(v) = ov.atilde {
            spec.atilde = v;
        }
        if let Some(v) = ov.beta {
            spec.beta = v;
        }
        if let Some(v) = ov.modes {
            spec.modes = v;
        }
        if let Some(v) = ov.lambda_r {
            spec.lambda_r = v;
        }
        if let Some(v) = ov.noise_amp {
            spec.noise_amp = v;
        }
        if let Some(v) = ov.c_del {
            spec.c_del = v;
        }
        if let Some(v) = ov.rho_u {
            spec.rho_u = v;
        }
        if let Some(v) = ov.x0_amp {
            spec.x0_amp = v;
        }
        if let Some(v) = ov.atom_shift {
            spec.atom_shift = v;
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "problem": {"kind": "lq", "preset": "scalar"},
        "grid": {"dt": 0.05, "t_end": 1.0}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.solver.n_traj, 64);
        assert_eq!(cfg.out, "out");
        cfg.lq_spec().unwrap();
    }

    #[test]
    fn unknown_field_and_type_errors_are_config_errors() {
        let bad = r#"{"problem": {"kind": "lq", "preset": "scalar"},
                      "grid": {"dt": 0.05, "t_end": 1.0},
                      "typo_field": 3}"#;
        match ExperimentConfig::from_str(bad) {
            Err(Error::Config(msg)) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn misaligned_atom_rejected_at_validation() {
        let bad = r#"{
            "problem": {"kind": "lq", "preset": "delayed"},
            "grid": {"dt": 0.05, "t_end": 1.0, "delta": 0.25},
            "measures": {"m": {"kind": "multipoint", "atoms": [[-0.13, 1.0]]}}
        }"#;
        assert!(ExperimentConfig::from_str(bad).is_err());
    }

    #[test]
    fn custom_problem_round_trip() {
        let text = r#"{
            "problem": {"kind": "custom",
                "a": [[0.5]], "c": [[1.0]],
                "f": [[1.0]], "n": [[1.0]], "phi": [[0.5]],
                "x0": [1.0]},
            "grid": {"dt": 0.05, "t_end": 1.0},
            "noise": {"modes": 2, "eigenvalues": {"kind": "geometric", "r": 0.5}},
            "seed": 7
        }"#;
        let cfg = ExperimentConfig::from_str(text).unwrap();
        let spec = cfg.lq_spec().unwrap();
        assert_eq!(spec.n, 1);
        assert_eq!(spec.noise.lambdas.len(), 2);
        // serialization round-trips
        let echoed = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_str(&echoed).unwrap();
        assert_eq!(back.seed, 7);
    }

    #[test]
    fn spde_section_with_overrides() {
        let text = r#"{
            "problem": {"kind": "spde", "n_space": 4,
                        "overrides": {"rho_u": 0.2}},
            "grid": {"dt": 0.025, "t_end": 0.5, "delta": 0.25}
        }"#;
        let cfg = ExperimentConfig::from_str(text).unwrap();
        let spec = cfg.spde_spec().unwrap();
        assert_eq!(spec.n_space, 4);
        assert!((spec.rho_u - 0.2).abs() < 1e-15);
    }
}
