//! JSON run configuration.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::SolverConfig;
use crate::static_solver::StaticGuess;
use crate::systems::{
    circular_rate, make_kepler, make_rigid_body, make_rotors, KeplerParams, ReducedOcp, RigidBodyParams, RotorsParams,
};
pub use crate::turnpike::FitWindows;
use crate::turnpike::ZERO_TOL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Kepler,
    RigidBody,
    Rotors,
}

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Problem::Kepler => "kepler",
            Problem::RigidBody => "rigid_body",
            Problem::Rotors => "rotors",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub zero_tol: f64,
    pub windows: FitWindows,
    /// Include `‖p_y − p̄_y‖` in the reduced deviation; defaults to true
    /// except for rotors.
    pub include_adjoint: Option<bool>,
    /// Plateau threshold for the turnpike verdict; 1e-3 for Kepler and 1e-2
    /// otherwise when absent.
    pub plateau_tol: Option<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            zero_tol: ZERO_TOL,
            windows: FitWindows::default(),
            include_adjoint: None,
            plateau_tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub svg: bool,
    pub seed: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            svg: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kepler: Option<KeplerParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rigid_body: Option<RigidBodyParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotors: Option<RotorsParams>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn new(problem: Problem) -> Self {
        Self {
            problem,
            kepler: None,
            rigid_body: None,
            rotors: None,
            solver: SolverConfig::default(),
            analysis: AnalysisConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Parses and validates a configuration document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let stray = [
            ("kepler", self.kepler.is_some(), Problem::Kepler),
            ("rigid_body", self.rigid_body.is_some(), Problem::RigidBody),
            ("rotors", self.rotors.is_some(), Problem::Rotors),
        ];
        for (name, present, owner) in stray {
            if present && owner != self.problem {
                return Err(Error::InvalidConfig(format!(
                    "section `{name}` given for problem `{}`",
                    self.problem.name()
                )));
            }
        }
        match self.problem {
            Problem::Kepler => self.kepler_params().validate()?,
            Problem::RigidBody => self.rigid_body_params().validate()?,
            Problem::Rotors => self.rotors_params().validate()?,
        }
        self.solver.validate()?;
        if let Some(u) = &self.solver.init_control {
            let m = 3 - usize::from(self.problem == Problem::Kepler);
            if u.len() != m {
                return Err(Error::InvalidConfig(format!(
                    "solver.init_control has {} entries, expected {m}",
                    u.len()
                )));
            }
        }
        if !(self.analysis.zero_tol.is_finite() && self.analysis.zero_tol > 0.0) {
            return Err(Error::InvalidConfig("analysis.zero_tol must be > 0".into()));
        }
        if let Some(t) = self.analysis.plateau_tol {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidConfig("analysis.plateau_tol must be > 0".into()));
            }
        }
        self.analysis.windows.validate()
    }

    pub fn kepler_params(&self) -> KeplerParams {
        self.kepler.clone().unwrap_or_default()
    }

    pub fn rigid_body_params(&self) -> RigidBodyParams {
        self.rigid_body.clone().unwrap_or_default()
    }

    pub fn rotors_params(&self) -> RotorsParams {
        self.rotors.clone().unwrap_or_default()
    }

    pub fn build_ocp(&self) -> Result<ReducedOcp> {
        match self.problem {
            Problem::Kepler => make_kepler(&self.kepler_params()),
            Problem::RigidBody => make_rigid_body(&self.rigid_body_params()),
            Problem::Rotors => make_rotors(&self.rotors_params()),
        }
    }

    /// Newton starting point on the tracked reference.
    pub fn static_guess(&self) -> StaticGuess {
        match self.problem {
            Problem::Kepler => {
                let p = self.kepler_params();
                StaticGuess::new(
                    DVector::from_vec(vec![p.s_bar, 0.0, circular_rate(p.k, p.s_bar)]),
                    DVector::zeros(2),
                )
            }
            Problem::RigidBody => {
                let p = self.rigid_body_params();
                StaticGuess::new(
                    DVector::from_column_slice(&p.omega_ref),
                    DVector::from_column_slice(&p.u_ref),
                )
            }
            Problem::Rotors => {
                let p = self.rotors_params();
                let mut y = DVector::zeros(6);
                y.fixed_rows_mut::<3>(0).copy_from_slice(&p.omega_ref);
                StaticGuess::new(y, DVector::zeros(3))
            }
        }
    }

    pub fn include_adjoint(&self) -> bool {
        self.analysis.include_adjoint.unwrap_or(self.problem != Problem::Rotors)
    }

    pub fn plateau_tol(&self) -> f64 {
        self.analysis.plateau_tol.unwrap_or(match self.problem {
            Problem::Kepler => 1e-3,
            _ => 1e-2,
        })
    }
}
