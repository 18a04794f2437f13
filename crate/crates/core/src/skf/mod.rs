//! Two-model (Move/Stay) switching Kalman filter and smoother.
//!
//! The hidden state is `(x, y, vx, vy)` in the local metric frame. A discrete
//! model variable picks the transition at every step: constant velocity for
//! Move, identity for Stay. Mixture growth is bounded with GPB2 collapsing
//! (one Gaussian per current model, moment-matched over the previous model).

mod kalman;
mod switching;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CellCoverage, EpisodeLabel};

pub use kalman::{kf_predict, kf_update, observation_matrix, rts_step};
pub use switching::{
    skf_filter, skf_smooth, FilterPass, FilterRun, FilteredStep, SmoothedStep, Step, StepResult,
    SwitchingFilter,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkfError {
    #[error("unknown cell {0}")]
    UnknownCell(String),
    #[error("non-finite state encountered")]
    NonFiniteState,
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("invalid model bank: {0}")]
    InvalidModelBank(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

impl StateEstimate {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.mean[0], self.mean[1])
    }
}

/// Observation of the position: effective cell-circle centre and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub z: Vector2<f64>,
    pub r: Matrix2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MotionModel {
    Move,
    Stay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// `R = ((r + p) / 2)² · I` from the cell's effective radius.
    Cell,
    /// `R = σ² · I` with a constant σ shared by all cells.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkfConfig {
    /// Move white-acceleration spectral density, m²/s³.
    pub q_move: f64,
    /// Stay position diffusion, m²/s.
    pub q_stay: f64,
    /// Constant velocity variance added under Stay.
    pub velocity_eps: f64,
    /// Initial velocity standard deviation, m/s.
    pub v_max: f64,
    /// Probability of keeping the previous model.
    pub tz_diagonal: f64,
    pub threshold: f64,
    /// Time step cap (seconds) applied to process-noise growth.
    pub gap_cap_s: f64,
    pub observation_mode: ObservationMode,
    pub fixed_sigma: f64,
    pub models: Vec<MotionModel>,
}

impl Default for SkfConfig {
    fn default() -> Self {
        Self {
            q_move: 0.5,
            q_stay: 0.1,
            velocity_eps: 1e-6,
            v_max: 40.0,
            tz_diagonal: 0.8,
            threshold: 0.5,
            gap_cap_s: 6.0 * 3600.0,
            observation_mode: ObservationMode::Cell,
            fixed_sigma: 1.2,
            models: vec![MotionModel::Move, MotionModel::Stay],
        }
    }
}

/// Motion models, their noise parameters and the model-transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBank {
    pub models: Vec<MotionModel>,
    /// `transition[i][j] = P(S_t = j | S_{t−1} = i)`.
    pub transition: Vec<Vec<f64>>,
    pub q_move: f64,
    pub q_stay: f64,
    pub velocity_eps: f64,
    pub gap_cap_s: f64,
}

impl Default for ModelBank {
    fn default() -> Self {
        Self::from_config(&SkfConfig::default()).expect("default bank is valid")
    }
}

impl ModelBank {
    pub fn from_config(config: &SkfConfig) -> Result<Self, SkfError> {
        let n = config.models.len();
        if n == 0 {
            return Err(SkfError::InvalidModelBank("no models".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !config.models.iter().all(|m| seen.insert(*m)) {
            return Err(SkfError::InvalidModelBank("duplicate model".into()));
        }
        if !(config.tz_diagonal > 0.0 && config.tz_diagonal < 1.0) && n > 1 {
            return Err(SkfError::InvalidModelBank(format!(
                "transition diagonal {} outside (0, 1)",
                config.tz_diagonal
            )));
        }
        Ok(Self {
            models: config.models.clone(),
            transition: default_transition(n, config.tz_diagonal),
            q_move: config.q_move,
            q_stay: config.q_stay,
            velocity_eps: config.velocity_eps,
            gap_cap_s: config.gap_cap_s,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn index_of(&self, model: MotionModel) -> Option<usize> {
        self.models.iter().position(|m| *m == model)
    }

    pub fn transition(&self, model: MotionModel, dt: f64) -> Matrix4<f64> {
        let mut f = Matrix4::identity();
        if model == MotionModel::Move {
            f[(0, 2)] = dt;
            f[(1, 3)] = dt;
        }
        f
    }

    /// Process noise for a step of `dt` seconds; `dt` is capped at `gap_cap_s`.
    pub fn process_noise(&self, model: MotionModel, dt: f64) -> Matrix4<f64> {
        if dt <= 0.0 {
            return Matrix4::zeros();
        }
        let dt = dt.min(self.gap_cap_s);
        let mut q = Matrix4::zeros();
        match model {
            MotionModel::Move => {
                let q = &mut q;
                let (a, b, c) = (dt.powi(3) / 3.0, dt * dt / 2.0, dt);
                for axis in 0..2 {
                    let (p, v) = (axis, axis + 2);
                    q[(p, p)] = a * self.q_move;
                    q[(p, v)] = b * self.q_move;
                    q[(v, p)] = b * self.q_move;
                    q[(v, v)] = c * self.q_move;
                }
            }
            MotionModel::Stay => {
                q[(0, 0)] = self.q_stay * dt;
                q[(1, 1)] = self.q_stay * dt;
                q[(2, 2)] = self.velocity_eps;
                q[(3, 3)] = self.velocity_eps;
            }
        }
        q
    }
}

/// Model-transition matrix with `diag` on the diagonal and the rest spread evenly.
pub fn default_transition(n: usize, diag: f64) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![1.0]];
    }
    let off = (1.0 - diag) / (n - 1) as f64;
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { diag } else { off }).collect())
        .collect()
}

/// Observation derived from a cell's (possibly extended) coverage circle.
pub fn build_observation(cell: &CellCoverage, config: &SkfConfig) -> Observation {
    let var = match config.observation_mode {
        ObservationMode::Cell => (cell.effective_radius() / 2.0).powi(2),
        ObservationMode::Fixed => config.fixed_sigma * config.fixed_sigma,
    };
    Observation {
        z: Vector2::new(cell.circle_center.x, cell.circle_center.y),
        r: Matrix2::identity() * var,
    }
}

/// STAY iff the smoothed Stay probability reaches `threshold` (ties go to STAY).
pub fn classify_episodes(results: &[StepResult], threshold: f64) -> Vec<EpisodeLabel> {
    results
        .iter()
        .map(|r| classify_probability(r.p_stay_smoothed, threshold))
        .collect()
}

pub fn classify_probability(p_stay: f64, threshold: f64) -> EpisodeLabel {
    if p_stay >= threshold {
        EpisodeLabel::Stay
    } else {
        EpisodeLabel::Move
    }
}
