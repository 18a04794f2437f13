//! Coverage circles and radius-extension calibration.
//!
//! Every cell polygon is replaced by an enclosing circle `(x, r)`. A per-cell
//! extension `p` is then learned from GPS fixes recorded while connected to
//! the cell by minimising
//!
//! ```text
//! f(p) = Σ_i p_i² + w · Σ_(j,y) min(0, r_j + p_j − |x_j − y|)²
//! ```
//!
//! The objective is separable per cell and convex, so a quasi-Newton descent
//! from `p = 0` converges quickly.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint, LocalPoint, LocalProjection};
use crate::ingest::{CellCoverage, CoverageMap, CoverageObservation};

/// Non-coverage weight of the penalty.
pub const DEFAULT_WEIGHT: f64 = 10.0;
/// Effective radii are never allowed below this many meters.
pub const MIN_EFFECTIVE_RADIUS_M: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoverageError {
    #[error("observation references unknown cell {0}")]
    UnknownCell(String),
    #[error("extension vector has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value at iteration {iteration}: penalty={penalty}, gradient norm={grad_norm}")]
    NonFiniteEncountered {
        iteration: usize,
        penalty: f64,
        grad_norm: f64,
    },
    #[error("need at least one cell")]
    NoCells,
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Circle enclosing a coverage polygon, biased along the sector bearing.
///
/// The centre is the antenna moved `shift_factor × max(antenna→vertex)` along
/// the azimuth (no move for omnidirectional sites); the radius is the largest
/// centre→vertex distance, so every vertex lies on or inside the circle.
pub fn enclosing_circle(
    antenna: &GeoPoint,
    azimuth: Option<f64>,
    polygon: &[GeoPoint],
    projection: &LocalProjection,
    shift_factor: f64,
) -> Result<(LocalPoint, f64), GeoError> {
    let polygon = crate::geo::strip_closing_vertex(polygon);
    if polygon.len() < 3 {
        return Err(GeoError::DegeneratePolygon(polygon.len()));
    }
    let a = projection.to_local(*antenna)?;
    let verts: Vec<LocalPoint> = polygon
        .iter()
        .map(|v| projection.to_local(*v))
        .collect::<Result<_, _>>()?;
    let reach = verts.iter().map(|v| v.distance(&a)).fold(0.0, f64::max);
    let center = match azimuth {
        Some(az) => {
            let bearing = az.to_radians();
            let shift = shift_factor * reach;
            LocalPoint::new(a.x + shift * bearing.sin(), a.y + shift * bearing.cos())
        }
        None => a,
    };
    let radius = verts.iter().map(|v| v.distance(&center)).fold(0.0, f64::max);
    if !(radius > 0.0) {
        return Err(GeoError::DegeneratePolygon(polygon.len()));
    }
    Ok((center, radius))
}

/// Recomputes a parsed cell's circle (e.g. after changing the shift factor).
pub fn cell_enclosing_circle(
    cell: &CellCoverage,
    projection: &LocalProjection,
    shift_factor: f64,
) -> Result<(LocalPoint, f64), GeoError> {
    enclosing_circle(&cell.antenna, cell.azimuth, &cell.polygon, projection, shift_factor)
}

/// Per-cell extensions in the cell order of the coverage map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionVector {
    pub cell_ids: Vec<String>,
    pub values: Vec<f64>,
}

impl ExtensionVector {
    pub fn zeros(map: &CoverageMap) -> Self {
        Self {
            cell_ids: map.cells.keys().cloned().collect(),
            values: vec![0.0; map.len()],
        }
    }

    pub fn get(&self, cell_id: &str) -> Option<f64> {
        self.cell_ids
            .iter()
            .position(|c| c == cell_id)
            .map(|i| self.values[i])
    }

    /// Writes the extensions into `map`; cells not listed are reset to zero.
    pub fn apply(&self, map: &mut CoverageMap) {
        let lookup: BTreeMap<&str, f64> = self
            .cell_ids
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().copied())
            .collect();
        for (id, cell) in map.cells.iter_mut() {
            cell.extension = lookup.get(id.as_str()).copied().unwrap_or(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub initial_penalty: f64,
    pub final_penalty: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub covered_fraction_before: f64,
    pub covered_fraction_after: f64,
    pub observations: usize,
    /// Penalty after every accepted step, starting with the initial value.
    pub penalty_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub weight: f64,
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    pub history: usize,
    pub azimuth_shift: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            weight: DEFAULT_WEIGHT,
            max_iterations: 500,
            grad_tolerance: 1e-6,
            history: 10,
            azimuth_shift: 0.5,
        }
    }
}

/// Penalty objective with observations pre-resolved to cell indices.
#[derive(Debug, Clone)]
pub struct CoverageProblem {
    pub cell_ids: Vec<String>,
    pub base_radii: Vec<f64>,
    /// Distance from each cell's circle centre to each of its observations.
    pub distances: Vec<Vec<f64>>,
    pub weight: f64,
}

impl CoverageProblem {
    pub fn new(
        map: &CoverageMap,
        observations: &[CoverageObservation],
        weight: f64,
    ) -> Result<Self, CoverageError> {
        let index: BTreeMap<&str, usize> = map
            .cells
            .keys()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect();
        let cells: Vec<&CellCoverage> = map.cells.values().collect();
        let mut distances = vec![Vec::new(); cells.len()];
        for o in observations {
            let &i = index
                .get(o.cell_id.as_str())
                .ok_or_else(|| CoverageError::UnknownCell(o.cell_id.clone()))?;
            let y = map.projection.to_local(o.location)?;
            distances[i].push(cells[i].circle_center.distance(&y));
        }
        Ok(Self {
            cell_ids: map.cells.keys().cloned().collect(),
            base_radii: cells.iter().map(|c| c.base_radius).collect(),
            distances,
            weight,
        })
    }

    pub fn dim(&self) -> usize {
        self.base_radii.len()
    }

    fn check_dim(&self, p: &[f64]) -> Result<(), CoverageError> {
        if p.len() != self.dim() {
            return Err(CoverageError::DimensionMismatch {
                expected: self.dim(),
                got: p.len(),
            });
        }
        Ok(())
    }

    /// Signed coverage margin `r + p − |x − y|`.
    fn margins<'a>(&'a self, i: usize, p_i: f64) -> impl Iterator<Item = f64> + 'a {
        let r = self.base_radii[i] + p_i;
        self.distances[i].iter().map(move |dist| r - dist)
    }

    pub fn penalty(&self, p: &[f64]) -> f64 {
        (0..self.dim())
            .map(|i| {
                let miss: f64 = self.margins(i, p[i]).map(|d| d.min(0.0).powi(2)).sum();
                p[i] * p[i] + self.weight * miss
            })
            .sum()
    }

    /// Analytic gradient; at the kink `d = 0` the left derivative (zero) is used.
    pub fn gradient(&self, p: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let miss: f64 = self.margins(i, p[i]).filter(|d| *d < 0.0).sum();
                2.0 * p[i] + 2.0 * self.weight * miss
            })
            .collect()
    }

    pub fn covered_fraction(&self, p: &[f64]) -> f64 {
        let total: usize = self.distances.iter().map(Vec::len).sum();
        if total == 0 {
            return 1.0;
        }
        let covered: usize = (0..self.dim())
            .map(|i| self.margins(i, p[i]).filter(|d| *d >= 0.0).count())
            .sum();
        covered as f64 / total as f64
    }

    fn lower_bounds(&self) -> Vec<f64> {
        self.base_radii
            .iter()
            .map(|r| MIN_EFFECTIVE_RADIUS_M - r)
            .collect()
    }
}

pub fn penalty(
    p: &ExtensionVector,
    map: &CoverageMap,
    observations: &[CoverageObservation],
    weight: f64,
) -> Result<f64, CoverageError> {
    let problem = CoverageProblem::new(map, observations, weight)?;
    problem.check_dim(&p.values)?;
    Ok(problem.penalty(&p.values))
}

pub fn penalty_gradient(
    p: &ExtensionVector,
    map: &CoverageMap,
    observations: &[CoverageObservation],
    weight: f64,
) -> Result<Vec<f64>, CoverageError> {
    let problem = CoverageProblem::new(map, observations, weight)?;
    problem.check_dim(&p.values)?;
    Ok(problem.gradient(&p.values))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Projected gradient: zero out components that push against an active bound.
fn projected_gradient(p: &[f64], g: &[f64], lower: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(g)
        .zip(lower)
        .map(|((&pi, &gi), &lo)| if pi <= lo && gi > 0.0 { 0.0 } else { gi })
        .collect()
}

/// Two-loop recursion: returns `-H·g` for the limited-memory inverse Hessian.
fn lbfgs_direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Minimises the coverage penalty from `p = 0` with bound-projected L-BFGS.
///
/// Stops when the projected gradient norm drops below
/// `grad_tolerance · max(1, |f|)` or after `max_iterations`.
pub fn optimize_extensions(
    map: &CoverageMap,
    observations: &[CoverageObservation],
    config: &OptimizerConfig,
) -> Result<(ExtensionVector, OptimizationReport), CoverageError> {
    if map.is_empty() {
        return Err(CoverageError::NoCells);
    }
    let problem = CoverageProblem::new(map, observations, config.weight)?;
    let (p, report) = minimize(&problem, config)?;
    Ok((
        ExtensionVector {
            cell_ids: problem.cell_ids.clone(),
            values: p,
        },
        report,
    ))
}

pub fn minimize(
    problem: &CoverageProblem,
    config: &OptimizerConfig,
) -> Result<(Vec<f64>, OptimizationReport), CoverageError> {
    const ARMIJO_C1: f64 = 1e-4;
    const MAX_BACKTRACKS: usize = 60;

    let n = problem.dim();
    let lower = problem.lower_bounds();
    let project = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter().zip(&lower).map(|(x, &lo)| x.max(lo)).collect()
    };

    let mut p = project(vec![0.0; n]);
    let mut f = problem.penalty(&p);
    let mut g = problem.gradient(&p);
    let initial_penalty = f;
    let covered_before = problem.covered_fraction(&p);
    let mut trace = vec![f];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let pg = projected_gradient(&p, &g, &lower);
        let gnorm = norm(&pg);
        if !f.is_finite() || !gnorm.is_finite() {
            return Err(CoverageError::NonFiniteEncountered {
                iteration: iterations,
                penalty: f,
                grad_norm: gnorm,
            });
        }
        if gnorm < config.grad_tolerance * f.abs().max(1.0) {
            converged = true;
            break;
        }
        if iterations >= config.max_iterations {
            break;
        }

        let mut dir = lbfgs_direction(&pg, &history);
        if dot(&dir, &pg) >= 0.0 {
            history.clear();
            dir = pg.iter().map(|v| -v).collect();
        }
        // With no curvature information yet, keep the first trial step modest.
        let mut alpha = if history.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = project(p.iter().zip(&dir).map(|(x, d)| x + alpha * d).collect());
            let step: Vec<f64> = trial.iter().zip(&p).map(|(a, b)| a - b).collect();
            let f_trial = problem.penalty(&trial);
            if f_trial.is_finite() && f_trial < f && f_trial <= f + ARMIJO_C1 * dot(&g, &step) {
                accepted = Some((trial, step, f_trial));
                break;
            }
            alpha *= 0.5;
        }

        let Some((trial, step, f_new)) = accepted else {
            if history.is_empty() {
                // Steepest descent cannot make progress: at a minimum to machine precision.
                converged = gnorm < 1e-3 * f.abs().max(1.0);
                break;
            }
            history.clear();
            continue;
        };

        let g_new = problem.gradient(&trial);
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&step, &y);
        if sy > 1e-12 * norm(&step) * norm(&y) {
            history.push_back((step, y, 1.0 / sy));
            if history.len() > config.history.max(1) {
                history.pop_front();
            }
        }
        p = trial;
        f = f_new;
        g = g_new;
        trace.push(f);
        iterations += 1;
    }

    let grad_norm = norm(&projected_gradient(&p, &g, &lower));
    let report = OptimizationReport {
        initial_penalty,
        final_penalty: f,
        iterations,
        grad_norm,
        converged,
        covered_fraction_before: covered_before,
        covered_fraction_after: problem.covered_fraction(&p),
        observations: problem.distances.iter().map(Vec::len).sum(),
        penalty_trace: trace,
    };
    Ok((p, report))
}
