//! GPB2 filtering and the matching backward smoothing pass.

use nalgebra::{Matrix4, Vector4};

use super::kalman::{kf_predict, kf_update, observation_matrix, rts_step, symmetrize4};
use super::{build_observation, ModelBank, MotionModel, Observation, SkfConfig, SkfError, StateEstimate};
use crate::ingest::{CoverageMap, Trajectory};

/// One observation and the time elapsed since the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub dt: f64,
    pub obs: Observation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredStep {
    /// `M_{t|t}` per model.
    pub probs: Vec<f64>,
    pub per_model: Vec<StateEstimate>,
    /// Probability-weighted mixture of the per-model Gaussians.
    pub combined: StateEstimate,
    /// `branch[i][j] = P(S_{t−1} = i, S_t = j | y_{1:t})`; empty for the seeding step.
    pub branch: Vec<Vec<f64>>,
    /// Posterior of each `(i → j)` branch before collapsing; `None` where the
    /// branch has zero prior weight.
    pub branch_states: Vec<Vec<Option<StateEstimate>>>,
    /// `log p(y_t | y_{1:t−1})`; zero for the seeding step.
    pub log_likelihood: f64,
    pub gap_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterPass {
    pub steps: Vec<FilteredStep>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedStep {
    /// `M_{t|T}` per model.
    pub probs: Vec<f64>,
    pub per_model: Vec<StateEstimate>,
    pub combined: StateEstimate,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Renormalizes so the entries sum to one; also clears rounding noise below zero.
fn normalized(mut p: Vec<f64>) -> Vec<f64> {
    for v in p.iter_mut() {
        *v = v.max(0.0);
    }
    let total: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= total;
    }
    p
}

/// Moment-matched single Gaussian of a weighted mixture (weights sum to one).
fn collapse(weights: &[f64], components: &[&StateEstimate]) -> StateEstimate {
    let mean: Vector4<f64> = weights
        .iter()
        .zip(components)
        .fold(Vector4::zeros(), |acc, (w, c)| acc + c.mean * *w);
    let cov: Matrix4<f64> = weights
        .iter()
        .zip(components)
        .fold(Matrix4::zeros(), |acc, (w, c)| {
            let d = c.mean - mean;
            acc + (c.cov + d * d.transpose()) * *w
        });
    StateEstimate {
        mean,
        cov: symmetrize4(&cov),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingFilter {
    pub bank: ModelBank,
    pub v_max: f64,
}

impl SwitchingFilter {
    pub fn new(bank: ModelBank, v_max: f64) -> Self {
        Self { bank, v_max }
    }

    pub fn from_config(config: &SkfConfig) -> Result<Self, SkfError> {
        Ok(Self::new(ModelBank::from_config(config)?, config.v_max))
    }

    /// Seed state: mean at the first observation, zero velocity.
    pub fn initial_state(&self, obs: &Observation) -> StateEstimate {
        let mut cov = Matrix4::zeros();
        cov.fixed_view_mut::<2, 2>(0, 0).copy_from(&obs.r);
        cov[(2, 2)] = self.v_max * self.v_max;
        cov[(3, 3)] = self.v_max * self.v_max;
        StateEstimate {
            mean: Vector4::new(obs.z[0], obs.z[1], 0.0, 0.0),
            cov,
        }
    }

    fn dynamics(&self, model: MotionModel, dt: f64) -> (Matrix4<f64>, Matrix4<f64>) {
        (self.bank.transition(model, dt), self.bank.process_noise(model, dt))
    }

    /// Forward GPB2 pass. The first step seeds the state and carries a uniform
    /// model prior; later steps branch over every (previous, next) model pair.
    pub fn filter(&self, steps: &[Step]) -> Result<FilterPass, SkfError> {
        let first = steps.first().ok_or(SkfError::EmptyTrajectory)?;
        let n = self.bank.len();
        let h = observation_matrix();
        let seed = self.initial_state(&first.obs);
        let prior = vec![1.0 / n as f64; n];
        let mut out = vec![FilteredStep {
            combined: collapse(&prior, &vec![&seed; n]),
            per_model: vec![seed; n],
            probs: prior,
            branch: Vec::new(),
            branch_states: Vec::new(),
            log_likelihood: 0.0,
            gap_clamped: false,
        }];
        let mut total_ll = 0.0;

        for step in &steps[1..] {
            let prev = out.last().expect("seeded");
            let dt = step.dt.max(0.0);
            // log weight and posterior of branch (i → j)
            let mut log_w = vec![vec![f64::NEG_INFINITY; n]; n];
            let mut branch: Vec<Vec<Option<StateEstimate>>> = vec![vec![None; n]; n];
            for (j, &model) in self.bank.models.iter().enumerate() {
                let (f, q) = self.dynamics(model, dt);
                for i in 0..n {
                    let prior_w = prev.probs[i] * self.bank.transition[i][j];
                    if prior_w <= 0.0 {
                        continue;
                    }
                    let predicted = if dt > 0.0 {
                        kf_predict(&prev.per_model[i], &f, &q)?
                    } else {
                        prev.per_model[i].clone()
                    };
                    let (posterior, ll) = kf_update(&predicted, &step.obs, &h)?;
                    log_w[i][j] = prior_w.ln() + ll;
                    branch[i][j] = Some(posterior);
                }
            }
            let flat: Vec<f64> = log_w.iter().flatten().copied().collect();
            let norm = log_sum_exp(&flat);
            if !norm.is_finite() {
                return Err(SkfError::NonFiniteState);
            }
            total_ll += norm;

            let branch_w: Vec<Vec<f64>> = log_w
                .iter()
                .map(|row| row.iter().map(|w| (w - norm).exp()).collect())
                .collect();
            let mut probs = vec![0.0; n];
            let mut per_model = Vec::with_capacity(n);
            for j in 0..n {
                let joint: Vec<f64> = (0..n).map(|i| branch_w[i][j]).collect();
                let m_j: f64 = joint.iter().sum();
                probs[j] = m_j;
                let comps: Vec<(f64, &StateEstimate)> = (0..n)
                    .filter_map(|i| branch[i][j].as_ref().map(|s| (joint[i], s)))
                    .collect();
                let state = if m_j > 0.0 {
                    let w: Vec<f64> = comps.iter().map(|(w, _)| w / m_j).collect();
                    let c: Vec<&StateEstimate> = comps.iter().map(|(_, s)| *s).collect();
                    collapse(&w, &c)
                } else {
                    // Model has vanished numerically; keep an unweighted mix so the state stays defined.
                    let c: Vec<&StateEstimate> = comps.iter().map(|(_, s)| *s).collect();
                    collapse(&vec![1.0 / c.len() as f64; c.len()], &c)
                };
                per_model.push(state);
            }
            let probs = normalized(probs);
            let refs: Vec<&StateEstimate> = per_model.iter().collect();
            out.push(FilteredStep {
                combined: collapse(&probs, &refs),
                probs,
                per_model,
                branch: branch_w,
                branch_states: branch,
                log_likelihood: norm,
                gap_clamped: dt > self.bank.gap_cap_s,
            });
        }
        Ok(FilterPass {
            steps: out,
            log_likelihood: total_ll,
        })
    }

    /// `back[j][k] = P(S_t = j | S_{t+1} = k, y_{1:T})`, approximated with a
    /// two-step lookahead.
    ///
    /// Each uncollapsed branch posterior `(j → k)` at `t+1` is propagated
    /// through every model `l` and scored against `y_{t+2}`, which gives
    /// `P(j | k, l, y_{1:t+2})`. That is averaged over the already smoothed
    /// `P(S_{t+2} = l | S_{t+1} = k, y_{1:T})` from `pair_next[k][l]`.
    /// Evidence after `t+2` only reaches `S_t` through the collapsed states.
    /// Next to the end of the sequence only the branch weights are used.
    fn backward_weights(
        &self,
        steps: &[Step],
        pass: &FilterPass,
        t: usize,
        pair_next: Option<&[Vec<f64>]>,
    ) -> Result<Vec<Vec<f64>>, SkfError> {
        let n = self.bank.len();
        let after = &pass.steps[t + 1];
        let mut back = vec![vec![0.0; n]; n];
        let Some(pair_next) = pair_next else {
            for k in 0..n {
                let col = normalized((0..n).map(|j| after.branch[j][k]).collect());
                for j in 0..n {
                    back[j][k] = col[j];
                }
            }
            return Ok(back);
        };
        let h = observation_matrix();
        let step2 = &steps[t + 2];
        let dt2 = step2.dt.max(0.0);
        for k in 0..n {
            let pair_total: f64 = pair_next[k].iter().sum();
            if pair_total <= 0.0 {
                let col = normalized((0..n).map(|j| after.branch[j][k]).collect());
                for j in 0..n {
                    back[j][k] = col[j];
                }
                continue;
            }
            let mut col = vec![0.0; n];
            for (l, &model) in self.bank.models.iter().enumerate() {
                let p_l = pair_next[k][l] / pair_total;
                if p_l <= 0.0 {
                    continue;
                }
                let (f, q) = self.dynamics(model, dt2);
                let mut log_w = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    let Some(b) = after.branch_states[j][k].as_ref() else {
                        continue;
                    };
                    if after.branch[j][k] <= 0.0 {
                        continue;
                    }
                    let predicted = if dt2 > 0.0 { kf_predict(b, &f, &q)? } else { b.clone() };
                    let (_, ll) = kf_update(&predicted, &step2.obs, &h)?;
                    log_w[j] = after.branch[j][k].ln() + ll;
                }
                let norm = log_sum_exp(&log_w);
                if !norm.is_finite() {
                    continue;
                }
                for j in 0..n {
                    col[j] += p_l * (log_w[j] - norm).exp();
                }
            }
            if col.iter().sum::<f64>() <= 0.0 {
                col = (0..n).map(|j| after.branch[j][k]).collect();
            }
            let col = normalized(col);
            for j in 0..n {
                back[j][k] = col[j];
            }
        }
        Ok(back)
    }

    /// Backward pass: per-(j, k) RTS steps under model `k`'s dynamics, weighted
    /// by `P(S_t = j | S_{t+1} = k, y_{1:T}) · M_{t+1|T}(k)` and collapsed per `j`.
    pub fn smooth(&self, steps: &[Step], pass: &FilterPass) -> Result<Vec<SmoothedStep>, SkfError> {
        let len = pass.steps.len();
        if len == 0 || steps.len() != len {
            return Err(SkfError::EmptyTrajectory);
        }
        let n = self.bank.len();
        let last = &pass.steps[len - 1];
        let mut out = vec![SmoothedStep {
            probs: last.probs.clone(),
            per_model: last.per_model.clone(),
            combined: last.combined.clone(),
        }];
        // P(S_{t+1} = k, S_{t+2} = l | y_{1:T}) from the previous iteration
        let mut pair_next: Option<Vec<Vec<f64>>> = None;

        for t in (0..len - 1).rev() {
            let filt = &pass.steps[t];
            let next = out.last().expect("seeded");
            let dt = steps[t + 1].dt.max(0.0);
            let back = self.backward_weights(steps, pass, t, pair_next.as_deref())?;
            pair_next = Some(
                (0..n)
                    .map(|j| (0..n).map(|k| back[j][k] * next.probs[k]).collect())
                    .collect(),
            );

            let mut probs = vec![0.0; n];
            let mut per_model = Vec::with_capacity(n);
            for j in 0..n {
                let mut comps = Vec::with_capacity(n);
                let mut weights = Vec::with_capacity(n);
                for (k, &model) in self.bank.models.iter().enumerate() {
                    let (f, q) = self.dynamics(model, dt);
                    comps.push(rts_step(&filt.per_model[j], &next.per_model[k], &f, &q)?);
                    weights.push(back[j][k] * next.probs[k]);
                }
                let m_j: f64 = weights.iter().sum();
                probs[j] = m_j;
                let refs: Vec<&StateEstimate> = comps.iter().collect();
                let state = if m_j > 0.0 {
                    let w: Vec<f64> = weights.iter().map(|w| w / m_j).collect();
                    collapse(&w, &refs)
                } else {
                    filt.per_model[j].clone()
                };
                per_model.push(state);
            }
            let probs = normalized(probs);
            let refs: Vec<&StateEstimate> = per_model.iter().collect();
            out.push(SmoothedStep {
                combined: collapse(&probs, &refs),
                probs,
                per_model,
            });
        }
        out.reverse();
        Ok(out)
    }
}

/// Filter output for one trajectory, kept together with its inputs so the
/// smoother can run afterwards.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub user: String,
    pub timestamps: Vec<i64>,
    pub cell_ids: Vec<String>,
    pub steps: Vec<Step>,
    pub pass: FilterPass,
    pub filter: SwitchingFilter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub timestamp: i64,
    pub cell_id: String,
    pub filtered_probs: Vec<f64>,
    pub filtered: StateEstimate,
    pub smoothed_probs: Vec<f64>,
    pub smoothed: StateEstimate,
    pub p_stay_filtered: f64,
    pub p_stay_smoothed: f64,
    pub gap_clamped: bool,
}

/// Runs the forward pass over a trajectory using the cells' current extensions.
pub fn skf_filter(
    traj: &Trajectory,
    cells: &CoverageMap,
    config: &SkfConfig,
) -> Result<FilterRun, SkfError> {
    if traj.events.is_empty() {
        return Err(SkfError::EmptyTrajectory);
    }
    let filter = SwitchingFilter::from_config(config)?;
    let mut steps = Vec::with_capacity(traj.events.len());
    let mut prev_ts = traj.events[0].timestamp;
    for ev in &traj.events {
        let cell = cells
            .get(&ev.cell_id)
            .ok_or_else(|| SkfError::UnknownCell(ev.cell_id.clone()))?;
        steps.push(Step {
            dt: (ev.timestamp - prev_ts) as f64,
            obs: build_observation(cell, config),
        });
        prev_ts = ev.timestamp;
    }
    let pass = filter.filter(&steps)?;
    Ok(FilterRun {
        user: traj.user.clone(),
        timestamps: traj.events.iter().map(|e| e.timestamp).collect(),
        cell_ids: traj.events.iter().map(|e| e.cell_id.clone()).collect(),
        steps,
        pass,
        filter,
    })
}

/// Runs the backward pass and merges filtered and smoothed fields per event.
pub fn skf_smooth(run: &FilterRun) -> Result<Vec<StepResult>, SkfError> {
    let smoothed = run.filter.smooth(&run.steps, &run.pass)?;
    let stay = run.filter.bank.index_of(MotionModel::Stay);
    let p_stay = |p: &[f64]| stay.map(|i| p[i]).unwrap_or(0.0);
    Ok(run
        .pass
        .steps
        .iter()
        .zip(smoothed)
        .enumerate()
        .map(|(t, (f, s))| StepResult {
            timestamp: run.timestamps[t],
            cell_id: run.cell_ids[t].clone(),
            p_stay_filtered: p_stay(&f.probs),
            p_stay_smoothed: p_stay(&s.probs),
            filtered_probs: f.probs.clone(),
            filtered: f.combined.clone(),
            smoothed_probs: s.probs,
            smoothed: s.combined,
            gap_clamped: f.gap_clamped,
        })
        .collect())
}
