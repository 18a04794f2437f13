//! Independent reference implementations shared by the integration tests.
//! They deliberately avoid the library's filter, matcher and index code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use cdrloc::geo::{haversine, GeoPoint, LocalPoint, LocalProjection, Segment};
use cdrloc::ingest::{CellCoverage, CoverageMap, CoverageObservation};
use cdrloc::mapmatch::{MatchConfig, MatchPolicy};
use cdrloc::skf::{MotionModel, Observation, SkfConfig, Step};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SymmetricEigen, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = DMatrix<f64>;
pub type Vect = DVector<f64>;

/// Textbook transition and process noise for one model and time step.
pub fn dynamics(model: MotionModel, dt: f64, cfg: &SkfConfig) -> (Mat, Mat) {
    let mut f = Mat::identity(4, 4);
    let mut q = Mat::zeros(4, 4);
    if dt <= 0.0 {
        return (f, q);
    }
    let qdt = dt.min(cfg.gap_cap_s);
    match model {
        MotionModel::Move => {
            f[(0, 2)] = dt;
            f[(1, 3)] = dt;
            for (p, v) in [(0, 2), (1, 3)] {
                q[(p, p)] = cfg.q_move * qdt.powi(3) / 3.0;
                q[(p, v)] = cfg.q_move * qdt.powi(2) / 2.0;
                q[(v, p)] = q[(p, v)];
                q[(v, v)] = cfg.q_move * qdt;
            }
        }
        MotionModel::Stay => {
            q[(0, 0)] = cfg.q_stay * qdt;
            q[(1, 1)] = cfg.q_stay * qdt;
            q[(2, 2)] = cfg.velocity_eps;
            q[(3, 3)] = cfg.velocity_eps;
        }
    }
    (f, q)
}

fn h() -> Mat {
    Mat::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
}

fn obs_parts(o: &Observation) -> (Vect, Mat) {
    (
        Vect::from_column_slice(o.z.as_slice()),
        Mat::from_column_slice(2, 2, o.r.as_slice()),
    )
}

/// Seed: the first observation as position, zero velocity with `v_max` spread.
pub fn seed(first: &Observation, v_max: f64) -> (Vect, Mat) {
    let (z, r) = obs_parts(first);
    let mut x = Vect::zeros(4);
    x[0] = z[0];
    x[1] = z[1];
    let mut p = Mat::zeros(4, 4);
    p.view_mut((0, 0), (2, 2)).copy_from(&r);
    p[(2, 2)] = v_max * v_max;
    p[(3, 3)] = v_max * v_max;
    (x, p)
}

fn log_gauss(nu: &Vect, s: &Mat) -> f64 {
    let inv = s.clone().try_inverse().expect("invertible innovation");
    let maha = (nu.transpose() * inv * nu)[(0, 0)];
    -0.5 * (maha + s.determinant().ln() + 2.0 * (2.0 * std::f64::consts::PI).ln())
}

/// Predict + standard-form update; returns the posterior and the innovation log-likelihood.
fn kf_step(x: &Vect, p: &Mat, f: &Mat, q: &Mat, o: &Observation) -> (Vect, Mat, f64, Vect, Mat) {
    let (z, r) = obs_parts(o);
    let h = h();
    let xp = f * x;
    let pp = f * p * f.transpose() + q;
    let s = &h * &pp * h.transpose() + r;
    let nu = z - &h * &xp;
    let ll = log_gauss(&nu, &s);
    let k = &pp * h.transpose() * s.try_inverse().unwrap();
    let x_new = &xp + &k * nu;
    let p_new = (Mat::identity(4, 4) - &k * &h) * &pp;
    (x_new, p_new, ll, xp, pp)
}

pub struct KfRts {
    pub filtered: Vec<(Vect, Mat)>,
    pub smoothed: Vec<(Vect, Mat)>,
}

/// Classic single-model Kalman filter followed by an RTS smoother.
pub fn kf_rts(steps: &[Step], model: MotionModel, cfg: &SkfConfig) -> KfRts {
    let (mut x, mut p) = seed(&steps[0].obs, cfg.v_max);
    let mut filtered = vec![(x.clone(), p.clone())];
    let mut predicted = vec![(x.clone(), p.clone())];
    let mut fs = vec![Mat::identity(4, 4)];
    for s in &steps[1..] {
        let (f, q) = dynamics(model, s.dt, cfg);
        let (xn, pn, _, xp, pp) = kf_step(&x, &p, &f, &q, &s.obs);
        x = xn;
        p = pn;
        filtered.push((x.clone(), p.clone()));
        predicted.push((xp, pp));
        fs.push(f);
    }
    let n = steps.len();
    let mut smoothed = vec![filtered[n - 1].clone(); n];
    for t in (0..n - 1).rev() {
        let (xf, pf) = &filtered[t];
        let (xp, pp) = &predicted[t + 1];
        let g = pf * fs[t + 1].transpose() * pp.clone().try_inverse().unwrap();
        let (xs, ps) = &smoothed[t + 1];
        smoothed[t] = (xf + &g * (xs - xp), pf + &g * (ps - pp) * g.transpose());
    }
    KfRts { filtered, smoothed }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log joint weight of a model sequence over the first `seq.len()` steps.
fn sequence_log_weight(steps: &[Step], seq: &[usize], models: &[MotionModel], tz: &[Vec<f64>], cfg: &SkfConfig) -> f64 {
    let (mut x, mut p) = seed(&steps[0].obs, cfg.v_max);
    let mut lw = (1.0 / models.len() as f64).ln();
    for t in 1..seq.len() {
        let (f, q) = dynamics(models[seq[t]], steps[t].dt, cfg);
        let (xn, pn, ll, _, _) = kf_step(&x, &p, &f, &q, &steps[t].obs);
        lw += tz[seq[t - 1]][seq[t]].ln() + ll;
        x = xn;
        p = pn;
    }
    lw
}

fn sequences(n: usize, len: usize) -> Vec<Vec<usize>> {
    (0..n.pow(len as u32))
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let d = code % n;
                    code /= n;
                    d
                })
                .collect()
        })
        .collect()
}

/// Exact model posteriors by enumerating every model sequence.
/// Returns `(filtered[t][j], smoothed[t][j])`.
pub fn exact_model_posteriors(steps: &[Step], cfg: &SkfConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let models = &cfg.models;
    let n = models.len();
    let tz = cdrloc::skf::default_transition(n, cfg.tz_diagonal);
    let len = steps.len();
    let marginal = |upto: usize, at: usize| -> Vec<f64> {
        let seqs = sequences(n, upto);
        let lw: Vec<f64> = seqs
            .iter()
            .map(|s| sequence_log_weight(steps, s, models, &tz, cfg))
            .collect();
        let norm = log_sum_exp(&lw);
        let mut out = vec![0.0; n];
        for (s, w) in seqs.iter().zip(&lw) {
            out[s[at]] += (w - norm).exp();
        }
        out
    };
    let filtered = (0..len).map(|t| marginal(t + 1, t)).collect();
    let smoothed = (0..len).map(|t| marginal(len, t)).collect();
    (filtered, smoothed)
}

/// Random observation sequence from a random Move/Stay path.
pub fn random_steps(rng: &mut ChaCha8Rng, len: usize) -> Vec<Step> {
    let mut pos = Vector2::new(rng.random_range(-2000.0..2000.0), rng.random_range(-2000.0..2000.0));
    let mut vel = Vector2::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
    (0..len)
        .map(|t| {
            let dt = if t == 0 { 0.0 } else { rng.random_range(5.0..400.0) };
            if rng.random_bool(0.5) {
                pos += vel * dt;
            } else {
                vel = Vector2::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
            }
            let sigma: f64 = rng.random_range(50.0..1500.0);
            let z = pos + Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * sigma;
            Step {
                dt,
                obs: Observation {
                    z,
                    r: Matrix2::identity() * sigma * sigma,
                },
            }
        })
        .collect()
}

pub fn symmetric_psd(m: &Matrix4<f64>, tol: f64) -> bool {
    if (m - m.transpose()).abs().max() > tol {
        return false;
    }
    SymmetricEigen::new(*m).eigenvalues.min() >= -tol
}

pub fn sums_to_one(p: &[f64], tol: f64) -> bool {
    (p.iter().sum::<f64>() - 1.0).abs() <= tol && p.iter().all(|v| *v >= 0.0)
}

/// Brute-force nearest road: scans every segment, doubling the radius under
/// `Expand`. Returns `(segment id, haversine distance)`.
pub fn linear_scan_match(
    segments: &[Segment],
    projection: &LocalProjection,
    p: LocalPoint,
    cfg: &MatchConfig,
) -> Option<(usize, f64)> {
    let doublings = match cfg.policy {
        MatchPolicy::Expand => cfg.max_doublings,
        MatchPolicy::Strict => 0,
    };
    let p_geo = projection.from_local(p);
    let mut r = cfg.radius_m;
    for attempt in 0..=doublings {
        if attempt > 0 {
            r *= 2.0;
        }
        let mut best: Option<(usize, f64)> = None;
        for (id, s) in segments.iter().enumerate() {
            let near = |q: &LocalPoint| ((q.x - p.x).powi(2) + (q.y - p.y).powi(2)).sqrt() <= r;
            if !near(&s.a) && !near(&s.b) {
                continue;
            }
            let (dx, dy) = (s.b.x - s.a.x, s.b.y - s.a.y);
            let t = (((p.x - s.a.x) * dx + (p.y - s.a.y) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let c = LocalPoint::new(s.a.x + t * dx, s.a.y + t * dy);
            let d = haversine(p_geo, projection.from_local(c));
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((id, d));
            }
        }
        if best.is_some() {
            return best;
        }
    }
    None
}

/// Random windows of 2 to `max_len` consecutive events cut from simulated
/// trajectories, observed through the bare (unextended) coverage circles.
pub fn simulated_windows(count: usize, max_len: usize, seed: u64) -> Vec<Vec<Step>> {
    use cdrloc::pipeline::{Inputs, PipelineConfig};
    let mut cfg = PipelineConfig::default();
    cfg.sim.seed = seed;
    let out = cdrloc::sim::simulate(&cfg.sim).expect("simulation");
    let inputs = Inputs::from_sim(&out, &cfg).expect("inputs");
    let map = inputs.coverage_with(None);
    let runs: Vec<Vec<Step>> = inputs
        .trajectories
        .iter()
        .filter(|t| t.events.len() >= max_len)
        .map(|t| cdrloc::skf::skf_filter(t, &map, &cfg.skf).expect("filter").steps)
        .collect();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let run = &runs[rng.random_range(0..runs.len())];
            let len = rng.random_range(2..=max_len);
            let start = rng.random_range(0..=run.len() - len);
            let mut w = run[start..start + len].to_vec();
            w[0].dt = 0.0;
            w
        })
        .collect()
}

/// Omni cells scattered over a 10 km square with random base radii.
pub fn random_map(rng: &mut ChaCha8Rng, cells: usize) -> CoverageMap {
    let projection = LocalProjection::new(GeoPoint::new(58.38, 26.72).unwrap());
    let cells = (0..cells)
        .map(|i| {
            let c = LocalPoint::new(rng.random_range(-5000.0..5000.0), rng.random_range(-5000.0..5000.0));
            let id = format!("C{i:02}");
            let cell = CellCoverage {
                cell_id: id.clone(),
                antenna: projection.from_local(c),
                azimuth: None,
                polygon: Vec::new(),
                circle_center: c,
                base_radius: rng.random_range(300.0..2500.0),
                extension: 0.0,
            };
            (id, cell)
        })
        .collect::<BTreeMap<_, _>>();
    CoverageMap { projection, cells }
}

/// Observations whose distance to the serving centre is up to 1.8 base radii.
pub fn random_observations(rng: &mut ChaCha8Rng, map: &CoverageMap, n: usize) -> Vec<CoverageObservation> {
    let ids: Vec<&String> = map.cells.keys().collect();
    (0..n)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            let c = &map.cells[id];
            let reach = c.base_radius * rng.random_range(0.0..1.8);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let p = LocalPoint::new(c.circle_center.x + reach * a.cos(), c.circle_center.y + reach * a.sin());
            CoverageObservation {
                cell_id: id.clone(),
                location: map.projection.from_local(p),
            }
        })
        .collect()
}
