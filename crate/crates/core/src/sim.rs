//! Seeded synthetic worlds: a hexagonal cell lattice, a perturbed road grid,
//! annotated ground-truth tracks and sparse CDR samplings of them.
//!
//! Every random draw comes from a ChaCha stream selected by purpose (world,
//! truth, sampling, calibration), so the same seed reproduces every output and
//! changing how many CDR events are drawn never perturbs the ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoPoint, LocalPoint, LocalProjection, MAX_PROJECTION_RANGE_M};
use crate::ingest::{CdrRecord, CoverageFeature, CoverageObservation, EpisodeLabel, EventKind, TruthFix};

const STREAM_WORLD: u64 = 1;
const STREAM_TRUTH: u64 = 2;
const STREAM_SAMPLING: u64 = 3;
const STREAM_CALIBRATION: u64 = 4;

const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Geographic centre of the generated extent.
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub n_cells: usize,
    /// Distance between neighbouring antennas, meters.
    pub cell_pitch_m: f64,
    /// Share of cells whose radio reach exceeds their polygon.
    pub strong_cell_fraction: f64,
    /// Reach of a strong cell as a multiple of the hexagon side.
    pub strong_reach_min: f64,
    pub strong_reach_max: f64,
    pub n_users: usize,
    pub duration_s: f64,
    pub start_timestamp: i64,
    /// Stay dwell is `dwell_min_s` plus an exponential with mean `dwell_mean_extra_s`.
    pub dwell_min_s: f64,
    pub dwell_mean_extra_s: f64,
    /// Move legs last a uniform time in `[leg_min_s, leg_max_s]`.
    pub leg_min_s: f64,
    pub leg_max_s: f64,
    pub move_speed_min_mps: f64,
    pub move_speed_max_mps: f64,
    /// Mean CDR events per user per hour (Poisson).
    pub event_rate_per_hour: f64,
    /// Noise added to the reach-normalised distance score when picking a serving cell.
    pub selection_sigma: f64,
    pub road_spacing_m: f64,
    /// Uniform offset applied to each road line as a whole.
    pub road_jitter_m: f64,
    pub road_vertex_spacing_m: f64,
    /// Perpendicular distance from the road to a stay place.
    pub place_offset_min_m: f64,
    pub place_offset_max_m: f64,
    pub building_size_m: f64,
    pub truth_interval_s: f64,
    /// Standard deviation of GPS jitter on Move fixes.
    pub move_jitter_m: f64,
    /// Size of the uniform calibration campaign.
    pub n_observations: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            origin_lat: 58.38,
            origin_lon: 26.72,
            n_cells: 25,
            cell_pitch_m: 2000.0,
            strong_cell_fraction: 0.3,
            strong_reach_min: 1.8,
            strong_reach_max: 2.5,
            n_users: 6,
            duration_s: 30_000.0,
            start_timestamp: 1_700_000_000,
            dwell_min_s: 1200.0,
            dwell_mean_extra_s: 2800.0,
            leg_min_s: 900.0,
            leg_max_s: 2700.0,
            move_speed_min_mps: 4.0,
            move_speed_max_mps: 12.0,
            event_rate_per_hour: 12.0,
            selection_sigma: 0.25,
            road_spacing_m: 3000.0,
            road_jitter_m: 300.0,
            road_vertex_spacing_m: 500.0,
            place_offset_min_m: 200.0,
            place_offset_max_m: 1000.0,
            building_size_m: 30.0,
            truth_interval_s: 10.0,
            move_jitter_m: 3.0,
            n_observations: 2000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if GeoPoint::new(self.origin_lat, self.origin_lon).is_err() {
            return bad("origin is not a valid coordinate");
        }
        if self.n_cells == 0 || self.n_users == 0 {
            return bad("n_cells and n_users must be positive");
        }
        let positive = [
            ("cell_pitch_m", self.cell_pitch_m),
            ("duration_s", self.duration_s),
            ("road_spacing_m", self.road_spacing_m),
            ("road_vertex_spacing_m", self.road_vertex_spacing_m),
            ("truth_interval_s", self.truth_interval_s),
            ("building_size_m", self.building_size_m),
            ("strong_reach_min", self.strong_reach_min),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("dwell_min_s", self.dwell_min_s),
            ("dwell_mean_extra_s", self.dwell_mean_extra_s),
            ("leg_min_s", self.leg_min_s),
            ("move_speed_min_mps", self.move_speed_min_mps),
            ("event_rate_per_hour", self.event_rate_per_hour),
            ("selection_sigma", self.selection_sigma),
            ("road_jitter_m", self.road_jitter_m),
            ("place_offset_min_m", self.place_offset_min_m),
            ("move_jitter_m", self.move_jitter_m),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        if self.leg_max_s < self.leg_min_s
            || self.move_speed_max_mps < self.move_speed_min_mps
            || self.place_offset_max_m < self.place_offset_min_m
            || self.strong_reach_max < self.strong_reach_min
        {
            return bad("range maximum below its minimum");
        }
        if self.dwell_min_s + self.dwell_mean_extra_s <= 0.0 {
            return bad("stay dwell must have positive mean");
        }
        if self.move_speed_max_mps > 0.0 && self.leg_max_s <= 0.0 {
            return bad("moves need a positive leg duration");
        }
        if !(0.0..=1.0).contains(&self.strong_cell_fraction) {
            return bad("strong_cell_fraction outside [0, 1]");
        }
        if self.road_jitter_m >= self.road_spacing_m / 2.0 {
            return bad("road_jitter_m must stay below half the road spacing");
        }
        let (cols, rows) = lattice_shape(self.n_cells);
        let span = (cols as f64 + 1.0).hypot(rows as f64 + 1.0) * self.cell_pitch_m;
        if span / 2.0 > MAX_PROJECTION_RANGE_M {
            return bad("world extent exceeds the planar frame");
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Axis-aligned rectangle in the simulator's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: LocalPoint,
    pub max: LocalPoint,
}

impl Extent {
    pub fn contains(&self, p: LocalPoint) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    fn clamp(&self, p: LocalPoint) -> LocalPoint {
        LocalPoint::new(p.x.clamp(self.min.x, self.max.x), p.y.clamp(self.min.y, self.max.y))
    }

    fn sample(&self, rng: &mut impl Rng) -> LocalPoint {
        LocalPoint::new(
            rng.random_range(self.min.x..=self.max.x),
            rng.random_range(self.min.y..=self.max.y),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCell {
    pub feature: CoverageFeature,
    pub antenna: LocalPoint,
    pub hexagon: Vec<LocalPoint>,
    /// Hidden radio reach used by the serving-cell model.
    pub reach_m: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    pub projection: LocalProjection,
    pub extent: Extent,
    /// Hexagon side (equal to its circumradius).
    pub side_m: f64,
    pub cells: Vec<SimCell>,
    /// x of each north-south road.
    pub road_xs: Vec<f64>,
    /// y of each east-west road.
    pub road_ys: Vec<f64>,
    /// Road polylines in the local frame.
    pub roads: Vec<Vec<LocalPoint>>,
}

impl World {
    pub fn coverage_features(&self) -> Vec<CoverageFeature> {
        self.cells.iter().map(|c| c.feature.clone()).collect()
    }

    pub fn road_lines(&self) -> Vec<Vec<GeoPoint>> {
        self.roads
            .iter()
            .map(|line| line.iter().map(|p| self.projection.from_local(*p)).collect())
            .collect()
    }
}

/// Columns and rows of the lattice holding `n` cells.
fn lattice_shape(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (cols, n.div_ceil(cols))
}

fn hexagon(center: LocalPoint, side: f64) -> Vec<LocalPoint> {
    (0..6)
        .map(|k| {
            let a = (30.0 + 60.0 * k as f64).to_radians();
            LocalPoint::new(center.x + side * a.cos(), center.y + side * a.sin())
        })
        .collect()
}

/// Parallel road coordinates across `[lo, hi]`, one per `spacing`, each shifted as a whole.
fn road_positions(lo: f64, hi: f64, spacing: f64, jitter: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::new();
    let mut base = lo + spacing / 2.0;
    while base < hi {
        let j = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        out.push((base + j).clamp(lo + 1.0, hi - 1.0));
        base += spacing;
    }
    out
}

fn polyline(a: LocalPoint, b: LocalPoint, vertex_spacing: f64) -> Vec<LocalPoint> {
    let n = (a.distance(&b) / vertex_spacing).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            LocalPoint::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
        })
        .collect()
}

/// Cells on a pointy-top hexagonal lattice and a perturbed road grid.
///
/// The extent is the largest axis-aligned rectangle the complete lattice rows
/// tile without gaps, centred on the configured origin.
pub fn generate_world(config: &SimConfig) -> Result<World, SimError> {
    config.validate()?;
    let mut rng = config.rng(STREAM_WORLD);
    let pitch = config.cell_pitch_m;
    let side = pitch / 3f64.sqrt();
    let row_step = 1.5 * side;
    let (cols, _) = lattice_shape(config.n_cells);
    let full_rows = config.n_cells / cols;

    let raw_center = |i: usize| {
        let (row, col) = (i / cols, i % cols);
        let shift = if row % 2 == 1 { pitch / 2.0 } else { 0.0 };
        LocalPoint::new(col as f64 * pitch + shift, row as f64 * row_step)
    };
    let (min_x, max_x) = if full_rows >= 2 {
        (0.0, (cols - 1) as f64 * pitch + pitch / 2.0)
    } else {
        (-pitch / 2.0, (cols - 1) as f64 * pitch + pitch / 2.0)
    };
    let (min_y, max_y) = (-side / 2.0, (full_rows - 1) as f64 * row_step + side / 2.0);
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let extent = Extent {
        min: LocalPoint::new(min_x - cx, min_y - cy),
        max: LocalPoint::new(max_x - cx, max_y - cy),
    };

    let origin = GeoPoint::new(config.origin_lat, config.origin_lon)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let projection = LocalProjection::new(origin);

    let cells = (0..config.n_cells)
        .map(|i| {
            let c = raw_center(i);
            let antenna = LocalPoint::new(c.x - cx, c.y - cy);
            let hex = hexagon(antenna, side);
            let strong = rng.random::<f64>() < config.strong_cell_fraction;
            let reach_m = if strong {
                side * rng.random_range(config.strong_reach_min..=config.strong_reach_max)
            } else {
                side
            };
            SimCell {
                feature: CoverageFeature {
                    cell_id: format!("C{i:03}"),
                    antenna: projection.from_local(antenna),
                    azimuth: None,
                    polygon: hex.iter().map(|p| projection.from_local(*p)).collect(),
                },
                antenna,
                hexagon: hex,
                reach_m,
            }
        })
        .collect();

    let road_xs = road_positions(
        extent.min.x,
        extent.max.x,
        config.road_spacing_m,
        config.road_jitter_m,
        &mut rng,
    );
    let road_ys = road_positions(
        extent.min.y,
        extent.max.y,
        config.road_spacing_m,
        config.road_jitter_m,
        &mut rng,
    );
    let vs = config.road_vertex_spacing_m;
    let mut roads = Vec::new();
    for &x in &road_xs {
        roads.push(polyline(
            LocalPoint::new(x, extent.min.y),
            LocalPoint::new(x, extent.max.y),
            vs,
        ));
    }
    for &y in &road_ys {
        roads.push(polyline(
            LocalPoint::new(extent.min.x, y),
            LocalPoint::new(extent.max.x, y),
            vs,
        ));
    }

    Ok(World {
        projection,
        extent,
        side_m: side,
        cells,
        road_xs,
        road_ys,
        roads,
    })
}

/// One annotated episode; `path` is a single point for Stay.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthEpisode {
    pub label: EpisodeLabel,
    /// Seconds since the track start.
    pub start_s: f64,
    pub end_s: f64,
    pub speed_mps: f64,
    pub path: Vec<LocalPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrack {
    pub imsi: String,
    pub imei: String,
    pub episodes: Vec<TruthEpisode>,
    /// Dense GPS-like fixes every `truth_interval_s`.
    pub fixes: Vec<TruthFix>,
    /// Stay places visited, with the building footprint drawn around each.
    pub places: Vec<LocalPoint>,
}

impl TruthTrack {
    /// Noise-free position `t` seconds after the track start.
    pub fn position_at(&self, t: f64) -> LocalPoint {
        let ep = self
            .episodes
            .iter()
            .find(|e| t < e.end_s)
            .or(self.episodes.last())
            .expect("track has at least one episode");
        if ep.path.len() == 1 || ep.end_s <= ep.start_s {
            return ep.path[0];
        }
        let total: f64 = ep.path.windows(2).map(|w| w[0].distance(&w[1])).sum();
        let frac = ((t - ep.start_s) / (ep.end_s - ep.start_s)).clamp(0.0, 1.0);
        let mut remaining = frac * total;
        for w in ep.path.windows(2) {
            let len = w[0].distance(&w[1]);
            if remaining <= len && len > 0.0 {
                let u = remaining / len;
                return LocalPoint::new(w[0].x + u * (w[1].x - w[0].x), w[0].y + u * (w[1].y - w[0].y));
            }
            remaining -= len;
        }
        *ep.path.last().unwrap()
    }

    pub fn label_at(&self, t: f64) -> EpisodeLabel {
        self.episodes
            .iter()
            .find(|e| t < e.end_s)
            .or(self.episodes.last())
            .map(|e| e.label)
            .expect("track has at least one episode")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Road {
    /// North-south road `road_xs[i]`.
    Vertical(usize),
    /// East-west road `road_ys[j]`.
    Horizontal(usize),
}

#[derive(Debug, Clone, Copy)]
struct RoadPos {
    road: Road,
    /// Coordinate along the road (y for vertical roads, x for horizontal).
    along: f64,
}

#[derive(Debug, Clone, Copy)]
struct Place {
    pos: LocalPoint,
    foot: Option<RoadPos>,
}

struct Walker<'a> {
    world: &'a World,
    config: &'a SimConfig,
}

impl Walker<'_> {
    fn has_grid(&self) -> bool {
        !self.world.road_xs.is_empty() && !self.world.road_ys.is_empty()
    }

    fn point(&self, p: RoadPos) -> LocalPoint {
        match p.road {
            Road::Vertical(i) => LocalPoint::new(self.world.road_xs[i], p.along),
            Road::Horizontal(j) => LocalPoint::new(p.along, self.world.road_ys[j]),
        }
    }

    /// Crossing coordinates and the two ends of `road`.
    fn stops(&self, road: Road) -> (&[f64], f64, f64) {
        let e = &self.world.extent;
        match road {
            Road::Vertical(_) => (&self.world.road_ys, e.min.y, e.max.y),
            Road::Horizontal(_) => (&self.world.road_xs, e.min.x, e.max.x),
        }
    }

    fn random_road_pos(&self, rng: &mut impl Rng) -> RoadPos {
        let nv = self.world.road_xs.len();
        let k = rng.random_range(0..nv + self.world.road_ys.len());
        let road = if k < nv { Road::Vertical(k) } else { Road::Horizontal(k - nv) };
        let (_, lo, hi) = self.stops(road);
        RoadPos {
            road,
            along: rng.random_range(lo..=hi),
        }
    }

    fn random_setback(&self, rng: &mut impl Rng) -> f64 {
        rng.random_range(self.config.place_offset_min_m..=self.config.place_offset_max_m)
    }

    /// A place `offset` meters off the road at `foot`, on a random side.
    fn place_near(&self, foot: RoadPos, offset: f64, rng: &mut impl Rng) -> Place {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let base = self.point(foot);
        let at = |s: f64| match foot.road {
            Road::Vertical(_) => LocalPoint::new(base.x + s * offset, base.y),
            Road::Horizontal(_) => LocalPoint::new(base.x, base.y + s * offset),
        };
        let extent = &self.world.extent;
        let pos = if extent.contains(at(sign)) {
            at(sign)
        } else if extent.contains(at(-sign)) {
            at(-sign)
        } else {
            extent.clamp(at(sign))
        };
        Place { pos, foot: Some(foot) }
    }

    fn initial_place(&self, rng: &mut impl Rng) -> Place {
        if self.has_grid() {
            let foot = self.random_road_pos(rng);
            let offset = self.random_setback(rng);
            self.place_near(foot, offset, rng)
        } else {
            Place {
                pos: self.world.extent.sample(rng),
                foot: None,
            }
        }
    }

    /// Random walk along the grid for `budget` meters, appending visited points.
    fn drive(&self, start: RoadPos, budget: f64, rng: &mut impl Rng, path: &mut Vec<LocalPoint>) -> RoadPos {
        let mut pos = start;
        let mut dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mut remaining = budget;
        loop {
            let (crossings, lo, hi) = self.stops(pos.road);
            let next = if dir > 0.0 {
                crossings.iter().copied().filter(|&v| v > pos.along + EPS).fold(hi, f64::min)
            } else {
                crossings.iter().copied().filter(|&v| v < pos.along - EPS).fold(lo, f64::max)
            };
            let gap = (next - pos.along).abs();
            if gap <= EPS {
                dir = -dir;
                continue;
            }
            if remaining <= gap {
                pos.along += dir * remaining;
                path.push(self.point(pos));
                return pos;
            }
            pos.along = next;
            remaining -= gap;
            path.push(self.point(pos));

            let Some(k) = crossings.iter().position(|&v| (v - next).abs() <= EPS) else {
                dir = -dir;
                continue;
            };
            let mut options: Vec<(RoadPos, f64)> = Vec::with_capacity(3);
            if next > lo + EPS && next < hi - EPS {
                options.push((pos, dir));
            }
            let here = self.point(pos);
            let cross = match pos.road {
                Road::Vertical(_) => RoadPos {
                    road: Road::Horizontal(k),
                    along: here.x,
                },
                Road::Horizontal(_) => RoadPos {
                    road: Road::Vertical(k),
                    along: here.y,
                },
            };
            let (_, clo, chi) = self.stops(cross.road);
            if cross.along < chi - EPS {
                options.push((cross, 1.0));
            }
            if cross.along > clo + EPS {
                options.push((cross, -1.0));
            }
            if options.is_empty() {
                dir = -dir;
                continue;
            }
            (pos, dir) = options[rng.random_range(0..options.len())];
        }
    }

    /// Path and next place for a Move leg of `length` meters starting at `from`.
    fn leg(&self, from: Place, length: f64, rng: &mut impl Rng) -> (Vec<LocalPoint>, Place) {
        let mut path = vec![from.pos];
        if let (true, Some(foot)) = (self.has_grid(), from.foot) {
            let access_out = from.pos.distance(&self.point(foot));
            let setback = self.random_setback(rng);
            let drive = (length - access_out - setback).max(0.0);
            path.push(self.point(foot));
            let end = self.drive(foot, drive, rng, &mut path);
            let next = self.place_near(end, setback, rng);
            path.push(next.pos);
            (path, next)
        } else {
            // No grid: shuttle towards a random target, which keeps the path inside the extent.
            let target = self.world.extent.sample(rng);
            let mut remaining = length;
            let (mut a, mut b) = (from.pos, target);
            while remaining > 0.0 && a.distance(&b) > EPS {
                let d = a.distance(&b);
                let step = remaining.min(d);
                let t = step / d;
                let p = LocalPoint::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
                path.push(p);
                remaining -= step;
                (a, b) = (b, a);
            }
            let pos = *path.last().unwrap();
            (path, Place { pos, foot: None })
        }
    }
}

fn path_length(path: &[LocalPoint]) -> f64 {
    path.windows(2).map(|w| w[0].distance(&w[1])).sum()
}

/// Leading `length` meters of `path`.
fn truncate_path(path: &[LocalPoint], length: f64) -> Vec<LocalPoint> {
    let mut out = vec![path[0]];
    let mut remaining = length;
    for w in path.windows(2) {
        let len = w[0].distance(&w[1]);
        if remaining <= len {
            let u = if len > 0.0 { remaining / len } else { 0.0 };
            out.push(LocalPoint::new(w[0].x + u * (w[1].x - w[0].x), w[0].y + u * (w[1].y - w[0].y)));
            return out;
        }
        remaining -= len;
        out.push(w[1]);
    }
    out
}

fn building_footprint(center: LocalPoint, size: f64, projection: &LocalProjection) -> Vec<GeoPoint> {
    let h = size / 2.0;
    [(-h, -h), (h, -h), (h, h), (-h, h)]
        .iter()
        .map(|(dx, dy)| projection.from_local(LocalPoint::new(center.x + dx, center.y + dy)))
        .collect()
}

fn user_ids(u: usize) -> (String, String) {
    (format!("24801{:010}", 1000 + u), format!("35209900{:07}", 100 + u))
}

/// Alternating Stay/Move episodes per user, starting with a Stay, until the
/// configured duration elapses.
pub fn generate_truth(config: &SimConfig, world: &World) -> Result<Vec<TruthTrack>, SimError> {
    config.validate()?;
    let mut rng = config.rng(STREAM_TRUTH);
    let dwell_extra = (config.dwell_mean_extra_s > 0.0)
        .then(|| Exp::new(1.0 / config.dwell_mean_extra_s).expect("positive rate"));
    let jitter = Normal::new(0.0, config.move_jitter_m).expect("non-negative sigma");
    let walker = Walker { world, config };
    let can_move = config.move_speed_max_mps > 0.0;

    let mut tracks = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users {
        let (imsi, imei) = user_ids(u);
        let mut place = walker.initial_place(&mut rng);
        let mut places = vec![place.pos];
        let mut episodes = Vec::new();
        let mut t = 0.0;
        let mut stay = true;
        while t < config.duration_s {
            if stay || !can_move {
                let dwell = if can_move {
                    config.dwell_min_s + dwell_extra.map_or(0.0, |d| d.sample(&mut rng))
                } else {
                    config.duration_s
                };
                let end = (t + dwell.max(1.0)).min(config.duration_s);
                episodes.push(TruthEpisode {
                    label: EpisodeLabel::Stay,
                    start_s: t,
                    end_s: end,
                    speed_mps: 0.0,
                    path: vec![place.pos],
                });
                t = end;
            } else {
                let planned = rng.random_range(config.leg_min_s..=config.leg_max_s).max(1.0);
                let speed = rng
                    .random_range(config.move_speed_min_mps..=config.move_speed_max_mps)
                    .max(1e-3);
                let (mut path, next) = walker.leg(place, speed * planned, &mut rng);
                let mut end = t + (path_length(&path) / speed).max(1.0);
                // A leg cut by the horizon keeps its speed and loses its tail.
                if end > config.duration_s {
                    end = config.duration_s;
                    path = truncate_path(&path, speed * (end - t));
                }
                let ep = TruthEpisode {
                    label: EpisodeLabel::Move,
                    start_s: t,
                    end_s: end,
                    speed_mps: speed,
                    path,
                };
                episodes.push(ep);
                place = next;
                places.push(place.pos);
                t = end;
            }
            stay = !stay;
        }

        let mut track = TruthTrack {
            imsi,
            imei,
            episodes,
            fixes: Vec::new(),
            places,
        };
        let n_fixes = (config.duration_s / config.truth_interval_s).floor() as usize + 1;
        track.fixes = (0..n_fixes)
            .map(|k| {
                let ts = k as f64 * config.truth_interval_s;
                let label = track.label_at(ts);
                let mut p = track.position_at(ts);
                if label == EpisodeLabel::Move && config.move_jitter_m > 0.0 {
                    p.x += jitter.sample(&mut rng);
                    p.y += jitter.sample(&mut rng);
                }
                TruthFix {
                    imsi: track.imsi.clone(),
                    timestamp: config.start_timestamp + ts.round() as i64,
                    location: world.projection.from_local(p),
                    label,
                }
            })
            .collect();
        tracks.push(track);
    }
    Ok(tracks)
}

/// Index of the serving cell at `p`: the largest `−distance / reach` after
/// adding Gaussian noise of standard deviation `sigma` to each score.
pub fn serving_cell(world: &World, p: LocalPoint, sigma: f64, rng: &mut impl Rng) -> usize {
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("non-negative sigma");
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, c) in world.cells.iter().enumerate() {
        let mut score = -p.distance(&c.antenna) / c.reach_m;
        if sigma > 0.0 {
            score += noise.sample(rng);
        }
        if score > best.0 {
            best = (score, i);
        }
    }
    best.1
}

fn event_kind(rng: &mut impl Rng) -> EventKind {
    match rng.random_range(0..10) {
        0..=2 => EventKind::Call,
        3..=4 => EventKind::Sms,
        _ => EventKind::Data,
    }
}

/// Poisson-timed CDR events for every track, with the true position of each
/// event as a paired coverage observation.
pub fn sample_cdr(
    tracks: &[TruthTrack],
    world: &World,
    config: &SimConfig,
) -> (Vec<CdrRecord>, Vec<CoverageObservation>) {
    let mut rng = config.rng(STREAM_SAMPLING);
    let mut records = Vec::new();
    let mut observations = Vec::new();
    if config.event_rate_per_hour <= 0.0 {
        return (records, observations);
    }
    let gap = Exp::new(config.event_rate_per_hour / 3600.0).expect("positive rate");
    for track in tracks {
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t > config.duration_s {
                break;
            }
            let ts = t.floor();
            let p = track.position_at(ts);
            let cell = &world.cells[serving_cell(world, p, config.selection_sigma, &mut rng)];
            records.push(CdrRecord {
                imsi: track.imsi.clone(),
                imei: track.imei.clone(),
                cell_id: cell.feature.cell_id.clone(),
                timestamp: config.start_timestamp + ts as i64,
                event: event_kind(&mut rng),
            });
            observations.push(CoverageObservation {
                cell_id: cell.feature.cell_id.clone(),
                location: world.projection.from_local(p),
            });
        }
    }
    (records, observations)
}

/// Uniform calibration campaign: `n_observations` GPS fixes over the extent,
/// each tagged with the cell that would serve it.
pub fn calibration_observations(world: &World, config: &SimConfig) -> Vec<CoverageObservation> {
    let mut rng = config.rng(STREAM_CALIBRATION);
    (0..config.n_observations)
        .map(|_| {
            let p = world.extent.sample(&mut rng);
            let cell = serving_cell(world, p, config.selection_sigma, &mut rng);
            CoverageObservation {
                cell_id: world.cells[cell].feature.cell_id.clone(),
                location: world.projection.from_local(p),
            }
        })
        .collect()
}

/// Everything one simulator run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub world: World,
    pub tracks: Vec<TruthTrack>,
    pub cdr: Vec<CdrRecord>,
    /// True position of every CDR event with its serving cell.
    pub event_observations: Vec<CoverageObservation>,
    pub calibration: Vec<CoverageObservation>,
    pub buildings: Vec<Vec<GeoPoint>>,
}

impl SimOutput {
    pub fn truth_fixes(&self) -> Vec<TruthFix> {
        self.tracks.iter().flat_map(|t| t.fixes.iter().cloned()).collect()
    }
}

pub fn simulate(config: &SimConfig) -> Result<SimOutput, SimError> {
    let world = generate_world(config)?;
    let tracks = generate_truth(config, &world)?;
    let (cdr, event_observations) = sample_cdr(&tracks, &world, config);
    let calibration = calibration_observations(&world, config);
    let buildings = tracks
        .iter()
        .flat_map(|t| t.places.iter())
        .map(|p| building_footprint(*p, config.building_size_m, &world.projection))
        .collect();
    Ok(SimOutput {
        world,
        tracks,
        cdr,
        event_observations,
        calibration,
        buildings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::point_in_polygon;

    fn small() -> SimConfig {
        SimConfig {
            n_users: 2,
            duration_s: 8000.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn single_cell_world() {
        let cfg = SimConfig {
            n_cells: 1,
            ..SimConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        assert_eq!(w.cells.len(), 1);
        assert_eq!(w.cells[0].hexagon.len(), 6);
        assert!(w.extent.contains(w.cells[0].antenna));
    }

    #[test]
    fn extent_tiled_by_exactly_one_hexagon() {
        let w = generate_world(&SimConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5000 {
            let p = w.extent.sample(&mut rng);
            let n = w
                .cells
                .iter()
                .filter(|c| point_in_polygon(p, &c.hexagon).unwrap())
                .count();
            assert_eq!(n, 1, "point {p:?}");
        }
    }

    #[test]
    fn zero_speed_gives_single_stay() {
        let cfg = SimConfig {
            move_speed_min_mps: 0.0,
            move_speed_max_mps: 0.0,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        for t in generate_truth(&cfg, &w).unwrap() {
            assert!(t.fixes.iter().all(|f| f.label == EpisodeLabel::Stay));
            assert_eq!(t.episodes.len(), 1);
        }
    }

    #[test]
    fn short_duration_is_one_stay() {
        let cfg = SimConfig {
            duration_s: 600.0,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        for t in generate_truth(&cfg, &w).unwrap() {
            assert_eq!(t.episodes.len(), 1);
            assert_eq!(t.episodes[0].label, EpisodeLabel::Stay);
        }
    }

    #[test]
    fn episodes_alternate_and_cover_duration() {
        let cfg = small();
        let w = generate_world(&cfg).unwrap();
        for t in generate_truth(&cfg, &w).unwrap() {
            assert_eq!(t.episodes[0].start_s, 0.0);
            for pair in t.episodes.windows(2) {
                assert_ne!(pair[0].label, pair[1].label);
                assert_eq!(pair[0].end_s, pair[1].start_s);
            }
            assert_eq!(t.episodes.last().unwrap().end_s, cfg.duration_s);
        }
    }

    #[test]
    fn move_speed_within_range_and_stays_fixed() {
        let cfg = SimConfig {
            move_jitter_m: 0.0,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        for t in generate_truth(&cfg, &w).unwrap() {
            for ep in &t.episodes {
                let dur = ep.end_s - ep.start_s;
                match ep.label {
                    EpisodeLabel::Move => {
                        let v = path_length(&ep.path) / dur;
                        assert!(v >= cfg.move_speed_min_mps - 1e-6 && v <= cfg.move_speed_max_mps + 1e-6);
                        // Inside the leg, straight-line displacement never outpaces the speed.
                        let a = t.position_at(ep.start_s + dur * 0.25);
                        let b = t.position_at(ep.start_s + dur * 0.75);
                        assert!(a.distance(&b) <= v * dur * 0.5 + 1e-6);
                    }
                    EpisodeLabel::Stay => {
                        assert_eq!(t.position_at(ep.start_s), t.position_at(ep.end_s - 1e-6));
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_selection_is_score_argmax() {
        let w = generate_world(&SimConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let p = w.extent.sample(&mut rng);
            let got = serving_cell(&w, p, 0.0, &mut rng);
            let best = w
                .cells
                .iter()
                .map(|c| p.distance(&c.antenna) / c.reach_m)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(p.distance(&w.cells[got].antenna) / w.cells[got].reach_m, best);
        }
    }

    #[test]
    fn zero_rate_gives_no_events() {
        let cfg = SimConfig {
            event_rate_per_hour: 0.0,
            ..small()
        };
        let out = simulate(&cfg).unwrap();
        assert!(out.cdr.is_empty());
        assert!(out.event_observations.is_empty());
    }

    #[test]
    fn events_inside_span_and_known_cells() {
        let cfg = small();
        let out = simulate(&cfg).unwrap();
        let ids: std::collections::HashSet<_> = out.world.cells.iter().map(|c| c.feature.cell_id.clone()).collect();
        assert!(!out.cdr.is_empty());
        for r in &out.cdr {
            assert!(ids.contains(&r.cell_id));
            assert!(r.timestamp >= cfg.start_timestamp);
            assert!(r.timestamp as f64 <= cfg.start_timestamp as f64 + cfg.duration_s);
        }
        assert_eq!(out.cdr.len(), out.event_observations.len());
    }

    #[test]
    fn same_seed_same_output() {
        let a = simulate(&small()).unwrap();
        let b = simulate(&small()).unwrap();
        assert_eq!(a.cdr, b.cdr);
        assert_eq!(a.truth_fixes(), b.truth_fixes());
        assert_eq!(a.calibration, b.calibration);
        let c = simulate(&SimConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.cdr, c.cdr);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = SimConfig {
            move_speed_min_mps: 5.0,
            move_speed_max_mps: 1.0,
            ..SimConfig::default()
        };
        assert!(matches!(generate_world(&bad), Err(SimError::InvalidConfig(_))));
        assert!(SimConfig { n_cells: 0, ..SimConfig::default() }.validate().is_err());
    }
}
