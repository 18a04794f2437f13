//! Coordinates, distances and the small amount of planar geometry shared by
//! every stage of the pipeline.
//!
//! Geographic input is WGS-84 degrees. All filtering, optimization and
//! matching work in a local equirectangular frame (meters east/north of an
//! origin), which keeps the Kalman algebra linear and exact in meters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Beyond this distance from the origin the planar frame is not supported.
pub const MAX_PROJECTION_RANGE_M: f64 = 500_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate lat={lat} lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("point is {distance_m:.0} m from the projection origin (limit {limit_m:.0} m)")]
    OutOfProjectionRange { distance_m: f64, limit_m: f64 },
    #[error("polygon needs at least 3 vertices, got {0}")]
    DegeneratePolygon(usize),
    #[error("zero-length segment")]
    ZeroLengthSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(GeoError::InvalidCoordinate { lat, lon });
        }
        Ok(Self { lat, lon })
    }
}

/// Meters east (`x`) and north (`y`) of a projection origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
}

impl LocalPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &LocalPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_sq(&self, other: &LocalPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine(p: GeoPoint, q: GeoPoint) -> f64 {
    let phi1 = p.lat.to_radians();
    let phi2 = q.lat.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (q.lon - p.lon).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Local equirectangular projection centred on `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    pub origin: GeoPoint,
    pub meters_per_deg_lat: f64,
    pub meters_per_deg_lon: f64,
}

impl LocalProjection {
    pub fn new(origin: GeoPoint) -> Self {
        let meters_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        // Clamp keeps the lon scale positive for origins at the poles.
        let meters_per_deg_lon = meters_per_deg_lat * origin.lat.to_radians().cos().max(1e-9);
        Self {
            origin,
            meters_per_deg_lat,
            meters_per_deg_lon,
        }
    }

    /// Projection centred on the mean latitude/longitude of `points`.
    pub fn centered_on<'a>(points: impl IntoIterator<Item = &'a GeoPoint>) -> Option<Self> {
        let (mut lat, mut lon, mut n) = (0.0, 0.0, 0usize);
        for p in points {
            lat += p.lat;
            lon += p.lon;
            n += 1;
        }
        if n == 0 {
            return None;
        }
        Some(Self::new(GeoPoint {
            lat: lat / n as f64,
            lon: lon / n as f64,
        }))
    }

    pub fn to_local(&self, p: GeoPoint) -> Result<LocalPoint, GeoError> {
        let distance_m = haversine(self.origin, p);
        if distance_m > MAX_PROJECTION_RANGE_M {
            return Err(GeoError::OutOfProjectionRange {
                distance_m,
                limit_m: MAX_PROJECTION_RANGE_M,
            });
        }
        Ok(self.to_local_unchecked(p))
    }

    pub(crate) fn to_local_unchecked(&self, p: GeoPoint) -> LocalPoint {
        LocalPoint {
            x: (p.lon - self.origin.lon) * self.meters_per_deg_lon,
            y: (p.lat - self.origin.lat) * self.meters_per_deg_lat,
        }
    }

    pub fn from_local(&self, p: LocalPoint) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + p.y / self.meters_per_deg_lat,
            lon: self.origin.lon + p.x / self.meters_per_deg_lon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: LocalPoint,
    pub b: LocalPoint,
}

impl Segment {
    pub fn new(a: LocalPoint, b: LocalPoint) -> Result<Self, GeoError> {
        if a == b {
            return Err(GeoError::ZeroLengthSegment);
        }
        Ok(Self { a, b })
    }

    pub fn length(&self) -> f64 {
        self.a.distance(&self.b)
    }

    /// Planar distance from `p` to the closest point of the segment.
    pub fn distance_to(&self, p: LocalPoint) -> f64 {
        p.distance(&project_to_segment(p, self))
    }
}

/// Closest point of `s` to `p`: the perpendicular foot when it falls inside
/// the segment, otherwise the nearer endpoint.
pub fn project_to_segment(p: LocalPoint, s: &Segment) -> LocalPoint {
    let dx = s.b.x - s.a.x;
    let dy = s.b.y - s.a.y;
    let len_sq = dx * dx + dy * dy;
    if len_sq == 0.0 {
        return s.a;
    }
    let t = (((p.x - s.a.x) * dx + (p.y - s.a.y) * dy) / len_sq).clamp(0.0, 1.0);
    LocalPoint {
        x: s.a.x + t * dx,
        y: s.a.y + t * dy,
    }
}

/// Ray-casting containment test; points on the boundary count as inside.
pub fn point_in_polygon(p: LocalPoint, poly: &[LocalPoint]) -> Result<bool, GeoError> {
    let poly = strip_closing_vertex(poly);
    if poly.len() < 3 {
        return Err(GeoError::DegeneratePolygon(poly.len()));
    }
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if on_segment(p, a, b) {
            return Ok(true);
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    Ok(inside)
}

/// Drops a trailing vertex equal to the first one (GeoJSON ring closure).
pub fn strip_closing_vertex<T: PartialEq>(ring: &[T]) -> &[T] {
    match (ring.first(), ring.last()) {
        (Some(f), Some(l)) if ring.len() > 1 && f == l => &ring[..ring.len() - 1],
        _ => ring,
    }
}

fn on_segment(p: LocalPoint, a: LocalPoint, b: LocalPoint) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let scale = (b.x - a.x).abs().max((b.y - a.y).abs()).max(1.0);
    if cross.abs() > 1e-9 * scale * scale {
        return false;
    }
    p.x >= a.x.min(b.x) - 1e-9
        && p.x <= a.x.max(b.x) + 1e-9
        && p.y >= a.y.min(b.y) - 1e-9
        && p.y <= a.y.max(b.y) + 1e-9
}

/// Vertex centroid of a ring (closing vertex ignored).
pub fn vertex_centroid(ring: &[LocalPoint]) -> LocalPoint {
    let ring = strip_closing_vertex(ring);
    let n = ring.len().max(1) as f64;
    let (sx, sy) = ring.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    LocalPoint::new(sx / n, sy / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gp(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn haversine_reference_values() {
        assert_eq!(haversine(gp(10.0, 20.0), gp(10.0, 20.0)), 0.0);
        // one degree of arc = R·π/180
        let one_deg = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert_abs_diff_eq!(one_deg, 111_194.93, epsilon = 0.01);
        assert_abs_diff_eq!(haversine(gp(0.0, 0.0), gp(0.0, 1.0)), one_deg, epsilon = 0.01);
        let half = std::f64::consts::PI * EARTH_RADIUS_M;
        assert_abs_diff_eq!(half, 20_015_086.8, epsilon = 0.1);
        assert_abs_diff_eq!(haversine(gp(0.0, 0.0), gp(0.0, 180.0)), half, epsilon = 0.1);
    }

    #[test]
    fn geopoint_rejects_bad_input() {
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5).is_err());
    }

    #[test]
    fn to_local_reference_values() {
        let proj = LocalProjection::new(gp(58.38, 26.72));
        let o = proj.to_local(proj.origin).unwrap();
        assert_eq!((o.x, o.y), (0.0, 0.0));
        let north = proj.to_local(gp(58.39, 26.72)).unwrap();
        assert_abs_diff_eq!(north.y, 1_111.95, epsilon = 0.01);
        assert_abs_diff_eq!(north.x, 0.0, epsilon = 0.01);
        assert_abs_diff_eq!(
            proj.meters_per_deg_lon,
            proj.meters_per_deg_lat * 58.38f64.to_radians().cos(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn to_local_rejects_far_points() {
        let proj = LocalProjection::new(gp(58.38, 26.72));
        assert!(matches!(
            proj.to_local(gp(48.0, 26.72)),
            Err(GeoError::OutOfProjectionRange { .. })
        ));
    }

    #[test]
    fn projection_round_trip_random_points() {
        let proj = LocalProjection::new(gp(58.38, 26.72));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let p = gp(58.38 + rng.random_range(-1.5..1.5), 26.72 + rng.random_range(-2.5..2.5));
            let back = proj.from_local(proj.to_local(p).unwrap());
            max_err = max_err.max((back.lat - p.lat).abs()).max((back.lon - p.lon).abs());
        }
        assert!(max_err < 1e-6, "max round-trip error {max_err}");
    }

    #[test]
    fn round_trip_error_small_relative_to_distance() {
        let proj = LocalProjection::new(gp(58.38, 26.72));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let bearing: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dist: f64 = rng.random_range(100.0..50_000.0);
            let p = proj.from_local(LocalPoint::new(dist * bearing.sin(), dist * bearing.cos()));
            let back = proj.from_local(proj.to_local(p).unwrap());
            let h = haversine(proj.origin, p);
            assert!(haversine(p, back) < 1e-3 * h);
        }
    }

    #[test]
    fn project_to_segment_examples() {
        let s = Segment::new(LocalPoint::new(0.0, 0.0), LocalPoint::new(2.0, 0.0)).unwrap();
        assert_eq!(project_to_segment(LocalPoint::new(1.5, 0.0), &s), LocalPoint::new(1.5, 0.0));
        assert_eq!(project_to_segment(LocalPoint::new(1.0, 1.0), &s), LocalPoint::new(1.0, 0.0));
        assert_eq!(project_to_segment(LocalPoint::new(-1.0, 1.0), &s), LocalPoint::new(0.0, 0.0));
    }

    #[test]
    fn clamped_projection_matches_fine_scan() {
        // brute force along the segment in 1e-4 steps
        let s = Segment::new(LocalPoint::new(0.0, 0.0), LocalPoint::new(2.0, 0.0)).unwrap();
        let p = LocalPoint::new(-1.0, 1.0);
        let steps = 20_000;
        let best = (0..=steps)
            .map(|k| {
                let t = k as f64 / steps as f64;
                LocalPoint::new(2.0 * t, 0.0)
            })
            .min_by(|a, b| p.distance(a).total_cmp(&p.distance(b)))
            .unwrap();
        let proj = project_to_segment(p, &s);
        assert_abs_diff_eq!(proj.x, best.x, epsilon = 1e-4);
        assert_abs_diff_eq!(proj.y, best.y, epsilon = 1e-12);
    }

    #[test]
    fn zero_length_segment_rejected() {
        let a = LocalPoint::new(1.0, 1.0);
        assert_eq!(Segment::new(a, a), Err(GeoError::ZeroLengthSegment));
    }

    fn unit_square() -> Vec<LocalPoint> {
        vec![
            LocalPoint::new(0.0, 0.0),
            LocalPoint::new(1.0, 0.0),
            LocalPoint::new(1.0, 1.0),
            LocalPoint::new(0.0, 1.0),
        ]
    }

    #[test]
    fn point_in_polygon_basics() {
        let sq = unit_square();
        assert!(point_in_polygon(LocalPoint::new(0.5, 0.5), &sq).unwrap());
        assert!(!point_in_polygon(LocalPoint::new(10.0, 10.0), &sq).unwrap());
        assert!(point_in_polygon(LocalPoint::new(1.0, 0.3), &sq).unwrap());
        assert!(point_in_polygon(LocalPoint::new(0.0, 0.0), &sq).unwrap());
        assert_eq!(
            point_in_polygon(LocalPoint::new(0.0, 0.0), &sq[..2]),
            Err(GeoError::DegeneratePolygon(2))
        );
    }

    #[test]
    fn point_in_convex_polygon_matches_half_planes() {
        // regular heptagon, counter-clockwise
        let poly: Vec<LocalPoint> = (0..7)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 7.0 + 0.3;
                LocalPoint::new(3.0 * a.cos() + 1.0, 3.0 * a.sin() - 2.0)
            })
            .collect();
        let half_plane = |p: LocalPoint| {
            (0..poly.len()).all(|i| {
                let a = poly[i];
                let b = poly[(i + 1) % poly.len()];
                (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) >= 0.0
            })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = LocalPoint::new(rng.random_range(-3.0..5.0), rng.random_range(-6.0..2.0));
            assert_eq!(point_in_polygon(p, &poly).unwrap(), half_plane(p), "{p:?}");
        }
    }

    proptest! {
        #[test]
        fn haversine_symmetric_and_triangle(
            a in (-80.0f64..80.0, -179.0f64..179.0),
            b in (-80.0f64..80.0, -179.0f64..179.0),
            c in (-80.0f64..80.0, -179.0f64..179.0),
        ) {
            let (a, b, c) = (gp(a.0, a.1), gp(b.0, b.1), gp(c.0, c.1));
            let ab = haversine(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - haversine(b, a)).abs() <= 1e-6 * ab.max(1.0));
            let bc = haversine(b, c);
            let ac = haversine(a, c);
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-6) + 1e-6);
        }
    }

    #[test]
    fn projection_is_closest_point_on_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let mut pt = || LocalPoint::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let (a, b, p) = (pt(), pt(), pt());
            let s = Segment::new(a, b).unwrap();
            let d = p.distance(&project_to_segment(p, &s));
            for k in 0..100 {
                let t = k as f64 / 99.0;
                let q = LocalPoint::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
                assert!(d <= p.distance(&q) + 1e-9);
            }
        }
    }
}
