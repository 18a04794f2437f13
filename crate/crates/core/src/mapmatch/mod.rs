//! Snapping estimated positions onto the nearest road segment.
//!
//! For a point `p` and radius `r`, the candidate segments are those with an
//! endpoint within `r` of `p`. Each candidate contributes the clamped
//! orthogonal projection of `p`; the candidate with the smallest haversine
//! distance to `p` wins, ties going to the lowest segment id.

mod grid;

use serde::{Deserialize, Serialize};

use crate::geo::{haversine, project_to_segment, LocalPoint, LocalProjection, Segment};
use crate::ingest::EpisodeLabel;

pub use grid::SegmentGrid;

pub const DEFAULT_GRID_CELL_M: f64 = 500.0;

/// Road segments in the local frame plus a radius-queryable index.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    segments: Vec<Segment>,
    projection: LocalProjection,
    index: SegmentGrid,
}

impl RoadNetwork {
    pub fn new(segments: Vec<Segment>, projection: LocalProjection, grid_cell_m: f64) -> Self {
        let index = SegmentGrid::build(&segments, grid_cell_m);
        Self {
            segments,
            projection,
            index,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn projection(&self) -> &LocalProjection {
        &self.projection
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Ids of segments satisfying the radius predicate, ascending.
    pub fn segments_in_radius(&self, p: LocalPoint, r: f64, query: RadiusQuery) -> Vec<usize> {
        self.index
            .query_box(p, r)
            .into_iter()
            .filter(|&id| query.accepts(&self.segments[id], p, r))
            .collect()
    }
}

/// Which segments count as "within r" of a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusQuery {
    /// At least one endpoint within `r` (closed).
    #[default]
    Endpoint,
    /// Closest point of the segment within `r`.
    SegmentDistance,
}

impl RadiusQuery {
    pub fn accepts(&self, s: &Segment, p: LocalPoint, r: f64) -> bool {
        match self {
            Self::Endpoint => s.a.distance(&p) <= r || s.b.distance(&p) <= r,
            Self::SegmentDistance => s.distance_to(p) <= r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    /// Double the radius (up to `max_doublings` times) before giving up.
    Expand,
    /// Give up as soon as the first radius finds nothing.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub radius_m: f64,
    pub policy: MatchPolicy,
    pub max_doublings: u32,
    pub segment_distance_query: bool,
    pub grid_cell_m: f64,
    pub match_stay_buildings: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            radius_m: 2000.0,
            policy: MatchPolicy::Expand,
            max_doublings: 4,
            segment_distance_query: false,
            grid_cell_m: DEFAULT_GRID_CELL_M,
            match_stay_buildings: false,
        }
    }
}

impl MatchConfig {
    pub fn radius_query(&self) -> RadiusQuery {
        if self.segment_distance_query {
            RadiusQuery::SegmentDistance
        } else {
            RadiusQuery::Endpoint
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MatchStatus {
    Matched,
    Unmatched,
}

impl MatchStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Matched => "MATCHED",
            Self::Unmatched => "UNMATCHED",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub input: LocalPoint,
    pub matched: Option<LocalPoint>,
    /// Segment id for road matches, building index for building matches.
    pub target_id: Option<usize>,
    /// Haversine distance from input to the matched point.
    pub distance_m: Option<f64>,
    /// Search radius in force when the match was found (or the last one tried).
    pub radius_m: f64,
    pub status: MatchStatus,
}

impl MatchResult {
    fn unmatched(input: LocalPoint, radius_m: f64) -> Self {
        Self {
            input,
            matched: None,
            target_id: None,
            distance_m: None,
            radius_m,
            status: MatchStatus::Unmatched,
        }
    }

    /// Matched point when there is one, else the input itself.
    pub fn position(&self) -> LocalPoint {
        self.matched.unwrap_or(self.input)
    }
}

/// Picks the minimum-haversine candidate; ties resolve to the smallest id.
fn closest_candidate(
    projection: &LocalProjection,
    p: LocalPoint,
    candidates: impl IntoIterator<Item = (usize, LocalPoint)>,
) -> Option<(usize, LocalPoint, f64)> {
    let p_geo = projection.from_local(p);
    candidates
        .into_iter()
        .map(|(id, c)| (id, c, haversine(p_geo, projection.from_local(c))))
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)))
}

/// Runs `find` at the configured radius, doubling it under `Expand`.
fn with_expansion(
    p: LocalPoint,
    config: &MatchConfig,
    mut find: impl FnMut(f64) -> Option<(usize, LocalPoint, f64)>,
) -> MatchResult {
    let doublings = match config.policy {
        MatchPolicy::Expand => config.max_doublings,
        MatchPolicy::Strict => 0,
    };
    let mut radius = config.radius_m;
    for attempt in 0..=doublings {
        if attempt > 0 {
            radius *= 2.0;
        }
        if let Some((id, c, d)) = find(radius) {
            return MatchResult {
                input: p,
                matched: Some(c),
                target_id: Some(id),
                distance_m: Some(d),
                radius_m: radius,
                status: MatchStatus::Matched,
            };
        }
    }
    MatchResult::unmatched(p, radius)
}

pub fn match_point(net: &RoadNetwork, p: LocalPoint, config: &MatchConfig) -> MatchResult {
    let query = config.radius_query();
    with_expansion(p, config, |r| {
        let ids = net.segments_in_radius(p, r, query);
        closest_candidate(
            &net.projection,
            p,
            ids.into_iter()
                .map(|id| (id, project_to_segment(p, &net.segments[id]))),
        )
    })
}

/// Nearest building centroid within the search radius.
pub fn match_building(
    projection: &LocalProjection,
    buildings: &[LocalPoint],
    p: LocalPoint,
    config: &MatchConfig,
) -> MatchResult {
    with_expansion(p, config, |r| {
        closest_candidate(
            projection,
            p,
            buildings
                .iter()
                .enumerate()
                .filter(|(_, c)| c.distance(&p) <= r)
                .map(|(i, c)| (i, *c)),
        )
    })
}

/// Matches MOVE-labelled estimates to roads. STAY-labelled ones pass through
/// unmatched unless building matching is enabled and buildings are supplied.
pub fn match_trajectory(
    estimates: &[LocalPoint],
    labels: &[EpisodeLabel],
    net: &RoadNetwork,
    buildings: Option<&[LocalPoint]>,
    config: &MatchConfig,
) -> Vec<MatchResult> {
    assert_eq!(estimates.len(), labels.len(), "estimates and labels must align");
    estimates
        .iter()
        .zip(labels)
        .map(|(&p, label)| match (label, buildings) {
            (EpisodeLabel::Move, _) => match_point(net, p, config),
            (EpisodeLabel::Stay, Some(b)) if config.match_stay_buildings => {
                match_building(&net.projection, b, p, config)
            }
            (EpisodeLabel::Stay, _) => MatchResult::unmatched(p, config.radius_m),
        })
        .collect()
}
