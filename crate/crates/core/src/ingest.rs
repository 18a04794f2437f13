//! File formats and the validated in-memory records built from them.
//!
//! CDR, truth and observation files are CSV; coverage polygons, roads and
//! buildings are GeoJSON feature collections (RFC 7946, `[lon, lat]`).

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::coverage;
use crate::geo::{strip_closing_vertex, GeoError, GeoPoint, LocalPoint, LocalProjection, Segment};
use crate::mapmatch::RoadNetwork;

pub const CDR_HEADER: [&str; 5] = ["imsi", "imei", "cell_id", "timestamp", "event"];
pub const TRUTH_HEADER: [&str; 5] = ["imsi", "timestamp", "lat", "lon", "label"];
pub const OBSERVATION_HEADER: [&str; 3] = ["cell_id", "lat", "lon"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input is empty")]
    EmptyInput,
    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("duplicate cell_id {0}")]
    DuplicateCellId(String),
    #[error("feature {feature}: missing property `{name}`")]
    MissingProperty { feature: usize, name: &'static str },
    #[error("cell {cell_id}: invalid polygon ({reason})")]
    InvalidPolygon { cell_id: String, reason: String },
    #[error("feature {feature}: invalid geometry ({reason})")]
    InvalidGeometry { feature: usize, reason: String },
    #[error("invalid GeoJSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventKind {
    Call,
    Sms,
    Data,
    Other,
}

impl EventKind {
    pub fn parse(s: &str) -> Self {
        match s.trim().to_ascii_uppercase().as_str() {
            "CALL" => Self::Call,
            "SMS" => Self::Sms,
            "DATA" => Self::Data,
            _ => Self::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Call => "CALL",
            Self::Sms => "SMS",
            Self::Data => "DATA",
            Self::Other => "OTHER",
        }
    }
}

/// One billing event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdrRecord {
    pub imsi: String,
    pub imei: String,
    pub cell_id: String,
    pub timestamp: i64,
    pub event: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EpisodeLabel {
    Move,
    Stay,
}

impl EpisodeLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Move => "MOVE",
            Self::Stay => "STAY",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "MOVE" => Some(Self::Move),
            "STAY" => Some(Self::Stay),
            _ => None,
        }
    }
}

/// GPS ground-truth fix with its annotated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthFix {
    pub imsi: String,
    pub timestamp: i64,
    pub location: GeoPoint,
    pub label: EpisodeLabel,
}

/// A GPS fix recorded while the device was served by `cell_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageObservation {
    pub cell_id: String,
    pub location: GeoPoint,
}

/// A cell's coverage polygon plus the circle the estimator works with.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCoverage {
    pub cell_id: String,
    pub antenna: GeoPoint,
    /// Sector bearing in degrees clockwise from north; `None` for omnidirectional sites.
    pub azimuth: Option<f64>,
    pub polygon: Vec<GeoPoint>,
    pub circle_center: LocalPoint,
    pub base_radius: f64,
    /// Learned radius extension in meters.
    pub extension: f64,
}

impl CellCoverage {
    pub fn effective_radius(&self) -> f64 {
        self.base_radius + self.extension
    }
}

/// All cells of a network together with the planar frame their circles live in.
#[derive(Debug, Clone)]
pub struct CoverageMap {
    pub projection: LocalProjection,
    pub cells: BTreeMap<String, CellCoverage>,
}

impl CoverageMap {
    pub fn get(&self, cell_id: &str) -> Option<&CellCoverage> {
        self.cells.get(cell_id)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Resets every extension to zero (the "no optimization" variant).
    pub fn clear_extensions(&mut self) {
        for c in self.cells.values_mut() {
            c.extension = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryEvent {
    pub timestamp: i64,
    pub cell_id: String,
}

/// Time-ordered cell events of one subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub user: String,
    pub events: Vec<TrajectoryEvent>,
}

fn read_all<R: Read>(mut input: R) -> Result<String> {
    let mut buf = String::new();
    input.read_to_string(&mut buf)?;
    Ok(buf)
}

fn csv_reader<'a>(text: &'a str, expected: &[&str]) -> Result<csv::Reader<&'a [u8]>> {
    if text.trim().is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(IngestError::MalformedRow {
            line: 1,
            reason: format!("expected header `{}`", expected.join(",")),
        });
    }
    Ok(rdr)
}

fn row_line(record: &csv::StringRecord, fallback: u64) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(fallback)
}

fn malformed(line: u64, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedRow {
        line,
        reason: reason.into(),
    }
}

fn parse_f64(field: &str, line: u64, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| malformed(line, format!("non-numeric {what}")))
}

fn parse_timestamp(field: &str, line: u64) -> Result<i64> {
    let ts: i64 = field
        .parse()
        .map_err(|_| malformed(line, "non-numeric timestamp"))?;
    if ts <= 0 {
        return Err(malformed(line, "timestamp must be positive"));
    }
    Ok(ts)
}

fn parse_geo(lat: &str, lon: &str, line: u64) -> Result<GeoPoint> {
    let lat = parse_f64(lat, line, "lat")?;
    let lon = parse_f64(lon, line, "lon")?;
    GeoPoint::new(lat, lon).map_err(|e| malformed(line, e.to_string()))
}

/// Parses a CDR CSV (`imsi,imei,cell_id,timestamp,event`).
pub fn parse_cdr<R: Read>(input: R) -> Result<Vec<CdrRecord>> {
    let text = read_all(input)?;
    let mut rdr = csv_reader(&text, &CDR_HEADER)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| malformed(i as u64 + 2, e.to_string()))?;
        let line = row_line(&row, i as u64 + 2);
        if row.len() != CDR_HEADER.len() {
            return Err(malformed(line, format!("expected 5 fields, got {}", row.len())));
        }
        if row[2].is_empty() {
            return Err(malformed(line, "empty cell_id"));
        }
        out.push(CdrRecord {
            imsi: row[0].to_string(),
            imei: row[1].to_string(),
            cell_id: row[2].to_string(),
            timestamp: parse_timestamp(&row[3], line)?,
            event: EventKind::parse(&row[4]),
        });
    }
    Ok(out)
}

pub fn write_cdr<W: Write>(out: W, records: &[CdrRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CDR_HEADER)?;
    for r in records {
        w.write_record([
            r.imsi.as_str(),
            r.imei.as_str(),
            r.cell_id.as_str(),
            &r.timestamp.to_string(),
            r.event.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a truth CSV (`imsi,timestamp,lat,lon,label`).
pub fn parse_truth<R: Read>(input: R) -> Result<Vec<TruthFix>> {
    let text = read_all(input)?;
    let mut rdr = csv_reader(&text, &TRUTH_HEADER)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| malformed(i as u64 + 2, e.to_string()))?;
        let line = row_line(&row, i as u64 + 2);
        if row.len() != TRUTH_HEADER.len() {
            return Err(malformed(line, format!("expected 5 fields, got {}", row.len())));
        }
        let label = EpisodeLabel::parse(&row[4])
            .ok_or_else(|| malformed(line, format!("unknown label `{}`", &row[4])))?;
        out.push(TruthFix {
            imsi: row[0].to_string(),
            timestamp: parse_timestamp(&row[1], line)?,
            location: parse_geo(&row[2], &row[3], line)?,
            label,
        });
    }
    Ok(out)
}

pub fn write_truth<W: Write>(out: W, fixes: &[TruthFix]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_HEADER)?;
    for f in fixes {
        w.write_record([
            f.imsi.as_str(),
            &f.timestamp.to_string(),
            &fmt_deg(f.location.lat),
            &fmt_deg(f.location.lon),
            f.label.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a coverage-observation CSV (`cell_id,lat,lon`).
pub fn parse_observations<R: Read>(input: R) -> Result<Vec<CoverageObservation>> {
    let text = read_all(input)?;
    let mut rdr = csv_reader(&text, &OBSERVATION_HEADER)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| malformed(i as u64 + 2, e.to_string()))?;
        let line = row_line(&row, i as u64 + 2);
        if row.len() != OBSERVATION_HEADER.len() {
            return Err(malformed(line, format!("expected 3 fields, got {}", row.len())));
        }
        out.push(CoverageObservation {
            cell_id: row[0].to_string(),
            location: parse_geo(&row[1], &row[2], line)?,
        });
    }
    Ok(out)
}

pub fn write_observations<W: Write>(out: W, obs: &[CoverageObservation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(OBSERVATION_HEADER)?;
    for o in obs {
        w.write_record([
            o.cell_id.as_str(),
            &fmt_deg(o.location.lat),
            &fmt_deg(o.location.lon),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Degrees with 9 decimals (sub-millimetre), which round-trips our own output.
pub fn fmt_deg(v: f64) -> String {
    format!("{v:.9}")
}

fn features(doc: &Value) -> Result<&Vec<Value>> {
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(IngestError::InvalidGeometry {
            feature: 0,
            reason: "top level is not a FeatureCollection".into(),
        });
    }
    doc.get("features")
        .and_then(Value::as_array)
        .ok_or(IngestError::InvalidGeometry {
            feature: 0,
            reason: "missing `features` array".into(),
        })
}

fn position(v: &Value) -> Option<GeoPoint> {
    let arr = v.as_array()?;
    let lon = arr.first()?.as_f64()?;
    let lat = arr.get(1)?.as_f64()?;
    GeoPoint::new(lat, lon).ok()
}

fn geometry<'a>(feature: &'a Value, idx: usize, kind: &str) -> Result<&'a Value> {
    let geom = feature.get("geometry").ok_or_else(|| IngestError::InvalidGeometry {
        feature: idx,
        reason: "missing geometry".into(),
    })?;
    if geom.get("type").and_then(Value::as_str) != Some(kind) {
        return Err(IngestError::InvalidGeometry {
            feature: idx,
            reason: format!("expected {kind} geometry"),
        });
    }
    geom.get("coordinates").ok_or_else(|| IngestError::InvalidGeometry {
        feature: idx,
        reason: "missing coordinates".into(),
    })
}

fn outer_ring(coords: &Value) -> Option<Vec<GeoPoint>> {
    let ring = coords.as_array()?.first()?.as_array()?;
    ring.iter().map(position).collect()
}

fn property_f64(props: &Value, feature: usize, name: &'static str) -> Result<f64> {
    props
        .get(name)
        .and_then(Value::as_f64)
        .ok_or(IngestError::MissingProperty { feature, name })
}

fn property_key(props: &Value, feature: usize, name: &'static str) -> Result<String> {
    match props.get(name) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(IngestError::MissingProperty { feature, name }),
    }
}

/// Raw coverage feature before its circle is derived.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageFeature {
    pub cell_id: String,
    pub antenna: GeoPoint,
    pub azimuth: Option<f64>,
    pub polygon: Vec<GeoPoint>,
}

fn parse_coverage_features(text: &str) -> Result<Vec<CoverageFeature>> {
    if text.trim().is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let doc: Value = serde_json::from_str(text)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, f) in features(&doc)?.iter().enumerate() {
        let props = f.get("properties").unwrap_or(&Value::Null);
        let cell_id = property_key(props, idx, "cell_id")?;
        if !seen.insert(cell_id.clone()) {
            return Err(IngestError::DuplicateCellId(cell_id));
        }
        let antenna_lat = property_f64(props, idx, "antenna_lat")?;
        let antenna_lon = property_f64(props, idx, "antenna_lon")?;
        let antenna = GeoPoint::new(antenna_lat, antenna_lon)?;
        // `azimuth: null` or an absent key marks an omnidirectional site.
        let azimuth = match props.get("azimuth") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let az = v.as_f64().ok_or(IngestError::MissingProperty {
                    feature: idx,
                    name: "azimuth",
                })?;
                Some(az.rem_euclid(360.0))
            }
        };
        let coords = geometry(f, idx, "Polygon")?;
        let ring = outer_ring(coords).ok_or_else(|| IngestError::InvalidPolygon {
            cell_id: cell_id.clone(),
            reason: "unreadable outer ring".into(),
        })?;
        let ring = strip_closing_vertex(&ring).to_vec();
        if ring.len() < 3 {
            return Err(IngestError::InvalidPolygon {
                cell_id,
                reason: format!("{} distinct vertices", ring.len()),
            });
        }
        out.push(CoverageFeature {
            cell_id,
            antenna,
            azimuth,
            polygon: ring,
        });
    }
    Ok(out)
}

/// Parses coverage polygons and derives each cell's enclosing circle.
///
/// With `projection = None` the planar frame is centred on the mean antenna
/// position.
pub fn parse_coverage<R: Read>(
    input: R,
    projection: Option<LocalProjection>,
    azimuth_shift: f64,
) -> Result<CoverageMap> {
    let text = read_all(input)?;
    let feats = parse_coverage_features(&text)?;
    let projection = match projection {
        Some(p) => p,
        None => LocalProjection::centered_on(feats.iter().map(|f| &f.antenna)).ok_or(
            IngestError::InvalidGeometry {
                feature: 0,
                reason: "coverage collection has no features".into(),
            },
        )?,
    };
    let mut cells = BTreeMap::new();
    for f in feats {
        let (circle_center, base_radius) =
            coverage::enclosing_circle(&f.antenna, f.azimuth, &f.polygon, &projection, azimuth_shift)
                .map_err(|e| IngestError::InvalidPolygon {
                    cell_id: f.cell_id.clone(),
                    reason: e.to_string(),
                })?;
        cells.insert(
            f.cell_id.clone(),
            CellCoverage {
                cell_id: f.cell_id,
                antenna: f.antenna,
                azimuth: f.azimuth,
                polygon: f.polygon,
                circle_center,
                base_radius,
                extension: 0.0,
            },
        );
    }
    Ok(CoverageMap { projection, cells })
}

fn ring_json(ring: &[GeoPoint]) -> Value {
    let mut coords: Vec<Value> = ring.iter().map(|p| json!([p.lon, p.lat])).collect();
    if let Some(first) = ring.first() {
        coords.push(json!([first.lon, first.lat]));
    }
    Value::Array(coords)
}

pub fn coverage_geojson(cells: &[CoverageFeature]) -> Value {
    let features: Vec<Value> = cells
        .iter()
        .map(|c| {
            json!({
                "type": "Feature",
                "properties": {
                    "cell_id": c.cell_id,
                    "antenna_lat": c.antenna.lat,
                    "antenna_lon": c.antenna.lon,
                    "azimuth": c.azimuth,
                },
                "geometry": { "type": "Polygon", "coordinates": [ring_json(&c.polygon)] },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

pub fn write_coverage<W: Write>(out: W, cells: &[CoverageFeature]) -> Result<()> {
    write_json(out, &coverage_geojson(cells))
}

pub fn write_json<W: Write>(mut out: W, value: &Value) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Parses road LineStrings into a segment network in `projection`'s frame.
///
/// Returns the network and the number of zero-length pieces that were dropped.
pub fn parse_roads<R: Read>(
    input: R,
    projection: LocalProjection,
    grid_cell_m: f64,
) -> Result<(RoadNetwork, usize)> {
    let text = read_all(input)?;
    let lines = parse_linestrings(&text)?;
    let mut segments = Vec::new();
    let mut dropped = 0usize;
    for line in &lines {
        let local: Vec<LocalPoint> = line
            .iter()
            .map(|p| projection.to_local(*p))
            .collect::<Result<_, _>>()?;
        for pair in local.windows(2) {
            match Segment::new(pair[0], pair[1]) {
                Ok(s) => segments.push(s),
                Err(_) => dropped += 1,
            }
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} zero-length road segment(s)");
    }
    Ok((RoadNetwork::new(segments, projection, grid_cell_m), dropped))
}

pub fn parse_linestrings(text: &str) -> Result<Vec<Vec<GeoPoint>>> {
    if text.trim().is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let doc: Value = serde_json::from_str(text)?;
    features(&doc)?
        .iter()
        .enumerate()
        .map(|(idx, f)| {
            let coords = geometry(f, idx, "LineString")?;
            let pts: Option<Vec<GeoPoint>> = coords
                .as_array()
                .map(|a| a.iter().map(position).collect::<Option<Vec<_>>>())
                .unwrap_or(None);
            match pts {
                Some(p) if p.len() >= 2 => Ok(p),
                _ => Err(IngestError::InvalidGeometry {
                    feature: idx,
                    reason: "LineString needs at least 2 valid positions".into(),
                }),
            }
        })
        .collect()
}

pub fn roads_geojson(lines: &[Vec<GeoPoint>]) -> Value {
    let features: Vec<Value> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let coords: Vec<Value> = l.iter().map(|p| json!([p.lon, p.lat])).collect();
            json!({
                "type": "Feature",
                "properties": { "road_id": i },
                "geometry": { "type": "LineString", "coordinates": coords },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

/// Building footprints, reduced to their vertex centroids in `projection`'s frame.
pub fn parse_buildings<R: Read>(input: R, projection: LocalProjection) -> Result<Vec<LocalPoint>> {
    let text = read_all(input)?;
    if text.trim().is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let doc: Value = serde_json::from_str(&text)?;
    features(&doc)?
        .iter()
        .enumerate()
        .map(|(idx, f)| {
            let ring = outer_ring(geometry(f, idx, "Polygon")?).ok_or_else(|| {
                IngestError::InvalidGeometry {
                    feature: idx,
                    reason: "unreadable outer ring".into(),
                }
            })?;
            let local: Vec<LocalPoint> = ring
                .iter()
                .map(|p| projection.to_local(*p))
                .collect::<Result<_, _>>()?;
            if strip_closing_vertex(&local).len() < 3 {
                return Err(IngestError::InvalidGeometry {
                    feature: idx,
                    reason: "polygon needs 3 vertices".into(),
                });
            }
            Ok(crate::geo::vertex_centroid(&local))
        })
        .collect()
}

pub fn buildings_geojson(footprints: &[Vec<GeoPoint>]) -> Value {
    let features: Vec<Value> = footprints
        .iter()
        .enumerate()
        .map(|(i, ring)| {
            json!({
                "type": "Feature",
                "properties": { "building_id": i },
                "geometry": { "type": "Polygon", "coordinates": [ring_json(ring)] },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

/// Drops records whose cell is unknown to `cells`; returns the kept records
/// and the number dropped.
pub fn filter_resolvable(records: Vec<CdrRecord>, cells: &CoverageMap) -> (Vec<CdrRecord>, usize) {
    let before = records.len();
    let kept: Vec<CdrRecord> = records
        .into_iter()
        .filter(|r| cells.cells.contains_key(&r.cell_id))
        .collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        warn!("dropped {dropped} CDR record(s) with unknown cell_id");
    }
    (kept, dropped)
}

/// Groups records by IMSI and orders each group by time.
///
/// Repeated `(timestamp, cell_id)` pairs collapse to one event; same-timestamp
/// events on different cells keep their input order. Output is ordered by IMSI.
pub fn build_trajectories(records: &[CdrRecord]) -> Vec<Trajectory> {
    let mut by_user: BTreeMap<&str, Vec<&CdrRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.imsi.as_str()).or_default().push(r);
    }
    by_user
        .into_iter()
        .map(|(user, mut recs)| {
            recs.sort_by_key(|r| r.timestamp); // stable
            let mut seen: HashSet<(i64, &str)> = HashSet::new();
            let events = recs
                .into_iter()
                .filter(|r| seen.insert((r.timestamp, r.cell_id.as_str())))
                .map(|r| TrajectoryEvent {
                    timestamp: r.timestamp,
                    cell_id: r.cell_id.clone(),
                })
                .collect();
            Trajectory {
                user: user.to_string(),
                events,
            }
        })
        .collect()
}
