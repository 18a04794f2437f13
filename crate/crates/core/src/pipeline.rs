//! End-to-end orchestration: configuration, the in-memory stages and the
//! file-based subcommands built on them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::coverage::{optimize_extensions, CoverageError, ExtensionVector, OptimizationReport, OptimizerConfig};
use crate::eval::{self, EvalConfig, EvalError, EvalReport, Estimate, Pairing, Variant};
use crate::geo::{GeoPoint, LocalPoint, LocalProjection};
use crate::ingest::{
    self, fmt_deg, CoverageMap, CoverageObservation, EpisodeLabel, IngestError, Trajectory, TruthFix,
};
use crate::mapmatch::{match_trajectory, MatchConfig, MatchResult, MatchStatus, RoadNetwork};
use crate::sim::{self, SimConfig, SimError, SimOutput};
use crate::skf::{classify_probability, skf_filter, skf_smooth, SkfConfig, SkfError, StepResult};

pub const EXTENSIONS_FILE: &str = "extensions.csv";
pub const OPTIMIZATION_REPORT_FILE: &str = "optimization_report.json";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const MATCHED_FILE: &str = "matched.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const HISTOGRAM_CSV_FILE: &str = "error_histogram.csv";
pub const HISTOGRAM_COLUMNS_FILE: &str = "error_histogram.dat";

const ESTIMATES_HEADER: [&str; 8] = [
    "imsi",
    "timestamp",
    "cell_id",
    "lat",
    "lon",
    "p_stay_filtered",
    "p_stay_smoothed",
    "label",
];
const MATCHED_HEADER: [&str; 10] = [
    "imsi",
    "timestamp",
    "label",
    "est_lat",
    "est_lon",
    "matched_lat",
    "matched_lon",
    "segment_id",
    "distance_m",
    "status",
];
const EXTENSIONS_HEADER: [&str; 3] = ["cell_id", "base_radius_m", "extension_m"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: IngestError },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error("user {user}: {source}")]
    Skf { user: String, source: SkfError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    MissingInput(String),
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Sim(SimError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub cdr: PathBuf,
    pub coverage: PathBuf,
    pub roads: PathBuf,
    pub buildings: PathBuf,
    pub truth: PathBuf,
    /// Calibration GPS fixes tagged with their serving cell.
    pub observations: PathBuf,
    /// True position of each simulated CDR event.
    pub event_observations: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self::under("data", "out")
    }
}

impl PathsConfig {
    /// Default file names with inputs in `data_dir` and results in `output_dir`.
    pub fn under(data_dir: impl AsRef<Path>, output_dir: impl AsRef<Path>) -> Self {
        let d = data_dir.as_ref();
        Self {
            cdr: d.join("cdr.csv"),
            coverage: d.join("coverage.geojson"),
            roads: d.join("roads.geojson"),
            buildings: d.join("buildings.geojson"),
            truth: d.join("truth.csv"),
            observations: d.join("observations.csv"),
            event_observations: d.join("event_observations.csv"),
            output_dir: output_dir.as_ref().to_path_buf(),
        }
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub coverage: OptimizerConfig,
    pub skf: SkfConfig,
    pub matcher: MatchConfig,
    pub sim: SimConfig,
    pub eval: EvalConfig,
    /// Worker threads for per-user stages; 0 uses every core.
    pub jobs: usize,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.coverage.weight > 0.0 && self.coverage.weight.is_finite()) {
            return fail("coverage.weight must be positive");
        }
        if self.coverage.history == 0 {
            return fail("coverage.history must be at least 1");
        }
        if self.skf.models.len() > 1 && !(self.skf.tz_diagonal > 0.0 && self.skf.tz_diagonal < 1.0) {
            return fail("skf.tz_diagonal must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.skf.threshold) {
            return fail("skf.threshold must lie in [0, 1]");
        }
        if !(self.matcher.radius_m > 0.0) {
            return fail("matcher.radius_m must be positive");
        }
        if !(self.eval.histogram_bin_m > 0.0) || self.eval.max_skew_s < 0 {
            return fail("eval.histogram_bin_m must be positive and eval.max_skew_s non-negative");
        }
        self.sim
            .validate()
            .map_err(|e| PipelineError::Config(format!("sim: {e}")))
    }
}

/// Sets `dotted.key` inside a JSON object tree, creating intermediate objects.
/// The value is parsed as JSON when possible, otherwise kept as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(PipelineError::Config(format!("override key `{key}` has an empty segment")));
        }
        let obj = match node {
            Value::Object(map) => map,
            _ => {
                return Err(PipelineError::Config(format!(
                    "override `{key}`: `{}` is not a section",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}

/// Reads the optional JSON config, applies `key=value` overrides and
/// validates the result. Errors name the offending field path.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let config: PipelineConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        PipelineError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn input_err(path: &Path) -> impl FnOnce(IngestError) -> PipelineError + '_ {
    move |source| PipelineError::Input {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Runs `f` on a pool of `jobs` threads, or on the global pool when `jobs == 0`.
fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    if jobs == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            warn!("could not build a {jobs}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

/// Everything the estimation, matching and evaluation stages consume.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub coverage: CoverageMap,
    pub trajectories: Vec<Trajectory>,
    pub roads: RoadNetwork,
    pub buildings: Option<Vec<LocalPoint>>,
    pub truth: Vec<TruthFix>,
    pub observations: Vec<CoverageObservation>,
}

impl Inputs {
    /// Builds inputs from a simulator run by round-tripping every artefact
    /// through its file format, exactly as the file-based commands would.
    pub fn from_sim(out: &SimOutput, config: &PipelineConfig) -> Result<Self> {
        let coverage_json = ingest::coverage_geojson(&out.world.coverage_features()).to_string();
        let coverage = ingest::parse_coverage(coverage_json.as_bytes(), None, config.coverage.azimuth_shift)?;
        let mut cdr = Vec::new();
        ingest::write_cdr(&mut cdr, &out.cdr)?;
        let records = ingest::parse_cdr(cdr.as_slice())?;
        let (records, _) = ingest::filter_resolvable(records, &coverage);
        let roads_json = ingest::roads_geojson(&out.world.road_lines()).to_string();
        let (roads, _) = ingest::parse_roads(roads_json.as_bytes(), coverage.projection, config.matcher.grid_cell_m)?;
        let buildings_json = ingest::buildings_geojson(&out.buildings).to_string();
        let buildings = ingest::parse_buildings(buildings_json.as_bytes(), coverage.projection)?;
        let mut obs = Vec::new();
        ingest::write_observations(&mut obs, &out.calibration)?;
        let mut truth = Vec::new();
        ingest::write_truth(&mut truth, &out.truth_fixes())?;
        Ok(Self {
            trajectories: ingest::build_trajectories(&records),
            coverage,
            roads,
            buildings: Some(buildings),
            truth: ingest::parse_truth(truth.as_slice())?,
            observations: ingest::parse_observations(obs.as_slice())?,
        })
    }

    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let coverage = load_coverage(config)?;
        let trajectories = load_trajectories(config, &coverage)?;
        let roads = load_roads(config, coverage.projection)?;
        let buildings = load_buildings(config, coverage.projection)?;
        let truth = ingest::parse_truth(open(&config.paths.truth)?).map_err(input_err(&config.paths.truth))?;
        let observations = load_observations(config)?;
        Ok(Self {
            coverage,
            trajectories,
            roads,
            buildings,
            truth,
            observations,
        })
    }

    /// Coverage map with `extensions` applied (or all zero when `None`).
    pub fn coverage_with(&self, extensions: Option<&ExtensionVector>) -> CoverageMap {
        let mut map = self.coverage.clone();
        match extensions {
            Some(ext) => ext.apply(&mut map),
            None => map.clear_extensions(),
        }
        map
    }
}

fn load_coverage(config: &PipelineConfig) -> Result<CoverageMap> {
    let path = &config.paths.coverage;
    ingest::parse_coverage(open(path)?, None, config.coverage.azimuth_shift).map_err(input_err(path))
}

fn load_trajectories(config: &PipelineConfig, coverage: &CoverageMap) -> Result<Vec<Trajectory>> {
    let path = &config.paths.cdr;
    let records = match ingest::parse_cdr(open(path)?) {
        Ok(r) => r,
        Err(IngestError::EmptyInput) => {
            warn!("{} is empty", path.display());
            Vec::new()
        }
        Err(e) => return Err(input_err(path)(e)),
    };
    let (records, _) = ingest::filter_resolvable(records, coverage);
    Ok(ingest::build_trajectories(&records))
}

fn load_roads(config: &PipelineConfig, projection: LocalProjection) -> Result<RoadNetwork> {
    let path = &config.paths.roads;
    let (net, dropped) =
        ingest::parse_roads(open(path)?, projection, config.matcher.grid_cell_m).map_err(input_err(path))?;
    if dropped > 0 {
        warn!("dropped {dropped} degenerate road segment(s)");
    }
    Ok(net)
}

fn load_buildings(config: &PipelineConfig, projection: LocalProjection) -> Result<Option<Vec<LocalPoint>>> {
    let path = &config.paths.buildings;
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(ingest::parse_buildings(open(path)?, projection).map_err(input_err(path))?))
}

fn load_observations(config: &PipelineConfig) -> Result<Vec<CoverageObservation>> {
    let path = &config.paths.observations;
    if !path.exists() {
        warn!("{} not found; extensions stay at zero", path.display());
        return Ok(Vec::new());
    }
    match ingest::parse_observations(open(path)?) {
        Err(IngestError::EmptyInput) => Ok(Vec::new()),
        other => other.map_err(input_err(path)),
    }
}

/// SKF filter and smoother output for one subscriber.
#[derive(Debug, Clone)]
pub struct UserEstimates {
    pub user: String,
    pub steps: Vec<StepResult>,
}

/// Runs the switching filter and smoother for every trajectory, in parallel.
/// The output keeps the trajectory order.
pub fn estimate(
    coverage: &CoverageMap,
    trajectories: &[Trajectory],
    config: &SkfConfig,
    jobs: usize,
) -> Result<Vec<UserEstimates>> {
    with_jobs(jobs, || {
        trajectories
            .par_iter()
            .filter(|t| !t.events.is_empty())
            .map(|t| {
                let wrap = |source| PipelineError::Skf {
                    user: t.user.clone(),
                    source,
                };
                let run = skf_filter(t, coverage, config).map_err(wrap)?;
                let steps = skf_smooth(&run).map_err(wrap)?;
                Ok(UserEstimates {
                    user: t.user.clone(),
                    steps,
                })
            })
            .collect()
    })
}

/// One row of the estimates table.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub imsi: String,
    pub timestamp: i64,
    pub cell_id: String,
    pub position: GeoPoint,
    pub p_stay_filtered: f64,
    pub p_stay_smoothed: f64,
    pub label: EpisodeLabel,
}

/// Flattens SKF output into rows using the smoothed (or, with `filtered`,
/// the filtered) position and Stay probability.
pub fn estimate_rows(
    users: &[UserEstimates],
    projection: &LocalProjection,
    threshold: f64,
    filtered: bool,
) -> Vec<EstimateRow> {
    users
        .iter()
        .flat_map(|u| {
            u.steps.iter().map(move |s| {
                let (state, p_stay) = if filtered {
                    (&s.filtered, s.p_stay_filtered)
                } else {
                    (&s.smoothed, s.p_stay_smoothed)
                };
                EstimateRow {
                    imsi: u.user.clone(),
                    timestamp: s.timestamp,
                    cell_id: s.cell_id.clone(),
                    position: projection.from_local(LocalPoint::new(state.mean[0], state.mean[1])),
                    p_stay_filtered: s.p_stay_filtered,
                    p_stay_smoothed: s.p_stay_smoothed,
                    label: classify_probability(p_stay, threshold),
                }
            })
        })
        .collect()
}

pub fn write_estimates<W: Write>(out: W, rows: &[EstimateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ESTIMATES_HEADER).map_err(IngestError::from)?;
    for r in rows {
        w.write_record([
            r.imsi.clone(),
            r.timestamp.to_string(),
            r.cell_id.clone(),
            fmt_deg(r.position.lat),
            fmt_deg(r.position.lon),
            format!("{:.9}", r.p_stay_filtered),
            format!("{:.9}", r.p_stay_smoothed),
            r.label.as_str().to_string(),
        ])
        .map_err(IngestError::from)?;
    }
    w.flush().map_err(IngestError::from)?;
    Ok(())
}

fn bad_row(line: u64, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedRow {
        line,
        reason: reason.into(),
    }
}

pub fn parse_estimates<R: std::io::Read>(input: R) -> Result<Vec<EstimateRow>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    if rdr.headers()?.iter().ne(ESTIMATES_HEADER.iter().copied()) {
        return Err(bad_row(1, format!("expected header `{}`", ESTIMATES_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let num = |k: usize| -> Result<f64, IngestError> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| bad_row(line, format!("`{}` is not a number", &rec[k])))
        };
        let timestamp = rec[1]
            .parse::<i64>()
            .map_err(|_| bad_row(line, format!("`{}` is not a timestamp", &rec[1])))?;
        rows.push(EstimateRow {
            imsi: rec[0].to_string(),
            timestamp,
            cell_id: rec[2].to_string(),
            position: GeoPoint::new(num(3)?, num(4)?)?,
            p_stay_filtered: num(5)?,
            p_stay_smoothed: num(6)?,
            label: EpisodeLabel::parse(&rec[7]).ok_or_else(|| bad_row(line, format!("bad label `{}`", &rec[7])))?,
        });
    }
    Ok(rows)
}

/// Map-matches estimate rows user by user (rows of one user must be contiguous).
pub fn match_rows(
    rows: &[EstimateRow],
    net: &RoadNetwork,
    buildings: Option<&[LocalPoint]>,
    config: &MatchConfig,
    jobs: usize,
) -> Vec<MatchResult> {
    let mut groups: Vec<&[EstimateRow]> = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || rows[i].imsi != rows[start].imsi {
            if i > start {
                groups.push(&rows[start..i]);
            }
            start = i;
        }
    }
    let projection = *net.projection();
    let per_user: Vec<Vec<MatchResult>> = with_jobs(jobs, || {
        groups
            .par_iter()
            .map(|g| {
                // Rows come from our own projection, so they are always in range.
                let pts: Vec<LocalPoint> = g.iter().map(|r| projection.to_local_unchecked(r.position)).collect();
                let labels: Vec<EpisodeLabel> = g.iter().map(|r| r.label).collect();
                match_trajectory(&pts, &labels, net, buildings, config)
            })
            .collect()
    });
    per_user.into_iter().flatten().collect()
}

pub fn write_matched<W: Write>(
    out: W,
    rows: &[EstimateRow],
    matches: &[MatchResult],
    projection: &LocalProjection,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MATCHED_HEADER).map_err(IngestError::from)?;
    for (r, m) in rows.iter().zip(matches) {
        let (mlat, mlon) = match m.matched {
            Some(p) => {
                let g = projection.from_local(p);
                (fmt_deg(g.lat), fmt_deg(g.lon))
            }
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.imsi.clone(),
            r.timestamp.to_string(),
            r.label.as_str().to_string(),
            fmt_deg(r.position.lat),
            fmt_deg(r.position.lon),
            mlat,
            mlon,
            m.target_id.map(|i| i.to_string()).unwrap_or_default(),
            m.distance_m.map(|d| format!("{d:.3}")).unwrap_or_default(),
            m.status.as_str().to_string(),
        ])
        .map_err(IngestError::from)?;
    }
    w.flush().map_err(IngestError::from)?;
    Ok(())
}

pub fn write_extensions<W: Write>(out: W, map: &CoverageMap, ext: &ExtensionVector) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EXTENSIONS_HEADER).map_err(IngestError::from)?;
    for (id, value) in ext.cell_ids.iter().zip(&ext.values) {
        let base = map.get(id).map(|c| c.base_radius).unwrap_or(f64::NAN);
        w.write_record([id.clone(), format!("{base:.6}"), format!("{value:.6}")])
            .map_err(IngestError::from)?;
    }
    w.flush().map_err(IngestError::from)?;
    Ok(())
}

pub fn parse_extensions<R: std::io::Read>(input: R) -> Result<ExtensionVector, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    if rdr.headers()?.iter().ne(EXTENSIONS_HEADER.iter().copied()) {
        return Err(bad_row(1, format!("expected header `{}`", EXTENSIONS_HEADER.join(","))));
    }
    let mut ext = ExtensionVector {
        cell_ids: Vec::new(),
        values: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v = rec[2]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad_row(i as u64 + 2, format!("`{}` is not a finite extension", &rec[2])))?;
        ext.cell_ids.push(rec[0].to_string());
        ext.values.push(v);
    }
    Ok(ext)
}

fn load_extensions(config: &PipelineConfig) -> Result<Option<ExtensionVector>> {
    let path = config.paths.output(EXTENSIONS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(parse_extensions(open(&path)?).map_err(input_err(&path))?))
}

/// Estimates, optional map matching and truth pairing for one variant.
pub fn run_variant(inputs: &Inputs, extensions: Option<&ExtensionVector>, variant: Variant, config: &PipelineConfig) -> Result<Pairing> {
    let ext = if variant.optimized() {
        Some(extensions.ok_or(EvalError::MissingVariant(variant))?)
    } else {
        None
    };
    let map = inputs.coverage_with(ext);
    let users = estimate(&map, &inputs.trajectories, &config.skf, config.jobs)?;
    let rows = estimate_rows(&users, &map.projection, config.skf.threshold, false);
    Ok(pair_rows(inputs, &rows, variant.map_matched(), config))
}

fn pair_rows(inputs: &Inputs, rows: &[EstimateRow], matched: bool, config: &PipelineConfig) -> Pairing {
    let positions: Vec<GeoPoint> = if matched {
        let matches = match_rows(
            rows,
            &inputs.roads,
            inputs.buildings.as_deref(),
            &config.matcher,
            config.jobs,
        );
        let proj = inputs.roads.projection();
        matches.iter().map(|m| proj.from_local(m.position())).collect()
    } else {
        rows.iter().map(|r| r.position).collect()
    };
    let estimates: Vec<Estimate> = rows
        .iter()
        .zip(positions)
        .map(|(r, position)| Estimate {
            imsi: r.imsi.clone(),
            timestamp: r.timestamp,
            position,
            label: r.label,
        })
        .collect();
    eval::pair_truth(&estimates, &inputs.truth, config.eval.max_skew_s)
}

/// Evaluates all four variants on the same inputs.
pub fn evaluate(inputs: &Inputs, extensions: Option<&ExtensionVector>, config: &PipelineConfig) -> Result<EvalReport> {
    let mut runs = BTreeMap::new();
    for opt in [false, true] {
        let ext = if opt {
            Some(extensions.ok_or(EvalError::MissingVariant(Variant::Opt))?)
        } else {
            None
        };
        let map = inputs.coverage_with(ext);
        let users = estimate(&map, &inputs.trajectories, &config.skf, config.jobs)?;
        let rows = estimate_rows(&users, &map.projection, config.skf.threshold, false);
        let (plain, mm) = if opt {
            (Variant::Opt, Variant::OptMm)
        } else {
            (Variant::NoOpt, Variant::NoOptMm)
        };
        runs.insert(plain, pair_rows(inputs, &rows, false, config));
        runs.insert(mm, pair_rows(inputs, &rows, true, config));
    }
    Ok(eval::build_report(&runs, &config.eval)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub cells: usize,
    pub roads: usize,
    pub users: usize,
    pub cdr_records: usize,
    pub truth_fixes: usize,
    pub observations: usize,
}

pub fn cmd_simulate(config: &PipelineConfig) -> Result<SimulateSummary> {
    let out = sim::simulate(&config.sim)?;
    let p = &config.paths;
    let json = |path: &Path, value: &Value| -> Result<()> {
        let mut w = create(path)?;
        ingest::write_json(&mut w, value)?;
        w.flush().map_err(io_err(path))
    };
    json(&p.coverage, &ingest::coverage_geojson(&out.world.coverage_features()))?;
    json(&p.roads, &ingest::roads_geojson(&out.world.road_lines()))?;
    json(&p.buildings, &ingest::buildings_geojson(&out.buildings))?;
    let truth = out.truth_fixes();
    ingest::write_truth(create(&p.truth)?, &truth)?;
    ingest::write_cdr(create(&p.cdr)?, &out.cdr)?;
    ingest::write_observations(create(&p.observations)?, &out.calibration)?;
    ingest::write_observations(create(&p.event_observations)?, &out.event_observations)?;
    let summary = SimulateSummary {
        cells: out.world.cells.len(),
        roads: out.world.roads.len(),
        users: out.tracks.len(),
        cdr_records: out.cdr.len(),
        truth_fixes: truth.len(),
        observations: out.calibration.len(),
    };
    info!("simulated {summary:?}");
    Ok(summary)
}

pub fn cmd_optimize(config: &PipelineConfig) -> Result<OptimizationReport> {
    let map = load_coverage(config)?;
    let observations = load_observations(config)?;
    let (ext, report) = optimize_extensions(&map, &observations, &config.coverage)?;
    let path = config.paths.output(EXTENSIONS_FILE);
    write_extensions(create(&path)?, &map, &ext)?;
    let path = config.paths.output(OPTIMIZATION_REPORT_FILE);
    let value = serde_json::to_value(&report).map_err(IngestError::from)?;
    let mut w = create(&path)?;
    ingest::write_json(&mut w, &value)?;
    w.flush().map_err(io_err(&path))?;
    info!(
        "penalty {:.3} -> {:.3} in {} iterations; covered {:.3} -> {:.3}",
        report.initial_penalty,
        report.final_penalty,
        report.iterations,
        report.covered_fraction_before,
        report.covered_fraction_after
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EstimateOptions {
    /// Ignore the extensions file and use the bare enclosing circles.
    pub no_opt: bool,
    /// Report filtered instead of smoothed positions and labels.
    pub filtered: bool,
}

pub fn cmd_estimate(config: &PipelineConfig, opts: EstimateOptions) -> Result<usize> {
    let mut map = load_coverage(config)?;
    if opts.no_opt {
        map.clear_extensions();
    } else {
        let ext = load_extensions(config)?.ok_or_else(|| {
            PipelineError::MissingInput(format!(
                "{} not found; run `optimize` first or pass --no-opt",
                config.paths.output(EXTENSIONS_FILE).display()
            ))
        })?;
        ext.apply(&mut map);
    }
    let trajectories = load_trajectories(config, &map)?;
    let users = estimate(&map, &trajectories, &config.skf, config.jobs)?;
    let rows = estimate_rows(&users, &map.projection, config.skf.threshold, opts.filtered);
    write_estimates(create(&config.paths.output(ESTIMATES_FILE))?, &rows)?;
    info!("wrote {} estimate(s) for {} user(s)", rows.len(), users.len());
    Ok(rows.len())
}

pub fn cmd_match(config: &PipelineConfig) -> Result<Vec<MatchResult>> {
    let map = load_coverage(config)?;
    let path = config.paths.output(ESTIMATES_FILE);
    let rows = parse_estimates(open(&path)?).map_err(input_err(&path))?;
    let net = load_roads(config, map.projection)?;
    let buildings = if config.matcher.match_stay_buildings {
        let b = load_buildings(config, map.projection)?;
        if b.is_none() {
            warn!("building matching requested but {} is missing", config.paths.buildings.display());
        }
        b
    } else {
        None
    };
    let matches = match_rows(&rows, &net, buildings.as_deref(), &config.matcher, config.jobs);
    write_matched(create(&config.paths.output(MATCHED_FILE))?, &rows, &matches, &map.projection)?;
    let n = matches.iter().filter(|m| m.status == MatchStatus::Matched).count();
    info!("matched {n} of {} estimate(s)", matches.len());
    Ok(matches)
}

pub fn cmd_evaluate(config: &PipelineConfig) -> Result<EvalReport> {
    let inputs = Inputs::load(config)?;
    let ext = load_extensions(config)?;
    let report = evaluate(&inputs, ext.as_ref(), config)?;
    let value = serde_json::to_value(&report).map_err(IngestError::from)?;
    let path = config.paths.output(EVAL_REPORT_FILE);
    let mut w = create(&path)?;
    ingest::write_json(&mut w, &value)?;
    w.flush().map_err(io_err(&path))?;
    write_text(&config.paths.output(HISTOGRAM_CSV_FILE), &eval::histogram_csv(&report))?;
    write_text(&config.paths.output(HISTOGRAM_COLUMNS_FILE), &eval::histogram_columns(&report))?;
    Ok(report)
}

/// simulate → optimize → estimate → match → evaluate.
pub fn run_all(config: &PipelineConfig, opts: EstimateOptions) -> Result<EvalReport> {
    cmd_simulate(config)?;
    cmd_optimize(config)?;
    cmd_estimate(config, opts)?;
    cmd_match(config)?;
    cmd_evaluate(config)
}
