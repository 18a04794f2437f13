//! Scores estimates against ground truth: episode accuracy, positional error
//! statistics and the per-variant RMSE table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine, GeoPoint};
use crate::ingest::{EpisodeLabel, TruthFix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least {needed} paired samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("variant {0} was not run")]
    MissingVariant(Variant),
}

/// Pipeline variant: coverage optimization on/off, map matching on/off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "No-opt")]
    NoOpt,
    #[serde(rename = "Opt")]
    Opt,
    #[serde(rename = "No-opt+MM")]
    NoOptMm,
    #[serde(rename = "Opt+MM")]
    OptMm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoOpt, Variant::Opt, Variant::NoOptMm, Variant::OptMm];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NoOpt => "No-opt",
            Self::Opt => "Opt",
            Self::NoOptMm => "No-opt+MM",
            Self::OptMm => "Opt+MM",
        }
    }

    pub fn optimized(&self) -> bool {
        matches!(self, Self::Opt | Self::OptMm)
    }

    pub fn map_matched(&self) -> bool {
        matches!(self, Self::NoOptMm | Self::OptMm)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One position estimate with its predicted episode label.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub imsi: String,
    pub timestamp: i64,
    pub position: GeoPoint,
    pub label: EpisodeLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub imsi: String,
    pub timestamp: i64,
    pub estimate: GeoPoint,
    pub predicted: EpisodeLabel,
    pub truth: GeoPoint,
    pub truth_timestamp: i64,
    pub truth_label: EpisodeLabel,
    /// Haversine distance between estimate and truth, meters.
    pub error_m: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pairing {
    pub pairs: Vec<Pair>,
    /// Estimates with no truth fix within the skew window.
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_skew_s: i64,
    pub histogram_bin_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_skew_s: 60,
            histogram_bin_m: 500.0,
        }
    }
}

/// Index of the fix nearest in time to `ts` (earlier one on a tie).
fn nearest_fix(fixes: &[&TruthFix], ts: i64) -> Option<usize> {
    let i = fixes.partition_point(|f| f.timestamp < ts);
    let before = i.checked_sub(1);
    let after = (i < fixes.len()).then_some(i);
    match (before, after) {
        (Some(b), Some(a)) => {
            if ts - fixes[b].timestamp <= fixes[a].timestamp - ts {
                Some(b)
            } else {
                Some(a)
            }
        }
        (b, a) => b.or(a),
    }
}

/// Pairs every estimate with the same user's truth fix nearest in time,
/// provided it lies within `max_skew_s`. Output follows estimate order.
pub fn pair_truth(estimates: &[Estimate], truth: &[TruthFix], max_skew_s: i64) -> Pairing {
    let mut by_user: BTreeMap<&str, Vec<&TruthFix>> = BTreeMap::new();
    for f in truth {
        by_user.entry(f.imsi.as_str()).or_default().push(f);
    }
    for fixes in by_user.values_mut() {
        fixes.sort_by_key(|f| f.timestamp);
    }
    let matched: Vec<Option<Pair>> = estimates
        .par_iter()
        .map(|e| {
            let fixes = by_user.get(e.imsi.as_str())?;
            let fix = fixes[nearest_fix(fixes, e.timestamp)?];
            ((fix.timestamp - e.timestamp).abs() <= max_skew_s).then(|| Pair {
                imsi: e.imsi.clone(),
                timestamp: e.timestamp,
                estimate: e.position,
                predicted: e.label,
                truth: fix.location,
                truth_timestamp: fix.timestamp,
                truth_label: fix.label,
                error_m: haversine(e.position, fix.location),
            })
        })
        .collect();
    let excluded = matched.iter().filter(|p| p.is_none()).count();
    Pairing {
        pairs: matched.into_iter().flatten().collect(),
        excluded,
    }
}

/// Counts keyed as `<truth>_as_<predicted>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub stay_as_stay: usize,
    pub stay_as_move: usize,
    pub move_as_stay: usize,
    pub move_as_move: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.stay_as_stay + self.stay_as_move + self.move_as_stay + self.move_as_move
    }
}

/// Per-class accuracy; `None` when the class has no truth samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAccuracy {
    pub stay: Option<f64>,
    #[serde(rename = "move")]
    pub move_: Option<f64>,
    pub confusion: Confusion,
}

pub fn episode_accuracy(pairs: &[Pair]) -> EpisodeAccuracy {
    let mut c = Confusion::default();
    for p in pairs {
        match (p.truth_label, p.predicted) {
            (EpisodeLabel::Stay, EpisodeLabel::Stay) => c.stay_as_stay += 1,
            (EpisodeLabel::Stay, EpisodeLabel::Move) => c.stay_as_move += 1,
            (EpisodeLabel::Move, EpisodeLabel::Stay) => c.move_as_stay += 1,
            (EpisodeLabel::Move, EpisodeLabel::Move) => c.move_as_move += 1,
        }
    }
    let ratio = |hit: usize, miss: usize| (hit + miss > 0).then(|| hit as f64 / (hit + miss) as f64);
    EpisodeAccuracy {
        stay: ratio(c.stay_as_stay, c.stay_as_move),
        move_: ratio(c.move_as_move, c.move_as_stay),
        confusion: c,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width_m: f64,
    /// Bin `k` counts errors in `[k·w, (k+1)·w)`.
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(errors: &[f64], bin_width_m: f64) -> Self {
        let mut counts = Vec::new();
        for &e in errors {
            let k = (e / bin_width_m).floor().max(0.0) as usize;
            if counts.len() <= k {
                counts.resize(k + 1, 0);
            }
            counts[k] += 1;
        }
        Self { bin_width_m, counts }
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.counts.len()).map(|k| k as f64 * self.bin_width_m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mean_m: f64,
    /// Population standard deviation.
    pub std_m: f64,
    pub rmse_m: f64,
    pub histogram: Histogram,
}

pub fn error_stats(errors: &[f64], bin_width_m: f64) -> Result<ErrorStats, EvalError> {
    if errors.len() < 2 {
        return Err(EvalError::InsufficientData {
            needed: 2,
            got: errors.len(),
        });
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok(ErrorStats {
        count: errors.len(),
        mean_m: mean,
        std_m: var.sqrt(),
        rmse_m: rmse,
        histogram: Histogram::build(errors, bin_width_m),
    })
}

/// Errors of the pairs whose ground truth carries `label`.
pub fn errors_for(pairs: &[Pair], label: EpisodeLabel) -> Vec<f64> {
    pairs
        .iter()
        .filter(|p| p.truth_label == label)
        .map(|p| p.error_m)
        .collect()
}

/// Root mean square of the errors of one truth class, `None` when it is empty.
pub fn rmse(pairs: &[Pair], label: EpisodeLabel) -> Option<f64> {
    let e = errors_for(pairs, label);
    (!e.is_empty()).then(|| (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub variant: Variant,
    pub stay_m: Option<f64>,
    pub move_m: Option<f64>,
}

/// Stay/Move RMSE for all four variants, in [`Variant::ALL`] order.
pub fn rmse_table(runs: &BTreeMap<Variant, Vec<Pair>>) -> Result<Vec<RmseRow>, EvalError> {
    Variant::ALL
        .iter()
        .map(|v| {
            let pairs = runs.get(v).ok_or(EvalError::MissingVariant(*v))?;
            Ok(RmseRow {
                variant: *v,
                stay_m: rmse(pairs, EpisodeLabel::Stay),
                move_m: rmse(pairs, EpisodeLabel::Move),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub pairs: usize,
    pub excluded: usize,
    pub accuracy: EpisodeAccuracy,
    pub stay_error: Option<ErrorStats>,
    pub move_error: Option<ErrorStats>,
}

/// Values reported by the original field study on its own data. They are
/// context for reading a report, not targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub stay_accuracy_no_opt: f64,
    pub stay_accuracy_opt: f64,
    pub move_accuracy_no_opt: f64,
    pub move_accuracy_opt: f64,
    /// `[mean, std]` in meters.
    pub move_error_no_opt_m: [f64; 2],
    pub move_error_opt_m: [f64; 2],
    pub stay_error_no_opt_m: [f64; 2],
    pub stay_error_opt_m: [f64; 2],
    pub rmse_m: Vec<RmseRow>,
}

impl Default for ReferenceValues {
    fn default() -> Self {
        let row = |variant, stay, mv| RmseRow {
            variant,
            stay_m: Some(stay),
            move_m: Some(mv),
        };
        Self {
            stay_accuracy_no_opt: 0.75,
            stay_accuracy_opt: 0.92,
            move_accuracy_no_opt: 0.54,
            move_accuracy_opt: 0.87,
            move_error_no_opt_m: [4912.9, 6510.4],
            move_error_opt_m: [4937.0, 6083.2],
            stay_error_no_opt_m: [637.0, 2008.1],
            stay_error_opt_m: [476.4, 1739.2],
            rmse_m: vec![
                row(Variant::NoOpt, 2106.8, 8156.1),
                row(Variant::Opt, 1803.3, 7834.5),
                row(Variant::NoOptMm, 2788.1, 4712.1),
                row(Variant::OptMm, 2402.6, 3344.4),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variants: Vec<VariantReport>,
    pub rmse: Vec<RmseRow>,
    pub reference: ReferenceValues,
}

impl EvalReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn rmse_row(&self, v: Variant) -> Option<&RmseRow> {
        self.rmse.iter().find(|r| r.variant == v)
    }
}

/// Builds the full report from paired samples of all four variants.
pub fn build_report(runs: &BTreeMap<Variant, Pairing>, config: &EvalConfig) -> Result<EvalReport, EvalError> {
    let mut variants = Vec::with_capacity(4);
    let mut pairs_by_variant = BTreeMap::new();
    for v in Variant::ALL {
        let run = runs.get(&v).ok_or(EvalError::MissingVariant(v))?;
        let stats = |label| error_stats(&errors_for(&run.pairs, label), config.histogram_bin_m).ok();
        variants.push(VariantReport {
            variant: v,
            pairs: run.pairs.len(),
            excluded: run.excluded,
            accuracy: episode_accuracy(&run.pairs),
            stay_error: stats(EpisodeLabel::Stay),
            move_error: stats(EpisodeLabel::Move),
        });
        pairs_by_variant.insert(v, run.pairs.clone());
    }
    Ok(EvalReport {
        variants,
        rmse: rmse_table(&pairs_by_variant)?,
        reference: ReferenceValues::default(),
    })
}

/// `variant,label,bin_start_m,bin_end_m,count` rows for every histogram.
pub fn histogram_csv(report: &EvalReport) -> String {
    let mut out = String::from("variant,label,bin_start_m,bin_end_m,count\n");
    for v in &report.variants {
        for (label, stats) in [("STAY", &v.stay_error), ("MOVE", &v.move_error)] {
            let Some(s) = stats else { continue };
            let w = s.histogram.bin_width_m;
            for (k, c) in s.histogram.counts.iter().enumerate() {
                let _ = writeln!(out, "{},{label},{},{},{c}", v.variant, k as f64 * w, (k + 1) as f64 * w);
            }
        }
    }
    out
}

/// Whitespace-separated columns (bin centre, then one count column per
/// variant and label) for plotting the error distributions.
pub fn histogram_columns(report: &EvalReport) -> String {
    let series: Vec<(String, Option<&Histogram>)> = report
        .variants
        .iter()
        .flat_map(|v| {
            [
                (format!("{}_stay", v.variant), v.stay_error.as_ref().map(|s| &s.histogram)),
                (format!("{}_move", v.variant), v.move_error.as_ref().map(|s| &s.histogram)),
            ]
        })
        .collect();
    let width = series
        .iter()
        .find_map(|(_, h)| h.map(|h| h.bin_width_m))
        .unwrap_or(500.0);
    let bins = series
        .iter()
        .map(|(_, h)| h.map_or(0, |h| h.counts.len()))
        .max()
        .unwrap_or(0);
    let mut out = String::from("# bin_center_m");
    for (name, _) in &series {
        let _ = write!(out, " {}", name.replace('+', "_").replace('-', "_"));
    }
    out.push('\n');
    for k in 0..bins {
        let _ = write!(out, "{}", (k as f64 + 0.5) * width);
        for (_, h) in &series {
            let c = h.and_then(|h| h.counts.get(k).copied()).unwrap_or(0);
            let _ = write!(out, " {c}");
        }
        out.push('\n');
    }
    out
}
