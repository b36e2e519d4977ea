//! Cross-run variance of actor positions and the statistics built on it.
//!
//! Positional variance at one time is the sum of the per-axis population
//! variances across runs, i.e. the mean squared distance to the mean point.
//! The audit statistic is the largest such variance over every actor and
//! time; its square root is the maximum deviation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::trace::{self, Position, RunSet, TraceError};

/// Recorded in report headers so readers know what "variance" meant.
pub const SCALARIZATION: &str = "sum of per-axis population variances (mean squared distance to mean point)";
pub const PRESENCE_POLICY: &str =
    "variance over the runs where the actor is present; times with fewer than 2 present runs are skipped";
pub const SPLIT_RULE: &str = "t_split = earliest collision across runs; pre: t < t_split, post: t >= t_split";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("variance needs at least 2 positions, got {0}")]
    TooFewPositions(usize),
    #[error("non-finite position in variance input")]
    NonFinite,
    #[error("no usable (actor, time) pair: every sample has fewer than 2 contributing runs")]
    NoUsableSamples,
    #[error("no collision to segment")]
    NoCollision,
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Permissible deviation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance(f64);

impl Tolerance {
    pub const DEFAULT_METERS: f64 = 0.01;

    pub fn new(meters: f64) -> Result<Self, MetricsError> {
        if meters > 0.0 && meters.is_finite() {
            Ok(Tolerance(meters))
        } else {
            Err(MetricsError::BadTolerance(meters))
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance(Self::DEFAULT_METERS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Permissible,
    NonPermissible,
}

impl Verdict {
    pub fn is_permissible(self) -> bool {
        self == Verdict::Permissible
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Permissible => "permissible",
            Verdict::NonPermissible => "non_permissible",
        })
    }
}

/// Population variance of a set of positions, summed over the three axes.
///
/// The inputs are sorted first so the result does not depend on run order,
/// then shifted by the first point before the usual two-pass computation.
/// Identical inputs give exactly zero.
pub fn variance_at(positions: &[Position]) -> Result<f64, MetricsError> {
    if positions.len() < 2 {
        return Err(MetricsError::TooFewPositions(positions.len()));
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut sorted = positions.to_vec();
    sorted.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    let n = sorted.len() as f64;
    let origin = sorted[0];
    let axis = |get: fn(&Position) -> f64| {
        let shift = get(&origin);
        let mean = sorted.iter().map(|p| get(p) - shift).sum::<f64>() / n;
        sorted
            .iter()
            .map(|p| {
                let d = (get(p) - shift) - mean;
                d * d
            })
            .sum::<f64>()
            / n
    };
    Ok(axis(|p| p.x) + axis(|p| p.y) + axis(|p| p.z))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationEntry {
    pub t: f64,
    pub variance: f64,
    pub deviation: f64,
    pub presence_count: usize,
}

/// Cross-run deviation of one actor over time.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSeries {
    pub actor_id: String,
    pub entries: Vec<DeviationEntry>,
}

impl DeviationSeries {
    pub fn max_deviation(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.deviation).max_by(f64::total_cmp)
    }
}

pub fn deviation_series(rs: &RunSet, actor_id: &str) -> Result<DeviationSeries, MetricsError> {
    let aligned = trace::align(rs, actor_id)?;
    let mut entries = Vec::new();
    for (i, positions) in aligned.positions_by_time.iter().enumerate() {
        if !aligned.usable(i) {
            continue;
        }
        let variance = variance_at(positions)?;
        entries.push(DeviationEntry {
            t: aligned.times[i],
            variance,
            deviation: variance.sqrt(),
            presence_count: aligned.presence_count[i],
        });
    }
    Ok(DeviationSeries { actor_id: actor_id.to_string(), entries })
}

/// Where the maximum variance was found.
#[derive(Debug, Clone, PartialEq)]
pub struct Argmax {
    pub actor_id: String,
    pub t: f64,
}

/// Maximum variance and its location over a restricted window of series.
#[derive(Debug, Clone, PartialEq)]
pub struct Extremum {
    pub psi: f64,
    pub max_deviation: f64,
    pub argmax: Argmax,
}

/// Scans series entries accepted by `keep`; ties go to the smaller time, then
/// the lexicographically smaller actor id.
fn extremum_where(series: &[DeviationSeries], keep: impl Fn(f64) -> bool) -> Option<Extremum> {
    let mut best: Option<(f64, f64, &str)> = None;
    for s in series {
        for e in s.entries.iter().filter(|e| keep(e.t)) {
            let better = match best {
                None => true,
                Some((psi, t, actor)) => {
                    e.variance > psi
                        || (e.variance == psi
                            && (e.t < t || (e.t == t && s.actor_id.as_str() < actor)))
                }
            };
            if better {
                best = Some((e.variance, e.t, &s.actor_id));
            }
        }
    }
    best.map(|(psi, t, actor)| Extremum {
        psi,
        max_deviation: psi.sqrt(),
        argmax: Argmax { actor_id: actor.to_string(), t },
    })
}

/// Deviation series for every actor in the set. Actors that never appear in
/// two runs at the same time yield empty series.
pub fn all_series(rs: &RunSet) -> Result<Vec<DeviationSeries>, MetricsError> {
    rs.actor_ids()
        .iter()
        .map(|a| deviation_series(rs, a))
        .collect()
}

/// Largest cross-run variance of any actor at any time, with its location.
pub fn max_variance(rs: &RunSet) -> Result<(f64, Argmax), MetricsError> {
    let series = all_series(rs)?;
    let ext = extremum_where(&series, |_| true).ok_or(MetricsError::NoUsableSamples)?;
    Ok((ext.psi, ext.argmax))
}

/// Boundary equality counts as permissible.
pub fn gate(max_deviation: f64, tol: Tolerance) -> Verdict {
    if max_deviation <= tol.value() {
        Verdict::Permissible
    } else {
        Verdict::NonPermissible
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub t_split: f64,
    /// `None` when no usable sample precedes the split.
    pub pre: Option<Extremum>,
    pub post: Option<Extremum>,
}

fn segment_series(series: &[DeviationSeries], t_split: f64) -> Segmentation {
    Segmentation {
        t_split,
        pre: extremum_where(series, |t| t < t_split),
        post: extremum_where(series, |t| t >= t_split),
    }
}

/// Splits the run set at the earliest collision logged in any run.
pub fn segment_pre_post(rs: &RunSet) -> Result<Segmentation, MetricsError> {
    let t_split = rs.earliest_collision().ok_or(MetricsError::NoCollision)?;
    Ok(segment_series(&all_series(rs)?, t_split))
}

/// Maximum deviation of a baseline (zero-load, collision-free) run set.
pub fn noise_floor(baseline: &RunSet) -> Result<f64, MetricsError> {
    if baseline.n() < 2 {
        return Err(TraceError::TooFewRuns(baseline.n()).into());
    }
    Ok(max_variance(baseline)?.0.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditResult {
    pub scenario_id: String,
    pub config_id: String,
    pub n: usize,
    pub psi: f64,
    pub max_deviation: f64,
    pub argmax: Argmax,
    pub per_actor: Vec<DeviationSeries>,
    pub t_split: Option<f64>,
    pub pre_collision_max_deviation: Option<f64>,
    pub post_collision_max_deviation: Option<f64>,
    pub noise_floor: Option<f64>,
    pub tolerance: Tolerance,
    pub verdict: Verdict,
}

/// Full analysis of one run set.
pub fn audit(rs: &RunSet, tol: Tolerance) -> Result<AuditResult, MetricsError> {
    let per_actor = all_series(rs)?;
    let whole = extremum_where(&per_actor, |_| true).ok_or(MetricsError::NoUsableSamples)?;
    let seg = rs.earliest_collision().map(|t| segment_series(&per_actor, t));
    Ok(AuditResult {
        scenario_id: rs.scenario_id.clone(),
        config_id: rs.config_id.clone(),
        n: rs.n(),
        psi: whole.psi,
        max_deviation: whole.max_deviation,
        argmax: whole.argmax,
        t_split: seg.as_ref().map(|s| s.t_split),
        pre_collision_max_deviation: seg.as_ref().and_then(|s| s.pre.as_ref()).map(|e| e.max_deviation),
        post_collision_max_deviation: seg.as_ref().and_then(|s| s.post.as_ref()).map(|e| e.max_deviation),
        per_actor,
        noise_floor: None,
        tolerance: tol,
        verdict: gate(whole.max_deviation, tol),
    })
}

impl AuditResult {
    pub fn with_noise_floor(mut self, floor: f64) -> Self {
        self.noise_floor = Some(floor);
        self
    }

    /// Maximum deviation for the pre-collision window, or the whole run when
    /// nothing collided.
    pub fn pre_collision_or_whole(&self) -> Option<f64> {
        match self.t_split {
            Some(_) => self.pre_collision_max_deviation,
            None => Some(self.max_deviation),
        }
    }

    /// Flat `key=value` summary, one pair per line, in a fixed order.
    pub fn summary(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_else(|| "none".into())
        }
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("scenario_id", self.scenario_id.clone());
        kv("config_id", self.config_id.clone());
        kv("n", self.n.to_string());
        kv("variance_scalarization", SCALARIZATION.into());
        kv("split_rule", SPLIT_RULE.into());
        kv("presence_policy", PRESENCE_POLICY.into());
        kv("psi_m2", self.psi.to_string());
        kv("max_deviation_m", self.max_deviation.to_string());
        kv("argmax_actor", self.argmax.actor_id.clone());
        kv("argmax_t", self.argmax.t.to_string());
        kv("t_split", opt(self.t_split));
        kv("pre_collision_max_deviation_m", opt(self.pre_collision_max_deviation));
        kv("post_collision_max_deviation_m", opt(self.post_collision_max_deviation));
        kv("noise_floor_m", opt(self.noise_floor));
        kv("tolerance_m", self.tolerance.value().to_string());
        kv("verdict", self.verdict.to_string());
        out
    }

    /// Per-actor peak deviation, keyed by actor id.
    pub fn actor_peaks(&self) -> BTreeMap<&str, f64> {
        self.per_actor
            .iter()
            .filter_map(|s| s.max_deviation().map(|m| (s.actor_id.as_str(), m)))
            .collect()
    }
}
