//! Simulation traces: the per-run record of actor positions, its line-oriented
//! file format, and cross-run alignment.
//!
//! A trace file looks like
//!
//! ```text
//! #simvar-trace v1
//! #meta run_id=r0;scenario_id=test4;seed=42;dt_physics=0.05;log_interval=0.1
//! t,actor_id,x,y,z,event
//! 0,v1,2,13,0,none
//! 0.1,v1,3,13,0,none
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! `parse_trace(write_trace(t)) == t` holds bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

pub const TRACE_MAGIC: &str = "#simvar-trace v1";
const META_PREFIX: &str = "#meta ";
const COLUMNS: &str = "t,actor_id,x,y,z,event";

/// Metadata keys that are written ahead of the free-form map, in this order.
const RESERVED_META: [&str; 5] = ["run_id", "scenario_id", "seed", "dt_physics", "log_interval"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("missing or unsupported header (expected `{TRACE_MAGIC}`)")]
    BadHeader,
    #[error("malformed metadata: {0}")]
    BadMeta(String),
    #[error("malformed row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("non-monotone time at row {row}")]
    NonMonotoneTime { row: usize },
    #[error("duplicate sample (t={t}, actor={actor}) at row {row}")]
    Duplicate { row: usize, t: f64, actor: String },
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("run set needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("runs disagree on {0}")]
    Inconsistent(&'static str),
    #[error("actor `{0}` is absent from every run")]
    UnknownActor(String),
}

/// Actor position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Position { x, y, z }
    }

    pub const fn planar(x: f64, y: f64) -> Self {
        Position { x, y, z: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Position) -> bool {
        self.x.to_bits() == other.x.to_bits()
            && self.y.to_bits() == other.y.to_bits()
            && self.z.to_bits() == other.z.to_bits()
    }

    pub fn distance(&self, other: &Position) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    None,
    Collision(String),
    Destroyed,
}

impl Event {
    pub fn is_collision(&self) -> bool {
        matches!(self, Event::Collision(_))
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::None => f.write_str("none"),
            Event::Collision(other) => write!(f, "collision:{other}"),
            Event::Destroyed => f.write_str("destroyed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub actor_id: String,
    pub position: Position,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub run_id: String,
    pub scenario_id: String,
    pub seed: u64,
    pub dt_physics: f64,
    pub log_interval: f64,
    pub samples: Vec<TraceSample>,
    pub metadata: BTreeMap<String, String>,
}

/// Identifiers end up inside CSV cells and `key=value;` lists.
pub fn valid_identifier(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Index of `t` on the logging grid, if it sits on it.
fn grid_index(t: f64, log_interval: f64) -> Option<i64> {
    let k = (t / log_interval).round();
    if (t / log_interval - k).abs() <= 1e-6 {
        Some(k as i64)
    } else {
        None
    }
}

impl RunTrace {
    /// Checks every structural invariant of a trace.
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |msg: String| Err(TraceError::Invalid(msg));
        if !valid_identifier(&self.run_id) {
            return bad(format!("run_id `{}` is not a valid identifier", self.run_id));
        }
        if !valid_identifier(&self.scenario_id) {
            return bad(format!("scenario_id `{}` is not a valid identifier", self.scenario_id));
        }
        if !(self.dt_physics > 0.0 && self.dt_physics.is_finite()) {
            return bad(format!("dt_physics must be positive, got {}", self.dt_physics));
        }
        if !(self.log_interval > 0.0 && self.log_interval.is_finite()) {
            return bad(format!("log_interval must be positive, got {}", self.log_interval));
        }
        let ratio = self.log_interval / self.dt_physics;
        if ratio.round() < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return bad(format!(
                "log_interval {} is not a positive integer multiple of dt_physics {}",
                self.log_interval, self.dt_physics
            ));
        }

        // Per actor: last grid index seen, and whether it has been destroyed.
        let mut last: BTreeMap<&str, (i64, bool)> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if !valid_identifier(&s.actor_id) {
                return bad(format!("sample {i}: bad actor id `{}`", s.actor_id));
            }
            if let Event::Collision(other) = &s.event {
                if !valid_identifier(other) {
                    return bad(format!("sample {i}: bad collision partner `{other}`"));
                }
            }
            if !s.position.is_finite() {
                return bad(format!("sample {i}: non-finite position"));
            }
            if !(s.t >= 0.0 && s.t.is_finite()) {
                return bad(format!("sample {i}: time must be finite and nonnegative"));
            }
            let Some(k) = grid_index(s.t, self.log_interval) else {
                return bad(format!("sample {i}: t={} is off the logging grid", s.t));
            };
            if i > 0 {
                let prev = &self.samples[i - 1];
                match prev.t.total_cmp(&s.t).then_with(|| prev.actor_id.cmp(&s.actor_id)) {
                    std::cmp::Ordering::Less => {}
                    std::cmp::Ordering::Equal => {
                        return bad(format!("sample {i}: duplicate ({}, {})", s.t, s.actor_id))
                    }
                    std::cmp::Ordering::Greater => {
                        return bad(format!("sample {i}: samples not sorted by (t, actor_id)"))
                    }
                }
            }
            let destroyed = s.event == Event::Destroyed;
            match last.get_mut(s.actor_id.as_str()) {
                None => {
                    last.insert(&s.actor_id, (k, destroyed));
                }
                Some((prev_k, gone)) => {
                    if *gone {
                        return bad(format!("sample {i}: actor `{}` logged after destruction", s.actor_id));
                    }
                    if k != *prev_k + 1 {
                        return bad(format!("sample {i}: actor `{}` has a gap in its samples", s.actor_id));
                    }
                    *prev_k = k;
                    *gone = destroyed;
                }
            }
        }
        Ok(())
    }

    pub fn actor_ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.actor_id.as_str()).collect()
    }

    /// Earliest sample time carrying a collision or destruction event.
    pub fn first_collision_time(&self) -> Option<f64> {
        self.samples
            .iter()
            .find(|s| s.event != Event::None)
            .map(|s| s.t)
    }

    /// The sample rows alone, serialized. Two runs are identical iff these
    /// bytes are equal.
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * 32);
        for s in &self.samples {
            write_row(&mut out, s).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_trace(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }
}

fn escape_meta(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        match c {
            '%' => out.push_str("%25"),
            ';' => out.push_str("%3B"),
            '=' => out.push_str("%3D"),
            '\n' => out.push_str("%0A"),
            '\r' => out.push_str("%0D"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_meta(value: &str) -> Result<String, TraceError> {
    let mut out = String::with_capacity(value.len());
    let mut rest = value;
    while let Some(pos) = rest.find('%') {
        out.push_str(&rest[..pos]);
        let code = rest
            .get(pos + 1..pos + 3)
            .ok_or_else(|| TraceError::BadMeta(format!("truncated escape in `{value}`")))?;
        let c = match code {
            "25" => '%',
            "3B" => ';',
            "3D" => '=',
            "0A" => '\n',
            "0D" => '\r',
            _ => return Err(TraceError::BadMeta(format!("unknown escape %{code}"))),
        };
        out.push(c);
        rest = &rest[pos + 3..];
    }
    out.push_str(rest);
    Ok(out)
}

fn write_row<W: Write>(out: &mut W, s: &TraceSample) -> io::Result<()> {
    writeln!(
        out,
        "{},{},{},{},{},{}",
        s.t, s.actor_id, s.position.x, s.position.y, s.position.z, s.event
    )
}

/// Serializes a trace in the `#simvar-trace v1` format.
pub fn write_trace<W: Write>(trace: &RunTrace, mut out: W) -> Result<(), TraceError> {
    trace.validate()?;
    for key in trace.metadata.keys() {
        if RESERVED_META.contains(&key.as_str()) || key.is_empty() || key.contains(['=', ';', '\n', '%']) {
            return Err(TraceError::BadMeta(format!("metadata key `{key}` is reserved or malformed")));
        }
    }
    writeln!(out, "{TRACE_MAGIC}")?;
    write!(
        out,
        "{META_PREFIX}run_id={};scenario_id={};seed={};dt_physics={};log_interval={}",
        trace.run_id, trace.scenario_id, trace.seed, trace.dt_physics, trace.log_interval
    )?;
    for (k, v) in &trace.metadata {
        write!(out, ";{k}={}", escape_meta(v))?;
    }
    writeln!(out)?;
    writeln!(out, "{COLUMNS}")?;
    for s in &trace.samples {
        write_row(&mut out, s)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_f64(field: &str, name: &str, row: usize) -> Result<f64, TraceError> {
    let v: f64 = field.parse().map_err(|_| TraceError::Malformed {
        row,
        reason: format!("{name} `{field}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(TraceError::Malformed { row, reason: format!("{name} is not finite") });
    }
    Ok(v)
}

fn parse_event(field: &str, row: usize) -> Result<Event, TraceError> {
    match field {
        "none" => Ok(Event::None),
        "destroyed" => Ok(Event::Destroyed),
        _ => match field.strip_prefix("collision:") {
            Some(other) if valid_identifier(other) => Ok(Event::Collision(other.to_string())),
            _ => Err(TraceError::Malformed { row, reason: format!("unknown event `{field}`") }),
        },
    }
}

/// Parses a `#simvar-trace v1` document. Row numbers in errors are 1-based
/// line numbers of the input.
pub fn parse_trace(bytes: &[u8]) -> Result<RunTrace, TraceError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| TraceError::Malformed { row: 0, reason: format!("not UTF-8: {e}") })?;
    let body = text.strip_suffix('\n').unwrap_or(text);
    let mut lines = body.split('\n').enumerate().peekable();

    match lines.next() {
        Some((_, TRACE_MAGIC)) => {}
        _ => return Err(TraceError::BadHeader),
    }
    let meta_line = match lines.next() {
        Some((_, line)) => line
            .strip_prefix(META_PREFIX)
            .ok_or_else(|| TraceError::BadMeta("second line must start with `#meta `".into()))?,
        None => return Err(TraceError::BadMeta("missing #meta line".into())),
    };

    let mut metadata = BTreeMap::new();
    for pair in meta_line.split(';') {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| TraceError::BadMeta(format!("entry `{pair}` lacks `=`")))?;
        if metadata.insert(k.to_string(), unescape_meta(v)?).is_some() {
            return Err(TraceError::BadMeta(format!("duplicate key `{k}`")));
        }
    }
    let mut take = |key: &str| {
        metadata
            .remove(key)
            .ok_or_else(|| TraceError::BadMeta(format!("missing `{key}`")))
    };
    let run_id = take("run_id")?;
    let scenario_id = take("scenario_id")?;
    let seed = take("seed")?
        .parse::<u64>()
        .map_err(|e| TraceError::BadMeta(format!("seed: {e}")))?;
    let dt_physics = take("dt_physics")?
        .parse::<f64>()
        .map_err(|e| TraceError::BadMeta(format!("dt_physics: {e}")))?;
    let log_interval = take("log_interval")?
        .parse::<f64>()
        .map_err(|e| TraceError::BadMeta(format!("log_interval: {e}")))?;

    if let Some(&(_, COLUMNS)) = lines.peek() {
        lines.next();
    }

    let mut samples: Vec<TraceSample> = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        if line.is_empty() {
            return Err(TraceError::Malformed { row, reason: "empty line".into() });
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(TraceError::Malformed {
                row,
                reason: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let t = parse_f64(fields[0], "t", row)?;
        let actor_id = fields[1];
        if !valid_identifier(actor_id) {
            return Err(TraceError::Malformed { row, reason: format!("bad actor id `{actor_id}`") });
        }
        let position = Position::new(
            parse_f64(fields[2], "x", row)?,
            parse_f64(fields[3], "y", row)?,
            parse_f64(fields[4], "z", row)?,
        );
        let event = parse_event(fields[5], row)?;
        if let Some(prev) = samples.last() {
            if t < prev.t {
                return Err(TraceError::NonMonotoneTime { row });
            }
            if t == prev.t {
                match prev.actor_id.as_str().cmp(actor_id) {
                    std::cmp::Ordering::Less => {}
                    std::cmp::Ordering::Equal => {
                        return Err(TraceError::Duplicate { row, t, actor: actor_id.to_string() })
                    }
                    std::cmp::Ordering::Greater => {
                        // Out of order within a time slice; still a duplicate if seen before.
                        let dup = samples
                            .iter()
                            .rev()
                            .take_while(|s| s.t == t)
                            .any(|s| s.actor_id == actor_id);
                        if dup {
                            return Err(TraceError::Duplicate { row, t, actor: actor_id.to_string() });
                        }
                        return Err(TraceError::Malformed {
                            row,
                            reason: "actors within a time slice must be sorted".into(),
                        });
                    }
                }
            }
        }
        samples.push(TraceSample { t, actor_id: actor_id.to_string(), position, event });
    }

    let trace = RunTrace { run_id, scenario_id, seed, dt_physics, log_interval, samples, metadata };
    trace.validate()?;
    Ok(trace)
}

/// Repeated runs of one scenario under one configuration.
#[derive(Debug, Clone)]
pub struct RunSet {
    pub scenario_id: String,
    pub config_id: String,
    pub runs: Vec<RunTrace>,
}

impl RunSet {
    /// Builds a run set, checking that all runs share scenario and timing.
    /// An empty or single-run set is allowed here; variance routines reject it.
    pub fn new(config_id: impl Into<String>, runs: Vec<RunTrace>) -> Result<Self, TraceError> {
        let scenario_id = runs.first().map(|r| r.scenario_id.clone()).unwrap_or_default();
        if let Some(first) = runs.first() {
            for r in &runs[1..] {
                if r.scenario_id != first.scenario_id {
                    return Err(TraceError::Inconsistent("scenario_id"));
                }
                if r.dt_physics.to_bits() != first.dt_physics.to_bits() {
                    return Err(TraceError::Inconsistent("dt_physics"));
                }
                if r.log_interval.to_bits() != first.log_interval.to_bits() {
                    return Err(TraceError::Inconsistent("log_interval"));
                }
            }
        }
        Ok(RunSet { scenario_id, config_id: config_id.into(), runs })
    }

    pub fn n(&self) -> usize {
        self.runs.len()
    }

    pub fn actor_ids(&self) -> BTreeSet<String> {
        self.runs
            .iter()
            .flat_map(|r| r.actor_ids())
            .map(str::to_string)
            .collect()
    }

    /// True when every run serializes to the same sample rows.
    pub fn all_identical(&self) -> bool {
        let mut bodies = self.runs.iter().map(RunTrace::body_bytes);
        match bodies.next() {
            Some(first) => bodies.all(|b| b == first),
            None => true,
        }
    }

    /// Earliest collision time over every run in the set.
    pub fn earliest_collision(&self) -> Option<f64> {
        self.runs
            .iter()
            .filter_map(RunTrace::first_collision_time)
            .min_by(f64::total_cmp)
    }
}

/// One actor's positions grouped by sample time across the runs of a set.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSeries {
    pub actor_id: String,
    pub times: Vec<f64>,
    pub positions_by_time: Vec<Vec<Position>>,
    pub presence_count: Vec<usize>,
}

impl AlignedSeries {
    /// Variance is only defined where at least two runs contribute.
    pub fn usable(&self, i: usize) -> bool {
        self.presence_count[i] >= 2
    }
}

/// Groups an actor's positions by exact sample time across runs. A
/// `destroyed` sample is the last one a run contributes for that actor.
pub fn align(rs: &RunSet, actor_id: &str) -> Result<AlignedSeries, TraceError> {
    if rs.n() < 2 {
        return Err(TraceError::TooFewRuns(rs.n()));
    }
    // Nonnegative finite f64s order the same way as their bit patterns.
    let mut by_time: BTreeMap<u64, Vec<Position>> = BTreeMap::new();
    let mut seen = false;
    for run in &rs.runs {
        for s in run.samples.iter().filter(|s| s.actor_id == actor_id) {
            seen = true;
            by_time.entry(s.t.to_bits()).or_default().push(s.position);
            if s.event == Event::Destroyed {
                break;
            }
        }
    }
    if !seen {
        return Err(TraceError::UnknownActor(actor_id.to_string()));
    }
    let mut series = AlignedSeries {
        actor_id: actor_id.to_string(),
        times: Vec::with_capacity(by_time.len()),
        positions_by_time: Vec::with_capacity(by_time.len()),
        presence_count: Vec::with_capacity(by_time.len()),
    };
    for (bits, positions) in by_time {
        series.times.push(f64::from_bits(bits));
        series.presence_count.push(positions.len());
        series.positions_by_time.push(positions);
    }
    Ok(series)
}
