//! Scenario tables, deviation series and sweep curves.
//!
//! Human-readable output is a `key=value` header followed by a plain-text
//! table with two significant figures. CSV output keeps full precision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::{self, AuditResult, Tolerance, Verdict};
use crate::minisim::{self, catalog};
use crate::orchestrate::SweepResult;

pub const DEFAULT_LEVELS: [f64; 5] = [0.0, 25.0, 50.0, 75.0, 95.0];
pub const DEFAULT_UTILIZATION_CAP: f64 = 75.0;
pub const SERIES_HEADER: &str = "t,actor_id,deviation_m,presence_count,noise_floor_m";
pub const SWEEP_HEADER: &str = "level,scenario_id,max_deviation_m,verdict,tolerance_m";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("sweep has no entries")]
    EmptySweep,
    #[error("no results to tabulate")]
    NoResults,
}

fn write_file(path: &Path, text: &str) -> Result<(), ReportError> {
    fs::write(path, text).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

/// Two significant figures in scientific notation, e.g. `5.6e-13`.
pub fn sci(v: f64) -> String {
    format!("{v:.1e}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictionPolicy {
    /// Levels above this utilization are excluded from the restricted column.
    pub utilization_cap: f64,
    /// Restricted values use only the pre-collision window.
    pub pre_collision_only: bool,
}

impl Default for RestrictionPolicy {
    fn default() -> Self {
        RestrictionPolicy { utilization_cap: DEFAULT_UTILIZATION_CAP, pre_collision_only: true }
    }
}

/// One audited campaign placed on the utilization axis.
#[derive(Debug, Clone)]
pub struct LevelResult {
    pub campaign_id: String,
    pub level: f64,
    pub audit: AuditResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub scenario_id: String,
    pub actors: String,
    pub collision: String,
    /// Smallest sample size among the contributing campaigns.
    pub n: usize,
    pub unrestricted: f64,
    /// `None` when no campaign falls inside the restriction.
    pub restricted: Option<f64>,
    pub verdict_unrestricted: Verdict,
    pub verdict_restricted: Option<Verdict>,
    /// Levels present elsewhere in the table but missing for this scenario.
    pub gaps: Vec<f64>,
}

impl TableRow {
    /// A row passes the gate when its restricted value exists, is
    /// permissible and no level is missing.
    pub fn gate_ok(&self) -> bool {
        self.gaps.is_empty() && self.verdict_restricted == Some(Verdict::Permissible)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub campaign_ids: Vec<String>,
    pub toolkit_version: String,
    pub scalarization: String,
    pub split_rule: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainReport {
    pub rows: Vec<TableRow>,
    pub levels: Vec<f64>,
    pub policy: RestrictionPolicy,
    pub noise_floor: Option<f64>,
    pub tolerance: Tolerance,
    pub provenance: Provenance,
}

fn describe(scenario_id: &str, audit: &AuditResult) -> (String, String) {
    match catalog::describe(scenario_id) {
        Some((a, c)) => (a.to_string(), c.to_string()),
        None => (
            format!("{} actors", audit.per_actor.len()),
            if audit.t_split.is_some() { "collision".into() } else { "none".into() },
        ),
    }
}

fn fmax(acc: Option<f64>, v: f64) -> Option<f64> {
    Some(acc.map_or(v, |a| a.max(v)))
}

pub fn build_table(
    results: &[LevelResult],
    policy: RestrictionPolicy,
    tolerance: Tolerance,
    noise_floor: Option<f64>,
) -> Result<DomainReport, ReportError> {
    if results.is_empty() {
        return Err(ReportError::NoResults);
    }
    let mut levels: Vec<f64> = results.iter().map(|r| r.level).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();

    let mut by_scenario: BTreeMap<&str, Vec<&LevelResult>> = BTreeMap::new();
    for r in results {
        by_scenario.entry(r.audit.scenario_id.as_str()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (scenario_id, group) in by_scenario {
        let present: BTreeSet<u64> = group.iter().map(|r| r.level.to_bits()).collect();
        let gaps = levels.iter().copied().filter(|l| !present.contains(&l.to_bits())).collect();
        let mut unrestricted = None;
        let mut restricted = None;
        for r in &group {
            unrestricted = fmax(unrestricted, r.audit.max_deviation);
            if r.level <= policy.utilization_cap {
                let v = if policy.pre_collision_only { r.audit.pre_collision_or_whole() } else { Some(r.audit.max_deviation) };
                if let Some(v) = v {
                    restricted = fmax(restricted, v);
                }
            }
        }
        let unrestricted = unrestricted.expect("groups are nonempty");
        let (actors, collision) = describe(scenario_id, &group[0].audit);
        rows.push(TableRow {
            scenario_id: scenario_id.to_string(),
            actors,
            collision,
            n: group.iter().map(|r| r.audit.n).min().unwrap_or(0),
            unrestricted,
            restricted,
            verdict_unrestricted: metrics::gate(unrestricted, tolerance),
            verdict_restricted: restricted.map(|v| metrics::gate(v, tolerance)),
            gaps,
        });
    }
    let campaign_ids: BTreeSet<String> = results.iter().map(|r| r.campaign_id.clone()).collect();
    Ok(DomainReport {
        rows,
        levels,
        policy,
        noise_floor,
        tolerance,
        provenance: Provenance {
            campaign_ids: campaign_ids.into_iter().collect(),
            toolkit_version: crate::VERSION.to_string(),
            scalarization: metrics::SCALARIZATION.to_string(),
            split_rule: metrics::SPLIT_RULE.to_string(),
        },
    })
}

fn join_levels(levels: &[f64]) -> String {
    levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

impl DomainReport {
    pub fn gate_passes(&self) -> bool {
        self.rows.iter().all(TableRow::gate_ok)
    }

    pub fn restricted_within_unrestricted(&self) -> bool {
        self.rows.iter().all(|r| r.restricted.is_none_or(|v| v <= r.unrestricted))
    }

    /// `key=value` header, a blank line, then the table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("report", "simvar domain report".into());
        kv("toolkit_version", self.provenance.toolkit_version.clone());
        kv("default_dt_physics_s", minisim::DEFAULT_DT_PHYSICS.to_string());
        kv("default_log_interval_s", minisim::DEFAULT_LOG_INTERVAL.to_string());
        kv("default_tolerance_m", Tolerance::DEFAULT_METERS.to_string());
        kv("default_levels_percent", join_levels(&DEFAULT_LEVELS));
        kv("tolerance_m", self.tolerance.value().to_string());
        kv("levels_percent", join_levels(&self.levels));
        kv("restricted_utilization_cap_percent", self.policy.utilization_cap.to_string());
        kv("restricted_pre_collision_only", self.policy.pre_collision_only.to_string());
        kv("noise_floor_m", self.noise_floor.map_or("none".into(), sci));
        kv("statistic", "maximum over actors and times; no means are reported".into());
        kv("variance_scalarization", self.provenance.scalarization.clone());
        kv("split_rule", self.provenance.split_rule.clone());
        kv("presence_policy", metrics::PRESENCE_POLICY.into());
        kv("campaigns", self.provenance.campaign_ids.join(","));
        out.push('\n');

        let header = [
            "scenario",
            "actors",
            "collision",
            "n",
            "max_dev_unrestricted_m",
            "verdict",
            "max_dev_restricted_m",
            "verdict",
            "gaps",
        ];
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            table.push(vec![
                r.scenario_id.clone(),
                r.actors.clone(),
                r.collision.clone(),
                r.n.to_string(),
                sci(r.unrestricted),
                r.verdict_unrestricted.to_string(),
                r.restricted.map_or("GAP".into(), sci),
                r.verdict_restricted.map_or("GAP".into(), |v| v.to_string()),
                if r.gaps.is_empty() { "-".into() } else { format!("GAP:{}", join_levels(&r.gaps)) },
            ]);
        }
        out.push_str(&render_columns(&table));
        let _ = writeln!(out, "\ngate={}", if self.gate_passes() { "pass" } else { "fail" });
        out
    }
}

fn render_columns(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

fn series_rows(out: &mut String, series: &metrics::DeviationSeries, floor: &str) {
    for e in &series.entries {
        let _ = writeln!(out, "{},{},{},{},{floor}", e.t, series.actor_id, e.deviation, e.presence_count);
    }
}

/// Writes `series_<actor>.csv` per actor and `series_all.csv` into `dir`.
pub fn emit_series_csv(result: &AuditResult, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
    let floor = result.noise_floor.map(|f| f.to_string()).unwrap_or_default();
    let mut combined = format!("{SERIES_HEADER}\n");
    let mut paths = Vec::new();
    for s in &result.per_actor {
        let mut text = format!("{SERIES_HEADER}\n");
        series_rows(&mut text, s, &floor);
        series_rows(&mut combined, s, &floor);
        let path = dir.join(format!("series_{}.csv", s.actor_id));
        write_file(&path, &text)?;
        paths.push(path);
    }
    let path = dir.join("series_all.csv");
    write_file(&path, &combined)?;
    paths.push(path);
    Ok(paths)
}

pub fn sweep_csv(sweep: &SweepResult) -> Result<String, ReportError> {
    if sweep.entries.is_empty() {
        return Err(ReportError::EmptySweep);
    }
    let mut out = format!("{SWEEP_HEADER}\n");
    for e in &sweep.entries {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.level,
            e.audit.scenario_id,
            e.audit.max_deviation,
            e.audit.verdict,
            e.audit.tolerance.value()
        );
    }
    Ok(out)
}

pub fn emit_sweep_csv(sweep: &SweepResult, path: &Path) -> Result<(), ReportError> {
    write_file(path, &sweep_csv(sweep)?)
}

/// Max deviation against the swept level, with the domain boundary.
pub fn render_sweep(sweep: &SweepResult) -> Result<String, ReportError> {
    let first = sweep.entries.first().ok_or(ReportError::EmptySweep)?;
    let mut out = String::new();
    let _ = writeln!(out, "factor={:?}", sweep.factor);
    let _ = writeln!(out, "scenario_id={}", first.audit.scenario_id);
    let _ = writeln!(out, "tolerance_m={}", first.audit.tolerance.value());
    if let Some(b) = sweep.baseline_utilization {
        let _ = writeln!(out, "baseline_utilization_percent={b:.1}");
    }
    let boundary = sweep.domain_boundary().map_or("none".into(), |b| b.to_string());
    let _ = writeln!(out, "domain_boundary={boundary}");
    out.push('\n');
    let mut table = vec![vec!["level".to_string(), "n".into(), "max_dev_m".into(), "verdict".into(), "config_id".into()]];
    for e in &sweep.entries {
        table.push(vec![
            e.level.to_string(),
            e.audit.n.to_string(),
            sci(e.audit.max_deviation),
            e.audit.verdict.to_string(),
            e.config_id.clone(),
        ]);
    }
    out.push_str(&render_columns(&table));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{audit, Tolerance};
    use crate::minisim::{catalog, derive_seed, simulate};
    use crate::orchestrate::{CampaignConfig, Factor, SweepEntry};
    use crate::trace::RunSet;

    fn audited(id: &str, eps: f64, n: u64) -> AuditResult {
        let mut spec = catalog::scenario_by_id(id).unwrap();
        spec.injectors.collision_impulse_jitter = eps;
        let runs = (0..n)
            .map(|k| {
                let mut s = spec.clone();
                s.injectors.entropy_seed = Some(derive_seed(9, k));
                simulate(&s, 0).unwrap()
            })
            .collect();
        audit(&RunSet::new("c", runs).unwrap(), Tolerance::default()).unwrap()
    }

    fn at(level: f64, a: &AuditResult) -> LevelResult {
        LevelResult { campaign_id: format!("{}-{level}", a.scenario_id), level, audit: a.clone() }
    }

    #[test]
    fn sci_has_two_significant_figures() {
        assert_eq!(sci(5.6e-13), "5.6e-13");
        assert_eq!(sci(0.59), "5.9e-1");
        assert_eq!(sci(0.0), "0.0e0");
    }

    #[test]
    fn single_level_restricted_equals_unrestricted() {
        let a = audited("test5", 0.0, 3);
        let r = build_table(&[at(0.0, &a)], RestrictionPolicy::default(), Tolerance::default(), None).unwrap();
        assert_eq!(r.rows[0].restricted, Some(r.rows[0].unrestricted));
        assert!(r.gate_passes());
    }

    #[test]
    fn cap_excludes_high_levels_from_restricted_only() {
        let quiet = audited("test5", 0.0, 3);
        let mut loud = quiet.clone();
        loud.max_deviation = 0.5;
        loud.pre_collision_max_deviation = None;
        let results: Vec<_> =
            [0.0, 25.0, 50.0, 75.0].iter().map(|&l| at(l, &quiet)).chain([at(95.0, &loud)]).collect();
        let r = build_table(&results, RestrictionPolicy::default(), Tolerance::default(), None).unwrap();
        let row = &r.rows[0];
        assert_eq!(row.unrestricted, 0.5);
        assert_eq!(row.restricted, Some(0.0));
        assert!(row.gate_ok());
        assert!(r.restricted_within_unrestricted());
    }

    #[test]
    fn collision_rows_split_restricted_and_unrestricted() {
        let a = audited("test2", 1e-2, 20);
        let r = build_table(&[at(0.0, &a)], RestrictionPolicy::default(), Tolerance::default(), None).unwrap();
        let row = &r.rows[0];
        assert_eq!(row.restricted, Some(0.0));
        assert!(row.unrestricted > 0.01);
        assert_eq!(row.verdict_unrestricted, Verdict::NonPermissible);
        assert_eq!(row.verdict_restricted, Some(Verdict::Permissible));
        assert_eq!(row.collision, "vehicle-vehicle");
    }

    #[test]
    fn missing_combination_is_a_visible_gap() {
        let a = audited("test5", 0.0, 2);
        let b = audited("test6", 0.0, 2);
        let r = build_table(&[at(0.0, &a), at(50.0, &a), at(0.0, &b)], RestrictionPolicy::default(), Tolerance::default(), None)
            .unwrap();
        let row6 = r.rows.iter().find(|x| x.scenario_id == "test6").unwrap();
        assert_eq!(row6.gaps, vec![50.0]);
        assert!(!r.gate_passes());
        let text = r.render();
        assert!(text.contains("GAP:50"));
        assert!(text.contains("gate=fail"));
    }

    #[test]
    fn header_lists_defaults() {
        let a = audited("test5", 0.0, 2);
        let text = build_table(&[at(0.0, &a)], RestrictionPolicy::default(), Tolerance::default(), Some(0.0))
            .unwrap()
            .render();
        for key in [
            "default_dt_physics_s=0.05",
            "default_log_interval_s=0.1",
            "default_tolerance_m=0.01",
            "default_levels_percent=0,25,50,75,95",
            "noise_floor_m=0.0e0",
        ] {
            assert!(text.contains(key), "{key}");
        }
        assert!(!text.to_lowercase().contains("mean deviation"));
        assert!(build_table(&[], RestrictionPolicy::default(), Tolerance::default(), None).is_err());
    }

    #[test]
    fn series_files_per_actor_plus_combined() {
        let dir = tempfile::tempdir().unwrap();
        let a = audited("test4", 0.0, 3).with_noise_floor(0.0);
        let paths = emit_series_csv(&a, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        let all = fs::read_to_string(dir.path().join("series_all.csv")).unwrap();
        assert!(all.starts_with(SERIES_HEADER));
        assert!(all.lines().skip(1).all(|l| l.split(',').nth(2) == Some("0")));
        assert!(all.lines().skip(1).all(|l| l.ends_with(",0")));
    }

    #[test]
    fn series_shows_step_at_split() {
        let dir = tempfile::tempdir().unwrap();
        let a = audited("test2", 1e-2, 10);
        emit_series_csv(&a, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("series_v2.csv")).unwrap();
        let t_split = a.t_split.unwrap();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (t, d): (f64, f64) = (f[0].parse().unwrap(), f[2].parse().unwrap());
            if t < t_split {
                assert_eq!(d, 0.0);
            }
        }
        assert!(text.lines().skip(1).any(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap() > 0.0));
    }

    fn sweep_of(entries: Vec<(f64, AuditResult)>) -> SweepResult {
        SweepResult {
            factor: Factor::Utilization,
            entries: entries
                .into_iter()
                .map(|(level, audit)| SweepEntry {
                    config_id: format!("c{level}"),
                    level,
                    config: CampaignConfig::new("test5", 2),
                    audit,
                    dir: None,
                })
                .collect(),
            baseline_utilization: None,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn sweep_csv_rows_and_empty_error() {
        assert!(matches!(sweep_csv(&sweep_of(vec![])), Err(ReportError::EmptySweep)));
        let a = audited("test5", 0.0, 2);
        let csv = sweep_csv(&sweep_of(vec![(25.0, a)])).unwrap();
        assert_eq!(csv, format!("{SWEEP_HEADER}\n25,test5,0,permissible,0.01\n"));
    }

    #[test]
    fn sweep_text_marks_the_boundary() {
        let ok = audited("test5", 0.0, 2);
        let mut bad = ok.clone();
        bad.max_deviation = 0.2;
        bad.verdict = Verdict::NonPermissible;
        let text = render_sweep(&sweep_of(vec![(0.0, ok.clone()), (75.0, ok), (95.0, bad)])).unwrap();
        assert!(text.contains("domain_boundary=75"));
        assert!(text.contains("non_permissible"));
    }
}
