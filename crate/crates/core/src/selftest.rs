//! Built-in validation suite run by `simvar selftest`.
//!
//! Each check exercises the embedded simulator and the analysis pipeline on
//! this host and reports pass, fail or skip with a one-line detail.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loadgen::{self, LoadGenerator, LoadTarget};
use crate::metrics::{self, Tolerance, Verdict};
use crate::minisim::nav::{plan_cells, FrontierMode, NavGrid};
use crate::minisim::{catalog, derive_seed, scenario_file, simulate, RareSubstepDrop, ScenarioSpec};
use crate::orchestrate::{self, CampaignConfig, SimulatorAdapter};
use crate::report::{self, LevelResult, RestrictionPolicy};
use crate::trace::{Event, Position, RunSet, RunTrace, TraceSample};

pub const SKIP_LOAD_ENV: &str = "SIMVAR_SKIP_LOAD_TEST";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub outcome: Outcome,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Skip => "SKIP",
        };
        write!(f, "{tag} [{:>2}] {}: {} ({:.1} s)", self.id, self.name, self.detail, self.elapsed.as_secs_f64())
    }
}

type CheckResult = Result<String, String>;

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> CheckResult) -> Check {
    let start = Instant::now();
    let (outcome, detail) = match f() {
        Ok(d) if d.starts_with("skipped") => (Outcome::Skip, d),
        Ok(d) => (Outcome::Pass, d),
        Err(d) => (Outcome::Fail, d),
    };
    Check { id, name, outcome, detail, elapsed: start.elapsed() }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Runs `n` embedded simulations with per-run injector entropy.
pub fn entropy_run_set(spec: &ScenarioSpec, n: u64, entropy_base: u64) -> Result<RunSet, String> {
    let runs = (0..n)
        .map(|k| {
            let mut s = spec.clone();
            s.injectors.entropy_seed = Some(derive_seed(entropy_base, k));
            simulate(&s, 0).map_err(err)
        })
        .collect::<Result<Vec<_>, _>>()?;
    RunSet::new("selftest", runs).map_err(err)
}

pub fn jittered(id: &str, eps: f64) -> ScenarioSpec {
    let mut spec = catalog::scenario_by_id(id).expect("catalog id");
    spec.injectors.collision_impulse_jitter = eps;
    spec
}

/// Bit-determinism of every catalog scenario at 0% and 75% load.
pub fn determinism(n: usize) -> Check {
    timed(1, "bit-determinism baseline", || {
        for load in [0.0, 75.0] {
            for id in catalog::CATALOG_IDS {
                let mut config = CampaignConfig::new(id, n);
                config.load = LoadTarget::new(load).map_err(err)?;
                config.settle_secs = 0.5;
                let out = orchestrate::run_repeats(&SimulatorAdapter::Embedded, &config, None, None).map_err(err)?;
                let rs = &out.run_set;
                ensure(rs.n() == n && rs.all_identical(), || format!("{id} at {load}%: traces differ"))?;
                let (psi, _) = metrics::max_variance(rs).map_err(err)?;
                ensure(psi == 0.0, || format!("{id} at {load}%: psi = {psi:e}"))?;
            }
        }
        Ok(format!("6 scenarios x loads {{0, 75}} x n={n}: all byte-identical, psi = 0"))
    })
}

/// Population variance summed over axes via mean squared pairwise distance,
/// an exhaustive formula independent of the two-pass implementation.
pub fn pairwise_variance(points: &[Position]) -> f64 {
    let n = points.len() as f64;
    let mut acc = 0.0;
    for a in points {
        for b in points {
            let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
            acc += dx * dx + dy * dy + dz * dz;
        }
    }
    acc / (2.0 * n * n)
}

/// Exhaustive maximum over every actor and time of a run set.
pub fn brute_force_psi(rs: &RunSet, variance: impl Fn(&[Position]) -> f64) -> f64 {
    let mut cells: std::collections::BTreeMap<(String, u64), Vec<Position>> = Default::default();
    for run in &rs.runs {
        for s in &run.samples {
            cells.entry((s.actor_id.clone(), s.t.to_bits())).or_default().push(s.position);
        }
    }
    cells.values().filter(|p| p.len() >= 2).map(|p| variance(p)).fold(0.0, f64::max)
}

/// Random synthetic run set: n <= 5 runs, <= 3 actors, <= 100 times.
pub fn synthetic_run_set(rng: &mut ChaCha8Rng) -> RunSet {
    let n = rng.gen_range(2..=5);
    let actors = rng.gen_range(1..=3);
    let times = rng.gen_range(1..=100);
    let scale = 10f64.powi(rng.gen_range(-3..=2));
    let runs = (0..n)
        .map(|k| {
            let mut samples = Vec::new();
            for ti in 0..times {
                for a in 0..actors {
                    let p = Position::new(
                        rng.gen_range(-1.0..1.0) * scale + 100.0,
                        rng.gen_range(-1.0..1.0) * scale,
                        rng.gen_range(-1.0..1.0) * scale * 0.1,
                    );
                    samples.push(TraceSample {
                        t: ti as f64 / 10.0,
                        actor_id: format!("a{a}"),
                        position: p,
                        event: Event::None,
                    });
                }
            }
            RunTrace {
                run_id: format!("r{k}"),
                scenario_id: "synthetic".into(),
                seed: 0,
                dt_physics: 0.05,
                log_interval: 0.1,
                samples,
                metadata: Default::default(),
            }
        })
        .collect();
    RunSet::new("synthetic", runs).expect("consistent synthetic runs")
}

pub fn oracle_equivalence(sets: usize) -> Check {
    timed(2, "metrics oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for i in 0..sets {
            let rs = synthetic_run_set(&mut rng);
            let (psi, _) = metrics::max_variance(&rs).map_err(err)?;
            let oracle = brute_force_psi(&rs, pairwise_variance);
            let rel = if oracle == 0.0 { psi.abs() } else { (psi - oracle).abs() / oracle };
            worst = worst.max(rel);
            ensure(rel <= 1e-12, || format!("set {i}: psi {psi:e} vs oracle {oracle:e} (rel {rel:e})"))?;
        }
        Ok(format!("{sets} synthetic sets, worst relative error {worst:.1e} <= 1e-12"))
    })
}

pub fn hand_value() -> Check {
    timed(3, "hand-value variance", || {
        let pts = [Position::new(0.0, 0.0, 0.0), Position::new(0.0, 0.0, 0.0), Position::new(0.0, 0.03, 0.0)];
        let v = metrics::variance_at(&pts).map_err(err)?;
        ensure((v - 2.0e-4).abs() <= 1e-18, || format!("variance {v:e} != 2.0e-4"))?;
        ensure((v.sqrt() - 0.0141421356).abs() <= 1e-9, || format!("deviation {}", v.sqrt()))?;
        Ok(format!("variance {v:e} m^2, deviation {:.10} m", v.sqrt()))
    })
}

pub fn gate_fixture() -> Check {
    timed(4, "gating fixture", || {
        let tol = Tolerance::default();
        let hi = metrics::gate(0.59, tol);
        let lo = metrics::gate(5.6e-13, tol);
        ensure(hi == Verdict::NonPermissible && lo == Verdict::Permissible, || format!("0.59 -> {hi}, 5.6e-13 -> {lo}"))?;
        Ok(format!("0.59 m -> {hi}, 5.6e-13 m -> {lo} at 0.01 m"))
    })
}

fn earliest_logged_collision(rs: &RunSet) -> Option<f64> {
    rs.runs
        .iter()
        .flat_map(|r| r.samples.iter())
        .filter(|s| s.event != Event::None)
        .map(|s| s.t)
        .reduce(f64::min)
}

pub fn pre_post_shape(n: u64) -> Check {
    timed(5, "pre/post-collision shape", || {
        let mut parts = Vec::new();
        for id in ["test2", "test4"] {
            let rs = entropy_run_set(&jittered(id, 1e-2), n, 5)?;
            let seg = metrics::segment_pre_post(&rs).map_err(err)?;
            let expected = earliest_logged_collision(&rs).ok_or(format!("{id}: no collision"))?;
            ensure(seg.t_split == expected, || format!("{id}: split {} != {expected}", seg.t_split))?;
            let pre = seg.pre.map_or(0.0, |e| e.max_deviation);
            let post = seg.post.map_or(0.0, |e| e.max_deviation);
            ensure(pre == 0.0, || format!("{id}: pre-collision max {pre:e}"))?;
            ensure(post > 0.01, || format!("{id}: post-collision max {post:e} <= 0.01"))?;
            parts.push(format!("{id} split {} s pre 0 post {post:.3e}", seg.t_split));
        }
        Ok(parts.join("; "))
    })
}

pub fn delayed_contamination(n: u64) -> Check {
    timed(6, "delayed contamination", || {
        let rs = entropy_run_set(&jittered("test4", 1e-2), n, 6)?;
        let t_split = rs.earliest_collision().ok_or("no collision")?;
        let series = metrics::deviation_series(&rs, "v1").map_err(err)?;
        let early = series.entries.iter().filter(|e| e.t <= t_split).map(|e| e.deviation).fold(0.0, f64::max);
        let first = series.entries.iter().find(|e| e.deviation > 0.0).map(|e| e.t);
        ensure(early == 0.0, || format!("bystander deviates {early:e} before split"))?;
        let first = first.ok_or("bystander never deviates")?;
        Ok(format!("bystander v1 is 0 through t_split {t_split} s, first positive at {first} s"))
    })
}

pub fn monotonicity(n: u64) -> Check {
    timed(7, "injector monotonicity", || {
        let mut parts = Vec::new();
        for id in ["test2", "test4"] {
            let mut last = -1.0;
            let mut values = Vec::new();
            for eps in [0.0, 1e-4, 1e-2] {
                let rs = entropy_run_set(&jittered(id, eps), n, 7)?;
                let post = metrics::segment_pre_post(&rs).map_err(err)?.post.map_or(0.0, |e| e.max_deviation);
                ensure(post >= last, || format!("{id}: eps {eps} gives {post:e} < {last:e}"))?;
                last = post;
                values.push(format!("{post:.1e}"));
            }
            parts.push(format!("{id} {}", values.join(" <= ")));
        }
        Ok(parts.join("; "))
    })
}

/// 9x7 grid walled in column 4 except rows 0 and 6: two equal-cost detours.
pub fn two_route_grid() -> NavGrid {
    let mut grid = NavGrid::open(1.0, 9, 7);
    for r in 1..=5 {
        grid.blocked.insert([4, r]);
    }
    grid
}

pub fn astar_tiebreak(calls: usize) -> Check {
    timed(8, "A* tie-breaking", || {
        let grid = two_route_grid();
        let (start, goal) = ([1, 3], [7, 3]);
        let mut stable = std::collections::BTreeSet::new();
        let mut random = std::collections::BTreeSet::new();
        for k in 0..calls {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let p = plan_cells(&grid, start, goal, FrontierMode::StableInsertionOrder, Some(&mut rng)).map_err(err)?;
            stable.insert(p.cells);
            let p = plan_cells(&grid, start, goal, FrontierMode::RandomTiebreak, Some(&mut rng)).map_err(err)?;
            random.insert(p.cells);
        }
        ensure(stable.len() == 1, || format!("stable mode gave {} routes", stable.len()))?;
        ensure(random.len() >= 2, || format!("random mode gave {} route", random.len()))?;
        Ok(format!("stable: 1 route in {calls} calls; random: {} distinct routes", random.len()))
    })
}

/// Test-1 with a substep drop at 1 s firing in 0.3% of runs.
pub fn escalation_fixture() -> ScenarioSpec {
    let mut spec = catalog::scenario_by_id("test1").expect("catalog id");
    spec.injectors.rare_substep_drop = Some(RareSubstepDrop { probability: 0.003, at_time: 1.0 });
    spec
}

pub fn escalation(scratch: &Path) -> Check {
    timed(9, "sample-size escalation", || {
        let path = scratch.join("escalation.scn");
        scenario_file::write(&escalation_fixture(), &path).map_err(err)?;
        let escalate = |base: u64, max_n: usize| {
            let mut c = CampaignConfig::new(path.display().to_string(), max_n);
            c.entropy_base = Some(base);
            orchestrate::escalate_sample_size(&SimulatorAdapter::Embedded, &c, Tolerance::default(), max_n, None, None)
                .map_err(err)
        };
        let mut small = None;
        for attempt in 0..3u64 {
            let e = escalate(9_000 + attempt, 10)?;
            if e.audit.verdict == Verdict::Permissible {
                small = Some(attempt + 1);
                break;
            }
        }
        let small = small.ok_or("n=10 was non-permissible in 3 attempts")?;
        let mut large = None;
        for attempt in 0..2u64 {
            let e = escalate(9_100 + attempt, 1000)?;
            if e.audit.verdict == Verdict::NonPermissible {
                large = Some(e);
                break;
            }
        }
        let large = large.ok_or("still permissible at n=1000 after one retry")?;
        let stages: Vec<String> =
            large.stages.iter().map(|s| format!("n={} {:.1e} {}", s.n, s.max_deviation, s.verdict)).collect();
        Ok(format!("n=10 permissible (attempt {small}); escalation: {}", stages.join(", ")))
    })
}

pub fn load_accuracy(settle: Duration) -> Check {
    timed(10, "load controller accuracy", || {
        if std::env::var_os(SKIP_LOAD_ENV).is_some() {
            return Ok(format!("skipped: {SKIP_LOAD_ENV} is set"));
        }
        let baseline = loadgen::sample_utilization_over(Duration::from_secs(1)).map_err(err)?.cpu_percent_observed;
        if baseline > orchestrate::BUSY_BASELINE_PERCENT {
            return Ok(format!("skipped: host baseline {baseline:.1}% is not idle"));
        }
        let mut parts = Vec::new();
        for target in [25.0, 50.0, 75.0] {
            let mut g = LoadGenerator::new();
            g.start(LoadTarget::new(target).map_err(err)?).map_err(err)?;
            std::thread::sleep(settle);
            let observed = loadgen::sample_utilization_over(Duration::from_secs(2)).map_err(err)?.cpu_percent_observed;
            g.stop();
            ensure((observed - target).abs() <= 10.0, || format!("target {target}%: observed {observed:.1}%"))?;
            let mut restored = f64::INFINITY;
            let deadline = Instant::now() + Duration::from_secs(5);
            while Instant::now() < deadline {
                restored = loadgen::sample_utilization().map_err(err)?.cpu_percent_observed;
                if (restored - baseline).abs() <= 10.0 {
                    break;
                }
            }
            ensure((restored - baseline).abs() <= 10.0, || {
                format!("after {target}%: {restored:.1}% vs baseline {baseline:.1}%")
            })?;
            parts.push(format!("{target}->{observed:.1}"));
        }
        Ok(format!("baseline {baseline:.1}%, observed {}; restored after each stop", parts.join(", ")))
    })
}

/// Fixture campaigns for the report: every catalog scenario with collision
/// jitter at 0% load, and again at 95% with jitter-under-load switched on.
fn report_campaigns(out: &Path, n: usize) -> Result<(), String> {
    fs::create_dir_all(out).map_err(err)?;
    for id in catalog::CATALOG_IDS {
        let mut spec = jittered(id, 1e-2);
        let path = out.join(format!("{id}.scn"));
        scenario_file::write(&spec, &path).map_err(err)?;
        let mut c = CampaignConfig::new(path.display().to_string(), n);
        c.entropy_base = Some(11);
        orchestrate::run_repeats(&SimulatorAdapter::Embedded, &c, Some(out), Some(&format!("{id}-l0"))).map_err(err)?;

        spec.injectors.timestep_jitter = true;
        spec.injectors.timestep_jitter_probability = 0.2;
        spec.injectors.jitter_load_threshold = Some(75.0);
        let path = out.join(format!("{id}-loaded.scn"));
        scenario_file::write(&spec, &path).map_err(err)?;
        c.scenario = path.display().to_string();
        c.load = LoadTarget::new(95.0).map_err(err)?;
        c.settle_secs = 0.5;
        orchestrate::run_repeats(&SimulatorAdapter::Embedded, &c, Some(out), Some(&format!("{id}-l95"))).map_err(err)?;
    }
    Ok(())
}

/// Analyzes every campaign under `out` and builds the domain report.
pub fn analyze_campaigns(out: &Path, policy: RestrictionPolicy) -> Result<(String, report::DomainReport), String> {
    let mut ids: Vec<String> = fs::read_dir(out.join(orchestrate::CAMPAIGNS_DIR))
        .map_err(err)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    let mut summaries = String::new();
    let mut results = Vec::new();
    for id in ids {
        let (manifest, audit) = orchestrate::analyze(&orchestrate::campaign_dir(out, &id)).map_err(err)?;
        summaries.push_str(&audit.summary());
        results.push(LevelResult { campaign_id: id, level: manifest.config.load.cpu_percent, audit });
    }
    let table = report::build_table(&results, policy, Tolerance::default(), None).map_err(err)?;
    Ok((summaries, table))
}

pub fn report_reproducibility(scratch: &Path, n: usize) -> Check {
    timed(11, "report reproducibility", || {
        let out = scratch.join("report-fixture");
        report_campaigns(&out, n)?;
        let policy = RestrictionPolicy::default();
        let (sum_a, table) = analyze_campaigns(&out, policy)?;
        let (sum_b, table_b) = analyze_campaigns(&out, policy)?;
        ensure(sum_a == sum_b, || "analyze output differs between runs".into())?;
        ensure(table.render() == table_b.render(), || "report output differs between runs".into())?;
        ensure(table.restricted_within_unrestricted(), || "a row has restricted > unrestricted".into())?;
        let worst_restricted = table.rows.iter().filter_map(|r| r.restricted).fold(0.0, f64::max);
        let worst_unrestricted = table.rows.iter().map(|r| r.unrestricted).fold(0.0, f64::max);
        ensure(table.rows.iter().all(|r| r.restricted.is_some()), || "a row has no restricted value".into())?;
        ensure(worst_restricted <= 0.01, || format!("restricted max {worst_restricted:e} > 0.01"))?;
        Ok(format!(
            "{} rows byte-identical across re-runs; restricted max {worst_restricted:.1e} <= 0.01, unrestricted max {worst_unrestricted:.1e}",
            table.rows.len()
        ))
    })
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub include_load: bool,
    pub load_settle: Duration,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions { include_load: true, load_settle: Duration::from_secs(5) }
    }
}

/// Runs all checks in order, calling `each` as soon as one finishes.
pub fn run_all(opts: &SelftestOptions, mut each: impl FnMut(&Check)) -> Vec<Check> {
    let scratch = tempfile::tempdir().expect("creating a scratch directory");
    let mut checks = Vec::new();
    let mut push = |c: Check| {
        each(&c);
        checks.push(c);
    };
    push(determinism(100));
    push(oracle_equivalence(50));
    push(hand_value());
    push(gate_fixture());
    push(pre_post_shape(100));
    push(delayed_contamination(100));
    push(monotonicity(100));
    push(astar_tiebreak(1000));
    push(escalation(scratch.path()));
    if opts.include_load {
        push(load_accuracy(opts.load_settle));
    } else {
        push(timed(10, "load controller accuracy", || Ok("skipped: disabled by option".into())));
    }
    push(report_reproducibility(scratch.path(), 20));
    checks
}
