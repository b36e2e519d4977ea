//! Repeated-run campaigns, one-factor sweeps and sample-size escalation.
//!
//! A campaign owns the environment for its lifetime: the load generator,
//! a utilization monitor, and the runner thread(s) that carry the requested
//! scheduling priority and CPU pinning. Dropping the campaign restores
//! everything, including on error paths.
//!
//! On disk a campaign is `campaigns/<id>/` holding `manifest.toml`,
//! `scenario.scn` and `runs/<k>.trace`.

use std::fs;
use std::io::Read;
use std::ops::Range;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loadgen::{self, LoadError, LoadGenerator, LoadTarget, UtilizationMonitor};
use crate::metrics::{self, AuditResult, MetricsError, Tolerance, Verdict};
use crate::minisim::{self, scenario_file, ScenarioSpec, SimError};
use crate::trace::{self, RunSet, RunTrace, TraceError};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SCENARIO_FILE: &str = "scenario.scn";
pub const RUNS_DIR: &str = "runs";
pub const CAMPAIGNS_DIR: &str = "campaigns";
/// Campaigns abort once more than this fraction of planned runs fail.
pub const FAILURE_LIMIT: f64 = 0.01;
/// Baseline utilization above which a sweep warns that the host is busy.
pub const BUSY_BASELINE_PERCENT: f64 = 10.0;
pub const NICE_RANGE: std::ops::RangeInclusive<i32> = -20..=19;

#[derive(Debug, Error)]
pub enum OrchestrateError {
    #[error("invalid campaign config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("campaign aborted: {failed} failed runs exceed 1% of {planned}; last failure: {last}")]
    Aborted { failed: usize, planned: usize, last: String },
    #[error("no successful runs")]
    NoRuns,
    #[error("bad manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

impl OrchestrateError {
    /// Failures of the adapter or the host environment, as opposed to bad input.
    pub fn is_environmental(&self) -> bool {
        matches!(self, OrchestrateError::Load(_) | OrchestrateError::Io { .. } | OrchestrateError::Aborted { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestrateError + '_ {
    move |source| OrchestrateError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimulatorAdapter {
    Embedded,
    /// Shell command template with `{scenario_file}`, `{seed}`, `{out_trace}`
    /// and optionally `{entropy_seed}` placeholders.
    External { template: String, timeout_secs: f64 },
}

impl SimulatorAdapter {
    pub fn external(template: impl Into<String>, timeout: Duration) -> Self {
        SimulatorAdapter::External { template: template.into(), timeout_secs: timeout.as_secs_f64() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimulatorAdapter::Embedded => "embedded",
            SimulatorAdapter::External { .. } => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    FixedSingleSeed(#[serde(with = "crate::u64_string")] u64),
    PerRunSeed(#[serde(with = "crate::u64_string")] u64),
}

impl SeedPolicy {
    pub fn seed_for(&self, k: usize) -> u64 {
        match *self {
            SeedPolicy::FixedSingleSeed(s) => s,
            SeedPolicy::PerRunSeed(base) => base.wrapping_add(k as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    /// Catalog id or scenario file path.
    pub scenario: String,
    pub n: usize,
    pub seed_policy: SeedPolicy,
    /// Base for per-run injector entropy; falls back to the scenario's own
    /// `entropy_seed`, and to OS entropy when neither is set.
    #[serde(default, with = "crate::u64_string::opt", skip_serializing_if = "Option::is_none")]
    pub entropy_base: Option<u64>,
    pub load: LoadTarget,
    pub priority: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinning: Option<Vec<usize>>,
    pub tolerance: f64,
    pub stop_on_collision: bool,
    #[serde(default)]
    pub parallel: bool,
    /// Seconds to let the load settle before the first run.
    #[serde(default)]
    pub settle_secs: f64,
}

impl CampaignConfig {
    pub fn new(scenario: impl Into<String>, n: usize) -> Self {
        CampaignConfig {
            scenario: scenario.into(),
            n,
            seed_policy: SeedPolicy::FixedSingleSeed(0),
            entropy_base: None,
            load: LoadTarget::idle(),
            priority: 0,
            pinning: None,
            tolerance: Tolerance::DEFAULT_METERS,
            stop_on_collision: false,
            parallel: false,
            settle_secs: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestrateError> {
        let bad = |m: String| Err(OrchestrateError::Config(m));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if !NICE_RANGE.contains(&self.priority) {
            return bad(format!("priority {} outside -20..=19", self.priority));
        }
        if !(0.0..=100.0).contains(&self.load.cpu_percent) {
            return bad(format!("load {} outside [0, 100]", self.load.cpu_percent));
        }
        if let Some(cores) = &self.pinning {
            let max = loadgen::logical_cpus();
            if cores.is_empty() || cores.iter().any(|&c| c >= max) {
                return bad(format!("pinning {cores:?} must name cores in 0..{max}"));
            }
        }
        Tolerance::new(self.tolerance)?;
        if !(self.settle_secs.is_finite() && self.settle_secs >= 0.0) {
            return bad("settle_secs must be >= 0".into());
        }
        Ok(())
    }

    /// Readable id encoding the controlled variables.
    pub fn config_id(&self, scenario_id: &str) -> String {
        let mut id = format!("{scenario_id}-load{}-nice{}", self.load.cpu_percent, self.priority);
        if let Some(cores) = &self.pinning {
            let list: Vec<String> = cores.iter().map(|c| c.to_string()).collect();
            id.push_str(&format!("-pin{}", list.join("_")));
        }
        if self.stop_on_collision {
            id.push_str("-stop");
        }
        if self.parallel {
            id.push_str("-par");
        }
        id
    }
}

/// Names of the fields in which two configs differ (`n` excluded).
pub fn config_diff(a: &CampaignConfig, b: &CampaignConfig) -> Vec<&'static str> {
    let mut d = Vec::new();
    let mut check = |name, differs: bool| {
        if differs {
            d.push(name);
        }
    };
    check("scenario", a.scenario != b.scenario);
    check("seed_policy", a.seed_policy != b.seed_policy);
    check("entropy_base", a.entropy_base != b.entropy_base);
    check("load", a.load.cpu_percent.to_bits() != b.load.cpu_percent.to_bits());
    check("gpu_command", a.load.gpu_command != b.load.gpu_command);
    check("workers", a.load.workers != b.load.workers);
    check("priority", a.priority != b.priority);
    check("pinning", a.pinning != b.pinning);
    check("tolerance", a.tolerance.to_bits() != b.tolerance.to_bits());
    check("stop_on_collision", a.stop_on_collision != b.stop_on_collision);
    check("parallel", a.parallel != b.parallel);
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub index: usize,
    pub reason: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub stderr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub campaign_id: String,
    pub config_id: String,
    pub scenario_id: String,
    pub toolkit_version: String,
    pub adapter: SimulatorAdapter,
    pub config: CampaignConfig,
    pub completed: usize,
    #[serde(default)]
    pub utilization_invalid: bool,
    #[serde(default)]
    pub failed: Vec<FailedRun>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest, OrchestrateError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        toml::from_str(&text).map_err(|e| OrchestrateError::Manifest { path, reason: e.to_string() })
    }

    fn write(&self, dir: &Path) -> Result<(), OrchestrateError> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self)
            .map_err(|e| OrchestrateError::Manifest { path: path.clone(), reason: e.to_string() })?;
        fs::write(&path, text).map_err(io_err(&path))
    }
}

pub fn campaign_dir(out: &Path, campaign_id: &str) -> PathBuf {
    out.join(CAMPAIGNS_DIR).join(campaign_id)
}

pub fn run_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(RUNS_DIR).join(format!("{k}.trace"))
}

/// Where the campaign's artifacts go.
enum Storage {
    Memory,
    Dir(PathBuf),
    Temp(tempfile::TempDir),
}

impl Storage {
    fn path(&self) -> Option<&Path> {
        match self {
            Storage::Memory => None,
            Storage::Dir(p) => Some(p),
            Storage::Temp(t) => Some(t.path()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub campaign_id: String,
    pub run_set: RunSet,
    pub failed: Vec<FailedRun>,
    pub warnings: Vec<String>,
    pub dir: Option<PathBuf>,
}

/// A live campaign holding the environment controls.
pub struct Campaign<'a> {
    adapter: &'a SimulatorAdapter,
    config: CampaignConfig,
    campaign_id: String,
    config_id: String,
    spec: ScenarioSpec,
    entropy_base: Option<u64>,
    storage: Storage,
    load: LoadGenerator,
    monitor: Option<UtilizationMonitor>,
    runs: Vec<(usize, RunTrace)>,
    failed: Vec<FailedRun>,
    warnings: Vec<String>,
}

impl<'a> Campaign<'a> {
    /// Validates the config, prepares storage and starts the load.
    pub fn open(
        adapter: &'a SimulatorAdapter,
        config: CampaignConfig,
        out: Option<&Path>,
        campaign_id: Option<&str>,
    ) -> Result<Self, OrchestrateError> {
        config.validate()?;
        if let SimulatorAdapter::External { timeout_secs, .. } = adapter {
            if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                return Err(OrchestrateError::Config("adapter timeout must be positive".into()));
            }
        }
        let mut spec = scenario_file::load(&config.scenario)?;
        spec.stop_on_collision |= config.stop_on_collision;
        spec.injectors.ambient_load_percent = config.load.cpu_percent;
        spec.injectors.ambient_nice = config.priority;
        spec.validate()?;

        let config_id = config.config_id(&spec.scenario_id);
        let campaign_id = campaign_id.map(str::to_string).unwrap_or_else(|| config_id.clone());
        if !trace::valid_identifier(&campaign_id) {
            return Err(OrchestrateError::Config(format!("campaign id `{campaign_id}` is not a valid identifier")));
        }
        let storage = match (out, adapter) {
            (Some(out), _) => {
                let dir = campaign_dir(out, &campaign_id);
                if dir.join(MANIFEST_FILE).exists() {
                    return Err(OrchestrateError::Config(format!("campaign {} already exists", dir.display())));
                }
                Storage::Dir(dir)
            }
            (None, SimulatorAdapter::External { .. }) => {
                Storage::Temp(tempfile::tempdir().map_err(io_err(Path::new("temp dir")))?)
            }
            (None, SimulatorAdapter::Embedded) => Storage::Memory,
        };
        if let Some(dir) = storage.path() {
            let runs = dir.join(RUNS_DIR);
            fs::create_dir_all(&runs).map_err(io_err(&runs))?;
            scenario_file::write(&spec, &dir.join(SCENARIO_FILE))?;
        }

        let mut warnings = Vec::new();
        if config.parallel {
            warn_push(&mut warnings, "parallel runs overlap in time; utilization results are invalid".into());
        }
        let monitor = match UtilizationMonitor::start(loadgen::MIN_SAMPLE_WINDOW) {
            Ok(m) => Some(m),
            Err(e) => {
                warn_push(&mut warnings, format!("utilization monitor unavailable: {e}"));
                None
            }
        };
        let mut load = LoadGenerator::new();
        load.start(config.load.clone())?;
        if config.load.cpu_percent > 0.0 && config.settle_secs > 0.0 {
            thread::sleep(Duration::from_secs_f64(config.settle_secs));
        }
        let entropy_base = config.entropy_base.or(spec.injectors.entropy_seed);

        let campaign = Campaign {
            adapter,
            config,
            campaign_id,
            config_id,
            spec,
            entropy_base,
            storage,
            load,
            monitor,
            runs: Vec::new(),
            failed: Vec::new(),
            warnings,
        };
        campaign.write_manifest()?;
        Ok(campaign)
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn config_id(&self) -> &str {
        &self.config_id
    }

    pub fn completed(&self) -> usize {
        self.runs.len()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.storage.path()
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            campaign_id: self.campaign_id.clone(),
            config_id: self.config_id.clone(),
            scenario_id: self.spec.scenario_id.clone(),
            toolkit_version: crate::VERSION.to_string(),
            adapter: self.adapter.clone(),
            config: self.config.clone(),
            completed: self.runs.len(),
            utilization_invalid: self.config.parallel,
            failed: self.failed.clone(),
            warnings: self.warnings.clone(),
        }
    }

    fn write_manifest(&self) -> Result<(), OrchestrateError> {
        match &self.storage {
            Storage::Dir(dir) => self.manifest().write(dir),
            _ => Ok(()),
        }
    }

    /// Executes runs with indices `range`, appending to the campaign.
    pub fn run_range(&mut self, range: Range<usize>) -> Result<(), OrchestrateError> {
        let jobs: Vec<usize> = range.collect();
        if jobs.is_empty() {
            return Ok(());
        }
        let limit = (self.config.n as f64 * FAILURE_LIMIT).floor() as usize;
        let failed_so_far = AtomicUsize::new(self.failed.len());
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<RunTrace, FailedRun>)>> = Mutex::new(Vec::new());
        let control_notes: Mutex<Vec<String>> = Mutex::new(Vec::new());
        let workers = if self.config.parallel { loadgen::logical_cpus().min(jobs.len()).max(1) } else { 1 };

        let this = &*self;
        thread::scope(|scope| {
            for w in 0..workers {
                let (jobs, next, results, failed_so_far, control_notes) =
                    (&jobs, &next, &results, &failed_so_far, &control_notes);
                thread::Builder::new()
                    .name(format!("sim-runner-{w}"))
                    .spawn_scoped(scope, move || {
                        let controls = match this.adapter {
                            SimulatorAdapter::Embedded => {
                                apply_thread_controls(this.config.priority, this.config.pinning.as_deref())
                            }
                            SimulatorAdapter::External { .. } => Controls::default(),
                        };
                        if w == 0 {
                            control_notes.lock().unwrap().extend(controls.warnings.iter().cloned());
                        }
                        loop {
                            if failed_so_far.load(Ordering::SeqCst) > limit {
                                break;
                            }
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            let Some(&k) = jobs.get(i) else { break };
                            let out = this.execute(k, &controls);
                            if out.is_err() {
                                failed_so_far.fetch_add(1, Ordering::SeqCst);
                            }
                            results.lock().unwrap().push((k, out));
                        }
                    })
                    .expect("spawning a runner thread");
            }
        });

        for note in control_notes.into_inner().unwrap() {
            if !self.warnings.contains(&note) {
                warn_push(&mut self.warnings, note);
            }
        }
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|(k, _)| *k);
        for (k, r) in results {
            match r {
                Ok(t) => self.runs.push((k, t)),
                Err(f) => {
                    warn!("run {k} failed: {}", f.reason);
                    if let Some(dir) = self.storage.path() {
                        if !f.stderr.is_empty() {
                            let _ = fs::write(dir.join(RUNS_DIR).join(format!("{k}.stderr")), &f.stderr);
                        }
                    }
                    self.failed.push(f);
                }
            }
        }
        self.runs.sort_by_key(|(k, _)| *k);
        self.write_manifest()?;
        if self.failed.len() > limit {
            let last = self.failed.last().map(|f| f.reason.clone()).unwrap_or_default();
            return Err(OrchestrateError::Aborted { failed: self.failed.len(), planned: self.config.n, last });
        }
        Ok(())
    }

    fn execute(&self, k: usize, controls: &Controls) -> Result<RunTrace, FailedRun> {
        let seed = self.config.seed_policy.seed_for(k);
        let entropy = self.entropy_base.map(|b| minisim::derive_seed(b, k as u64));
        let wall_start = SystemTime::now();
        let mut trace = match self.adapter {
            SimulatorAdapter::Embedded => {
                let mut spec = self.spec.clone();
                spec.injectors.entropy_seed = entropy;
                minisim::simulate(&spec, seed).map_err(|e| failed(k, e.to_string(), String::new()))?
            }
            SimulatorAdapter::External { template, timeout_secs } => {
                let dir = self.storage.path().expect("external campaigns always have storage");
                let job = ExternalJob {
                    template,
                    timeout: Duration::from_secs_f64(*timeout_secs),
                    scenario_file: &dir.join(SCENARIO_FILE),
                    out_trace: &run_path(dir, k),
                    seed,
                    entropy,
                    priority: self.config.priority,
                    pinning: self.config.pinning.as_deref(),
                };
                let (t, notes) = run_external(&job).map_err(|(reason, stderr)| failed(k, reason, stderr))?;
                for n in notes {
                    warn!("run {k}: {n}");
                }
                if t.scenario_id != self.spec.scenario_id {
                    return Err(failed(
                        k,
                        format!("trace scenario_id `{}` does not match `{}`", t.scenario_id, self.spec.scenario_id),
                        String::new(),
                    ));
                }
                t
            }
        };
        let wall_end = SystemTime::now();

        trace.run_id = format!("{}-{k}", self.config_id);
        let md = &mut trace.metadata;
        md.insert("config_id".into(), self.config_id.clone());
        md.insert("run_index".into(), k.to_string());
        md.insert("adapter".into(), self.adapter.name().into());
        md.insert("util_target".into(), self.config.load.cpu_percent.to_string());
        match self.monitor.as_ref().map(UtilizationMonitor::current) {
            Some(Ok(s)) => {
                md.insert("util_observed".into(), format!("{:.1}", s.cpu_percent_observed));
                md.insert("util_source".into(), s.source.as_str().into());
            }
            _ => {
                md.insert("util_observed".into(), "unavailable".into());
            }
        }
        if let Some(cmd) = self.config.load.effective_gpu_command() {
            md.insert("gpu_load".into(), format!("uncalibrated: {cmd}"));
        }
        md.insert("wall_start".into(), unix_time(wall_start));
        md.insert("wall_end".into(), unix_time(wall_end));
        md.insert("priority".into(), self.config.priority.to_string());
        md.insert("priority_applied".into(), controls.priority_applied.to_string());
        if let Some(cores) = &self.config.pinning {
            let list: Vec<String> = cores.iter().map(|c| c.to_string()).collect();
            md.insert("pinning".into(), list.join(","));
            md.insert("pinning_applied".into(), controls.pinning_applied.to_string());
        }
        if self.config.parallel {
            md.insert("utilization_invalid".into(), "true".into());
        }

        if let Some(dir) = self.storage.path() {
            let path = run_path(dir, k);
            let file = fs::File::create(&path).map_err(|e| failed(k, format!("{}: {e}", path.display()), String::new()))?;
            trace::write_trace(&trace, std::io::BufWriter::new(file))
                .map_err(|e| failed(k, e.to_string(), String::new()))?;
        }
        Ok(trace)
    }

    /// RunSet over the successful runs so far, in index order.
    pub fn run_set(&self) -> Result<RunSet, OrchestrateError> {
        if self.runs.is_empty() {
            return Err(OrchestrateError::NoRuns);
        }
        Ok(RunSet::new(self.config_id.clone(), self.runs.iter().map(|(_, t)| t.clone()).collect())?)
    }

    /// Stops the load and returns the collected runs.
    pub fn finish(mut self) -> Result<CampaignOutcome, OrchestrateError> {
        self.load.stop();
        self.write_manifest()?;
        let run_set = self.run_set()?;
        let dir = match &self.storage {
            Storage::Dir(d) => Some(d.clone()),
            _ => None,
        };
        Ok(CampaignOutcome {
            campaign_id: self.campaign_id.clone(),
            run_set,
            failed: std::mem::take(&mut self.failed),
            warnings: std::mem::take(&mut self.warnings),
            dir,
        })
    }
}

fn warn_push(list: &mut Vec<String>, msg: String) {
    warn!("{msg}");
    list.push(msg);
}

fn failed(index: usize, reason: String, stderr: String) -> FailedRun {
    FailedRun { index, reason, stderr }
}

fn unix_time(t: SystemTime) -> String {
    let d = t.duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:09}", d.as_secs(), d.subsec_nanos())
}

/// Runs `config.n` repetitions and returns the collected RunSet.
pub fn run_repeats(
    adapter: &SimulatorAdapter,
    config: &CampaignConfig,
    out: Option<&Path>,
    campaign_id: Option<&str>,
) -> Result<CampaignOutcome, OrchestrateError> {
    let mut c = Campaign::open(adapter, config.clone(), out, campaign_id)?;
    c.run_range(0..config.n)?;
    c.finish()
}

#[derive(Debug, Clone, Default)]
pub struct Controls {
    pub priority_applied: bool,
    pub pinning_applied: bool,
    pub warnings: Vec<String>,
}

fn cpu_set(cores: &[usize]) -> libc::cpu_set_t {
    // SAFETY: cpu_set_t is plain data and all-zero is the empty set.
    let mut set: libc::cpu_set_t = unsafe { std::mem::zeroed() };
    for &c in cores {
        unsafe { libc::CPU_SET(c, &mut set) };
    }
    set
}

fn affinity_of(pid: libc::pid_t) -> Option<Vec<usize>> {
    let mut set: libc::cpu_set_t = unsafe { std::mem::zeroed() };
    // SAFETY: the pointer and size describe `set`.
    let rc = unsafe { libc::sched_getaffinity(pid, std::mem::size_of::<libc::cpu_set_t>(), &mut set) };
    (rc == 0).then(|| (0..libc::CPU_SETSIZE as usize).filter(|&c| unsafe { libc::CPU_ISSET(c, &set) }).collect())
}

fn nice_of(who: libc::id_t) -> Option<i32> {
    // getpriority can legitimately return -1, so errno decides.
    unsafe { *libc::__errno_location() = 0 };
    let v = unsafe { libc::getpriority(libc::PRIO_PROCESS, who) };
    (std::io::Error::last_os_error().raw_os_error() == Some(0) || v != -1).then_some(v)
}

/// Applies nice and affinity to the calling thread only.
pub fn apply_thread_controls(priority: i32, pinning: Option<&[usize]>) -> Controls {
    let mut c = Controls::default();
    // SAFETY: gettid has no preconditions.
    let tid = unsafe { libc::gettid() };
    let rc = unsafe { libc::setpriority(libc::PRIO_PROCESS, tid as libc::id_t, priority) };
    if rc == 0 && nice_of(tid as libc::id_t) == Some(priority) {
        c.priority_applied = true;
    } else {
        c.warnings.push(format!(
            "could not set priority {priority}: {}; runs use the inherited priority",
            std::io::Error::last_os_error()
        ));
    }
    if let Some(cores) = pinning {
        let set = cpu_set(cores);
        // SAFETY: pid 0 targets the calling thread; `set` is a valid cpu_set_t.
        let rc = unsafe { libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) };
        if rc == 0 && affinity_of(0).as_deref() == Some(cores_sorted(cores).as_slice()) {
            c.pinning_applied = true;
        } else {
            c.warnings.push(format!("could not pin to cores {cores:?}: {}", std::io::Error::last_os_error()));
        }
    }
    c
}

fn cores_sorted(cores: &[usize]) -> Vec<usize> {
    let mut v = cores.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

struct ExternalJob<'a> {
    template: &'a str,
    timeout: Duration,
    scenario_file: &'a Path,
    out_trace: &'a Path,
    seed: u64,
    entropy: Option<u64>,
    priority: i32,
    pinning: Option<&'a [usize]>,
}

pub fn expand_template(template: &str, scenario_file: &Path, seed: u64, out_trace: &Path, entropy: Option<u64>) -> String {
    template
        .replace("{scenario_file}", &scenario_file.display().to_string())
        .replace("{seed}", &seed.to_string())
        .replace("{out_trace}", &out_trace.display().to_string())
        .replace("{entropy_seed}", &entropy.map(|e| e.to_string()).unwrap_or_default())
}

/// Runs one external simulation; on failure returns (reason, stderr).
fn run_external(job: &ExternalJob) -> Result<(RunTrace, Vec<String>), (String, String)> {
    let cmd = expand_template(job.template, job.scenario_file, job.seed, job.out_trace, job.entropy);
    let _ = fs::remove_file(job.out_trace);
    let priority = job.priority;
    let set = job.pinning.map(cpu_set);
    let mut command = Command::new("sh");
    command.arg("-c").arg(&cmd).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::piped()).process_group(0);
    // SAFETY: only async-signal-safe syscalls run between fork and exec.
    unsafe {
        command.pre_exec(move || {
            libc::setpriority(libc::PRIO_PROCESS, 0, priority);
            if let Some(set) = &set {
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), set);
            }
            Ok(())
        });
    }
    let mut child = command.spawn().map_err(|e| (format!("spawn failed: {e}"), String::new()))?;
    let pid = child.id() as libc::pid_t;

    let mut notes = Vec::new();
    if let Some(nice) = nice_of(pid as libc::id_t) {
        if nice != priority {
            notes.push(format!("child runs at nice {nice}, wanted {priority}"));
        }
    }
    if let (Some(cores), Some(actual)) = (job.pinning, affinity_of(pid)) {
        if actual != cores_sorted(cores) {
            notes.push(format!("child pinned to {actual:?}, wanted {cores:?}"));
        }
    }

    let mut stderr_pipe = child.stderr.take().expect("stderr is piped");
    let reader = thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr_pipe.read_to_string(&mut buf);
        buf
    });
    let deadline = Instant::now() + job.timeout;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Ok(status),
            Ok(None) if Instant::now() >= deadline => {
                // SAFETY: signals the child's own process group.
                unsafe { libc::kill(-pid, libc::SIGKILL) };
                let _ = child.wait();
                break Err(format!("timed out after {:.1} s", job.timeout.as_secs_f64()));
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(e) => break Err(format!("wait failed: {e}")),
        }
    };
    let stderr = reader.join().unwrap_or_default();
    let status = status.map_err(|r| (r, stderr.clone()))?;
    if !status.success() {
        return Err((format!("simulator exited with {status}"), stderr));
    }
    let bytes = fs::read(job.out_trace)
        .map_err(|e| (format!("no trace at {}: {e}", job.out_trace.display()), stderr.clone()))?;
    let trace = trace::parse_trace(&bytes).map_err(|e| (format!("unparseable trace: {e}"), stderr.clone()))?;
    Ok((trace, notes))
}

/// Reads a stored campaign back: its manifest and runs in index order.
pub fn load_campaign(dir: &Path) -> Result<(Manifest, RunSet), OrchestrateError> {
    let manifest = Manifest::read(dir)?;
    let runs_dir = dir.join(RUNS_DIR);
    let mut indexed = Vec::new();
    for entry in fs::read_dir(&runs_dir).map_err(io_err(&runs_dir))? {
        let path = entry.map_err(io_err(&runs_dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("trace") {
            continue;
        }
        let Some(k) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        indexed.push((k, path));
    }
    indexed.sort();
    let mut runs = Vec::with_capacity(indexed.len());
    for (_, path) in indexed {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        runs.push(trace::parse_trace(&bytes)?);
    }
    if runs.is_empty() {
        return Err(OrchestrateError::NoRuns);
    }
    let rs = RunSet::new(manifest.config_id.clone(), runs)?;
    Ok((manifest, rs))
}

/// Recomputes the audit of a stored campaign from its trace files alone.
pub fn analyze(dir: &Path) -> Result<(Manifest, AuditResult), OrchestrateError> {
    let (manifest, rs) = load_campaign(dir)?;
    let audit = metrics::audit(&rs, Tolerance::new(manifest.config.tolerance)?)?;
    Ok((manifest, audit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Utilization,
    Priority,
}

impl Factor {
    pub fn config_field(self) -> &'static str {
        match self {
            Factor::Utilization => "load",
            Factor::Priority => "priority",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub config_id: String,
    pub level: f64,
    pub config: CampaignConfig,
    pub audit: AuditResult,
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub factor: Factor,
    pub entries: Vec<SweepEntry>,
    pub baseline_utilization: Option<f64>,
    pub warnings: Vec<String>,
}

impl SweepResult {
    /// Highest level such that it and every lower level are permissible.
    pub fn domain_boundary(&self) -> Option<f64> {
        self.entries
            .iter()
            .take_while(|e| e.audit.verdict == Verdict::Permissible)
            .last()
            .map(|e| e.level)
    }

    /// Checks that consecutive configs differ only in the swept variable.
    pub fn check_one_factor(&self) -> Result<(), String> {
        let allowed = self.factor.config_field();
        for w in self.entries.windows(2) {
            let diff = config_diff(&w[0].config, &w[1].config);
            if diff.iter().any(|f| *f != allowed) {
                return Err(format!("{} and {} differ in {diff:?}", w[0].config_id, w[1].config_id));
            }
        }
        Ok(())
    }
}

fn check_ascending(levels: &[f64]) -> Result<(), OrchestrateError> {
    if levels.is_empty() {
        return Err(OrchestrateError::Config("sweep needs at least one level".into()));
    }
    if levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(OrchestrateError::Config(format!("levels must be strictly ascending: {levels:?}")));
    }
    Ok(())
}

fn sweep(
    adapter: &SimulatorAdapter,
    base: &CampaignConfig,
    factor: Factor,
    levels: &[f64],
    out: Option<&Path>,
    sweep_id: Option<&str>,
) -> Result<SweepResult, OrchestrateError> {
    check_ascending(levels)?;
    let mut warnings = Vec::new();
    let baseline = match loadgen::sample_utilization() {
        Ok(s) => {
            if s.cpu_percent_observed > BUSY_BASELINE_PERCENT {
                warn_push(
                    &mut warnings,
                    format!("host baseline utilization {:.1}% exceeds {BUSY_BASELINE_PERCENT}%", s.cpu_percent_observed),
                );
            }
            Some(s.cpu_percent_observed)
        }
        Err(e) => {
            warn_push(&mut warnings, format!("baseline utilization unavailable: {e}"));
            None
        }
    };
    let mut entries = Vec::new();
    for &level in levels {
        let mut config = base.clone();
        match factor {
            Factor::Utilization => config.load.cpu_percent = level,
            Factor::Priority => config.priority = level as i32,
        }
        let id = sweep_id.map(|s| match factor {
            Factor::Utilization => format!("{s}-load{level}"),
            Factor::Priority => format!("{s}-nice{level}"),
        });
        info!("sweep {factor:?} level {level}");
        let outcome = run_repeats(adapter, &config, out, id.as_deref())?;
        warnings.extend(outcome.warnings.iter().cloned());
        let audit = metrics::audit(&outcome.run_set, Tolerance::new(config.tolerance)?)?;
        entries.push(SweepEntry { config_id: outcome.run_set.config_id.clone(), level, config, audit, dir: outcome.dir });
    }
    let result = SweepResult { factor, entries, baseline_utilization: baseline, warnings };
    result.check_one_factor().map_err(OrchestrateError::Config)?;
    Ok(result)
}

pub fn sweep_utilization(
    adapter: &SimulatorAdapter,
    base: &CampaignConfig,
    levels: &[f64],
    out: Option<&Path>,
    sweep_id: Option<&str>,
) -> Result<SweepResult, OrchestrateError> {
    sweep(adapter, base, Factor::Utilization, levels, out, sweep_id)
}

pub fn sweep_priority(
    adapter: &SimulatorAdapter,
    base: &CampaignConfig,
    priorities: &[i32],
    out: Option<&Path>,
    sweep_id: Option<&str>,
) -> Result<SweepResult, OrchestrateError> {
    let levels: Vec<f64> = priorities.iter().map(|&p| p as f64).collect();
    sweep(adapter, base, Factor::Priority, &levels, out, sweep_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscalationStage {
    pub n: usize,
    pub max_deviation: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct Escalation {
    pub n_final: usize,
    pub audit: AuditResult,
    pub stages: Vec<EscalationStage>,
    pub dir: Option<PathBuf>,
}

/// Cumulative stage sizes 10, 100, 1000, ... capped by `max_n`.
pub fn stage_sizes(max_n: usize) -> Result<Vec<usize>, OrchestrateError> {
    if max_n < 10 {
        return Err(OrchestrateError::Config(format!("max_n must be at least 10, got {max_n}")));
    }
    let mut sizes = Vec::new();
    let mut n = 10usize;
    while n < max_n {
        sizes.push(n);
        n = n.saturating_mul(10);
    }
    sizes.push(max_n);
    Ok(sizes)
}

/// Grows the sample by orders of magnitude, stopping early only on a
/// non-permissible maximum.
pub fn escalate_sample_size(
    adapter: &SimulatorAdapter,
    config: &CampaignConfig,
    tolerance: Tolerance,
    max_n: usize,
    out: Option<&Path>,
    campaign_id: Option<&str>,
) -> Result<Escalation, OrchestrateError> {
    let sizes = stage_sizes(max_n)?;
    let mut config = config.clone();
    config.n = max_n;
    config.tolerance = tolerance.value();
    let mut campaign = Campaign::open(adapter, config, out, campaign_id)?;
    let mut stages = Vec::new();
    let mut done = 0;
    let mut audit = None;
    for n in sizes {
        campaign.run_range(done..n)?;
        done = n;
        let a = metrics::audit(&campaign.run_set()?, tolerance)?;
        info!("escalation stage n={n}: max deviation {:e} m ({})", a.max_deviation, a.verdict);
        stages.push(EscalationStage { n, max_deviation: a.max_deviation, verdict: a.verdict });
        let stop = a.verdict == Verdict::NonPermissible;
        audit = Some(a);
        if stop {
            break;
        }
    }
    let outcome = campaign.finish()?;
    Ok(Escalation {
        n_final: done,
        audit: audit.expect("at least one stage runs"),
        stages,
        dir: outcome.dir,
    })
}
