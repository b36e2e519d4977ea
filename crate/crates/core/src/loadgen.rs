//! Synthetic CPU load and system utilization sampling.
//!
//! Workers spin for `duty * WINDOW` and sleep for the rest of each window.
//! A trim thread compares observed system-wide utilization against the
//! target once a second and nudges the shared duty fraction.

use std::os::unix::process::CommandExt;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GPU_CMD_ENV: &str = "SIMVAR_GPU_LOAD_CMD";
pub const WINDOW: Duration = Duration::from_millis(100);
pub const TRIM_PERIOD: Duration = Duration::from_secs(1);
pub const MIN_SAMPLE_WINDOW: Duration = Duration::from_millis(500);
/// How far trimming may move the duty away from the nominal target.
const TRIM_SPAN: f64 = 0.25;
const TRIM_GAIN: f64 = 0.5;
/// A GPU command that exits inside this grace period is checked for failure.
const GPU_GRACE: Duration = Duration::from_millis(200);

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cpu_percent must be in [0, 100], got {0}")]
    BadTarget(f64),
    #[error("load is already active for this generator")]
    AlreadyActive,
    #[error("failed to spawn load worker: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("gpu load command `{command}` failed: {reason}")]
    GpuCommand { command: String, reason: String },
    #[error("utilization counters unavailable ({0}); supply an external sample")]
    CountersUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadTarget {
    pub cpu_percent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_command: Option<String>,
    #[serde(default = "logical_cpus")]
    pub workers: usize,
}

impl LoadTarget {
    pub fn new(cpu_percent: f64) -> Result<Self, LoadError> {
        if !(0.0..=100.0).contains(&cpu_percent) {
            return Err(LoadError::BadTarget(cpu_percent));
        }
        Ok(LoadTarget { cpu_percent, gpu_command: None, workers: logical_cpus() })
    }

    pub fn idle() -> Self {
        LoadTarget { cpu_percent: 0.0, gpu_command: None, workers: logical_cpus() }
    }

    /// The GPU command after applying the environment override.
    pub fn effective_gpu_command(&self) -> Option<String> {
        match std::env::var(GPU_CMD_ENV) {
            Ok(cmd) if !cmd.trim().is_empty() => Some(cmd),
            _ => self.gpu_command.clone(),
        }
    }
}

pub fn logical_cpus() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilSource {
    OsCounters,
    External,
}

impl UtilSource {
    pub fn as_str(self) -> &'static str {
        match self {
            UtilSource::OsCounters => "os_counters",
            UtilSource::External => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilizationSample {
    pub timestamp: SystemTime,
    pub cpu_percent_observed: f64,
    pub source: UtilSource,
}

impl UtilizationSample {
    /// A value reported by some outside monitor, clamped to [0, 100].
    pub fn external(cpu_percent: f64) -> Self {
        UtilizationSample {
            timestamp: SystemTime::now(),
            cpu_percent_observed: cpu_percent.clamp(0.0, 100.0),
            source: UtilSource::External,
        }
    }
}

/// Aggregate jiffy counters from the `cpu` line of `/proc/stat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CpuCounters {
    pub busy: u64,
    pub total: u64,
}

impl CpuCounters {
    pub fn read() -> Result<Self, LoadError> {
        let text = std::fs::read_to_string("/proc/stat")
            .map_err(|e| LoadError::CountersUnavailable(format!("/proc/stat: {e}")))?;
        Self::parse(&text)
    }

    pub fn parse(stat: &str) -> Result<Self, LoadError> {
        let line = stat
            .lines()
            .find(|l| l.starts_with("cpu "))
            .ok_or_else(|| LoadError::CountersUnavailable("no aggregate cpu line".into()))?;
        let fields: Vec<u64> = line.split_whitespace().skip(1).map_while(|f| f.parse().ok()).collect();
        if fields.len() < 4 {
            return Err(LoadError::CountersUnavailable("short cpu line".into()));
        }
        // guest and guest_nice are already counted in user and nice.
        let total: u64 = fields.iter().take(8).sum();
        let idle = fields[3] + fields.get(4).copied().unwrap_or(0);
        Ok(CpuCounters { busy: total - idle, total })
    }

    /// Busy percentage between `earlier` and `self`.
    pub fn percent_since(&self, earlier: &CpuCounters) -> Option<f64> {
        let total = self.total.checked_sub(earlier.total)?;
        let busy = self.busy.checked_sub(earlier.busy)?;
        (total > 0).then(|| (100.0 * busy as f64 / total as f64).clamp(0.0, 100.0))
    }
}

/// System-wide busy percentage over `window` (at least 500 ms).
pub fn sample_utilization_over(window: Duration) -> Result<UtilizationSample, LoadError> {
    let window = window.max(MIN_SAMPLE_WINDOW);
    let before = CpuCounters::read()?;
    thread::sleep(window);
    let after = CpuCounters::read()?;
    let pct = after
        .percent_since(&before)
        .ok_or_else(|| LoadError::CountersUnavailable("counters did not advance".into()))?;
    Ok(UtilizationSample { timestamp: SystemTime::now(), cpu_percent_observed: pct, source: UtilSource::OsCounters })
}

pub fn sample_utilization() -> Result<UtilizationSample, LoadError> {
    sample_utilization_over(MIN_SAMPLE_WINDOW)
}

/// Background sampler that keeps the most recent windowed measurement.
pub struct UtilizationMonitor {
    latest: Arc<Mutex<Option<UtilizationSample>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl UtilizationMonitor {
    pub fn start(window: Duration) -> Result<Self, LoadError> {
        let window = window.max(MIN_SAMPLE_WINDOW);
        let mut prev = CpuCounters::read()?;
        let latest = Arc::new(Mutex::new(None));
        let stop = Arc::new(AtomicBool::new(false));
        let (l, s) = (latest.clone(), stop.clone());
        let handle = thread::Builder::new()
            .name("util-monitor".into())
            .spawn(move || {
                while sleep_unless(&s, window) {
                    let Ok(now) = CpuCounters::read() else { continue };
                    if let Some(pct) = now.percent_since(&prev) {
                        *l.lock().unwrap() = Some(UtilizationSample {
                            timestamp: SystemTime::now(),
                            cpu_percent_observed: pct,
                            source: UtilSource::OsCounters,
                        });
                    }
                    prev = now;
                }
            })
            .map_err(LoadError::Spawn)?;
        Ok(UtilizationMonitor { latest, stop, handle: Some(handle) })
    }

    /// The latest completed window, or a fresh blocking sample if none exists yet.
    pub fn current(&self) -> Result<UtilizationSample, LoadError> {
        if let Some(s) = *self.latest.lock().unwrap() {
            return Ok(s);
        }
        sample_utilization()
    }
}

impl Drop for UtilizationMonitor {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Sleeps up to `d` in short slices; returns false once `stop` is raised.
fn sleep_unless(stop: &AtomicBool, d: Duration) -> bool {
    let deadline = Instant::now() + d;
    loop {
        if stop.load(Ordering::Relaxed) {
            return false;
        }
        let now = Instant::now();
        if now >= deadline {
            return true;
        }
        thread::sleep((deadline - now).min(Duration::from_millis(20)));
    }
}

struct ActiveLoad {
    target: LoadTarget,
    stop: Arc<AtomicBool>,
    duty: Arc<AtomicU64>,
    threads: Vec<JoinHandle<()>>,
    gpu: Option<Child>,
}

/// Owner of at most one active load.
#[derive(Default)]
pub struct LoadGenerator {
    active: Option<ActiveLoad>,
}

impl LoadGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_active(&self) -> bool {
        self.active.is_some()
    }

    pub fn target(&self) -> Option<&LoadTarget> {
        self.active.as_ref().map(|a| &a.target)
    }

    /// Current duty fraction shared by the workers.
    pub fn duty(&self) -> Option<f64> {
        self.active.as_ref().map(|a| f64::from_bits(a.duty.load(Ordering::Relaxed)))
    }

    pub fn start(&mut self, target: LoadTarget) -> Result<(), LoadError> {
        if self.active.is_some() {
            return Err(LoadError::AlreadyActive);
        }
        if !(0.0..=100.0).contains(&target.cpu_percent) {
            return Err(LoadError::BadTarget(target.cpu_percent));
        }
        let nominal = target.cpu_percent / 100.0;
        let mut active = ActiveLoad {
            target: target.clone(),
            stop: Arc::new(AtomicBool::new(false)),
            duty: Arc::new(AtomicU64::new(nominal.to_bits())),
            threads: Vec::new(),
            gpu: None,
        };

        if target.cpu_percent > 0.0 {
            for w in 0..target.workers.max(1) {
                let (stop, duty) = (active.stop.clone(), active.duty.clone());
                let spawned = thread::Builder::new()
                    .name(format!("load-{w}"))
                    .spawn(move || duty_cycle_worker(&stop, &duty));
                match spawned {
                    Ok(h) => active.threads.push(h),
                    Err(e) => {
                        shutdown(&mut active);
                        return Err(LoadError::Spawn(e));
                    }
                }
            }
            let (stop, duty) = (active.stop.clone(), active.duty.clone());
            match thread::Builder::new()
                .name("load-trim".into())
                .spawn(move || trim_loop(&stop, &duty, nominal))
            {
                Ok(h) => active.threads.push(h),
                Err(e) => {
                    shutdown(&mut active);
                    return Err(LoadError::Spawn(e));
                }
            }
        }

        if let Some(cmd) = target.effective_gpu_command() {
            match spawn_gpu(&cmd) {
                Ok(child) => active.gpu = child,
                Err(e) => {
                    shutdown(&mut active);
                    return Err(e);
                }
            }
        }
        debug!("load started: {}% on {} workers", target.cpu_percent, active.threads.len().saturating_sub(1));
        self.active = Some(active);
        Ok(())
    }

    /// Stops all workers and the GPU command. Stopping twice only warns.
    pub fn stop(&mut self) {
        match self.active.take() {
            Some(mut a) => shutdown(&mut a),
            None => warn!("stop_load called with no active load"),
        }
    }
}

impl Drop for LoadGenerator {
    fn drop(&mut self) {
        if let Some(mut a) = self.active.take() {
            shutdown(&mut a);
        }
    }
}

fn shutdown(a: &mut ActiveLoad) {
    a.stop.store(true, Ordering::Relaxed);
    for h in a.threads.drain(..) {
        let _ = h.join();
    }
    if let Some(child) = a.gpu.take() {
        terminate_group(child);
    }
}

/// Signals the child's whole process group, escalating to SIGKILL after 1 s.
fn terminate_group(mut child: Child) {
    let pgid = child.id() as libc::pid_t;
    // SAFETY: kill(2) with a negative pid only sends a signal.
    unsafe { libc::kill(-pgid, libc::SIGTERM) };
    let deadline = Instant::now() + Duration::from_secs(1);
    while Instant::now() < deadline {
        if let Ok(Some(_)) = child.try_wait() {
            return;
        }
        thread::sleep(Duration::from_millis(10));
    }
    unsafe { libc::kill(-pgid, libc::SIGKILL) };
    let _ = child.wait();
}

/// Spawns the GPU command; `Ok(None)` if it already finished successfully.
fn spawn_gpu(cmd: &str) -> Result<Option<Child>, LoadError> {
    let fail = |reason: String| LoadError::GpuCommand { command: cmd.to_string(), reason };
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .process_group(0)
        .spawn()
        .map_err(|e| fail(e.to_string()))?;
    let deadline = Instant::now() + GPU_GRACE;
    while Instant::now() < deadline {
        match child.try_wait().map_err(|e| fail(e.to_string()))? {
            Some(status) if status.success() => return Ok(None),
            Some(status) => return Err(fail(format!("exited with {status}"))),
            None => thread::sleep(Duration::from_millis(10)),
        }
    }
    Ok(Some(child))
}

fn duty_cycle_worker(stop: &AtomicBool, duty: &AtomicU64) {
    let mut sink = 0u64;
    while !stop.load(Ordering::Relaxed) {
        let window_start = Instant::now();
        let on = WINDOW.mul_f64(f64::from_bits(duty.load(Ordering::Relaxed)).clamp(0.0, 1.0));
        while window_start.elapsed() < on {
            for i in 0..1000u64 {
                sink = sink.wrapping_mul(6364136223846793005).wrapping_add(i);
            }
            std::hint::black_box(sink);
        }
        if let Some(rest) = WINDOW.checked_sub(window_start.elapsed()) {
            thread::sleep(rest);
        }
    }
}

fn trim_loop(stop: &AtomicBool, duty: &AtomicU64, nominal: f64) {
    let Ok(mut prev) = CpuCounters::read() else {
        warn!("utilization counters unavailable; load runs open-loop");
        return;
    };
    let (lo, hi) = ((nominal - TRIM_SPAN).max(0.0), (nominal + TRIM_SPAN).min(1.0));
    while sleep_unless(stop, TRIM_PERIOD) {
        let Ok(now) = CpuCounters::read() else { continue };
        if let Some(observed) = now.percent_since(&prev) {
            let current = f64::from_bits(duty.load(Ordering::Relaxed));
            let next = (current + TRIM_GAIN * (nominal - observed / 100.0)).clamp(lo, hi);
            duty.store(next.to_bits(), Ordering::Relaxed);
        }
        prev = now;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STAT: &str = "cpu  100 5 50 800 20 3 2 0 7 0\ncpu0 100 5 50 800 20 3 2 0 7 0\nintr 1\n";

    #[test]
    fn parses_aggregate_cpu_line() {
        let c = CpuCounters::parse(STAT).unwrap();
        assert_eq!(c.total, 980);
        assert_eq!(c.busy, 160);
        assert!(CpuCounters::parse("intr 1\n").is_err());
    }

    #[test]
    fn percent_between_snapshots() {
        let a = CpuCounters { busy: 100, total: 1000 };
        let b = CpuCounters { busy: 150, total: 1200 };
        assert_eq!(b.percent_since(&a), Some(25.0));
        assert_eq!(a.percent_since(&a), None);
        assert_eq!(a.percent_since(&b), None);
    }

    #[test]
    fn target_bounds() {
        assert!(LoadTarget::new(-1.0).is_err());
        assert!(LoadTarget::new(100.5).is_err());
        assert_eq!(LoadTarget::new(0.0).unwrap().workers, logical_cpus());
        assert_eq!(UtilizationSample::external(140.0).cpu_percent_observed, 100.0);
    }

    #[test]
    fn zero_target_spawns_no_workers() {
        let mut g = LoadGenerator::new();
        g.start(LoadTarget::idle()).unwrap();
        assert!(g.active.as_ref().unwrap().threads.is_empty());
        g.stop();
        assert!(!g.is_active());
    }

    #[test]
    fn second_start_is_rejected_and_stop_is_idempotent() {
        let mut g = LoadGenerator::new();
        let mut t = LoadTarget::new(10.0).unwrap();
        t.workers = 1;
        g.start(t.clone()).unwrap();
        assert!(matches!(g.start(t), Err(LoadError::AlreadyActive)));
        let begun = Instant::now();
        g.stop();
        assert!(begun.elapsed() < Duration::from_secs(1));
        g.stop();
        assert!(!g.is_active());
    }

    #[test]
    fn failing_gpu_command_is_an_error() {
        let mut g = LoadGenerator::new();
        let mut t = LoadTarget::idle();
        t.gpu_command = Some("exit 3".into());
        if std::env::var(GPU_CMD_ENV).is_ok() {
            return;
        }
        assert!(matches!(g.start(t), Err(LoadError::GpuCommand { .. })));
        assert!(!g.is_active());
    }

    #[test]
    fn gpu_command_is_killed_on_stop() {
        if std::env::var(GPU_CMD_ENV).is_ok() {
            return;
        }
        let mut g = LoadGenerator::new();
        let mut t = LoadTarget::idle();
        let dir = tempfile::tempdir().unwrap();
        let pidfile = dir.path().join("pid");
        t.gpu_command = Some(format!("sleep 30 & echo $! > {}; wait", pidfile.display()));
        g.start(t).unwrap();
        let grandchild = std::fs::read_to_string(&pidfile).unwrap();
        g.stop();
        // A killed orphan may linger as a zombie until it is reaped.
        let state = std::fs::read_to_string(format!("/proc/{}/stat", grandchild.trim())).unwrap_or_default();
        let alive = !state.is_empty() && state.rsplit(')').next().is_some_and(|rest| !rest.trim_start().starts_with('Z'));
        assert!(!alive, "{state}");
    }

    #[test]
    fn monitor_reports_a_bounded_sample() {
        let m = UtilizationMonitor::start(MIN_SAMPLE_WINDOW).unwrap();
        let s = m.current().unwrap();
        assert!((0.0..=100.0).contains(&s.cpu_percent_observed));
        assert_eq!(s.source, UtilSource::OsCounters);
    }
}
