use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use simvar::loadgen::LoadTarget;
use simvar::metrics::{self, Tolerance, Verdict};
use simvar::minisim::scenario_file;
use simvar::orchestrate::{self, CampaignConfig, OrchestrateError, SeedPolicy, SimulatorAdapter};
use simvar::report::{self, LevelResult, RestrictionPolicy};
use simvar::selftest::{self, Outcome, SelftestOptions};

const EXIT_USAGE: u8 = 1;
const EXIT_GATE: u8 = 2;
const EXIT_ENVIRONMENT: u8 = 3;

#[derive(Parser)]
#[command(name = "simvar", version, about = "Determinism audits for repeated simulation runs")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CampaignArgs {
    /// Catalog id (test1..test6) or scenario file.
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Scenario seed shared by every run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use seed + k for run k instead of one shared seed.
    #[arg(long)]
    per_run_seed: bool,
    /// Base for per-run injector entropy.
    #[arg(long)]
    entropy: Option<u64>,
    /// Target system CPU utilization in percent.
    #[arg(long, default_value_t = 0.0)]
    load: f64,
    /// Nice value for the simulator, -20..=19.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    priority: i32,
    /// Comma-separated CPU cores to pin the simulator to.
    #[arg(long, value_delimiter = ',')]
    pin: Option<Vec<usize>>,
    /// Permissible deviation in meters.
    #[arg(long, default_value_t = Tolerance::DEFAULT_METERS)]
    tolerance: f64,
    #[arg(long)]
    stop_on_collision: bool,
    /// External simulator command with {scenario_file} {seed} {out_trace}.
    #[arg(long)]
    adapter: Option<String>,
    /// Seconds before an external run is killed.
    #[arg(long, default_value_t = 300.0)]
    adapter_timeout: f64,
    /// Campaign id (defaults to one derived from the configuration).
    #[arg(long)]
    campaign: Option<String>,
    /// Root directory holding `campaigns/`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Run in parallel; marks utilization results invalid.
    #[arg(long)]
    parallel: bool,
    /// Seconds to let the load settle before the first run.
    #[arg(long, default_value_t = 2.0)]
    settle: f64,
}

impl CampaignArgs {
    fn adapter(&self) -> SimulatorAdapter {
        match &self.adapter {
            Some(t) => SimulatorAdapter::external(t.clone(), Duration::from_secs_f64(self.adapter_timeout.max(0.0))),
            None => SimulatorAdapter::Embedded,
        }
    }

    fn config(&self) -> Result<CampaignConfig, String> {
        let load = LoadTarget::new(self.load).map_err(|e| e.to_string())?;
        Ok(CampaignConfig {
            scenario: self.scenario.clone(),
            n: self.n,
            seed_policy: if self.per_run_seed {
                SeedPolicy::PerRunSeed(self.seed)
            } else {
                SeedPolicy::FixedSingleSeed(self.seed)
            },
            entropy_base: self.entropy,
            load,
            priority: self.priority,
            pinning: self.pin.clone(),
            tolerance: self.tolerance,
            stop_on_collision: self.stop_on_collision,
            parallel: self.parallel,
            settle_secs: self.settle,
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FactorArg {
    Utilization,
    Priority,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one campaign, analyze it and print the summary.
    Run {
        #[command(flatten)]
        c: CampaignArgs,
        /// Exit 2 when the result is non-permissible.
        #[arg(long)]
        gate: bool,
    },
    /// Repeat a campaign across utilization levels or priorities.
    Sweep {
        #[command(flatten)]
        c: CampaignArgs,
        #[arg(long, value_enum, default_value = "utilization")]
        factor: FactorArg,
        /// Comma-separated levels (percent or nice values), ascending.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        levels: Option<Vec<f64>>,
    },
    /// Grow the sample 10, 100, 1000, ... until a violation or max-n.
    Escalate {
        #[command(flatten)]
        c: CampaignArgs,
        #[arg(long, default_value_t = 1000)]
        max_n: usize,
    },
    /// Recompute results from stored trace files.
    Analyze {
        #[arg(long, required = true)]
        campaign: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Campaign whose maximum deviation is the noise floor.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Build the restricted/unrestricted scenario table.
    Report {
        /// Campaigns to include (default: all under <out>/campaigns).
        #[arg(long)]
        campaign: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Highest utilization level included in the restricted column.
        #[arg(long, default_value_t = report::DEFAULT_UTILIZATION_CAP)]
        cap: f64,
        #[arg(long, default_value_t = Tolerance::DEFAULT_METERS)]
        tolerance: f64,
        #[arg(long)]
        baseline: Option<String>,
        /// Exit 2 unless every row's restricted verdict is permissible.
        #[arg(long)]
        gate: bool,
    },
    /// Run the built-in validation suite on this host.
    Selftest {
        /// Skip the load controller accuracy check.
        #[arg(long)]
        skip_load: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    fn environment(message: impl Into<String>) -> Self {
        Failure { code: EXIT_ENVIRONMENT, message: message.into() }
    }
}

impl From<OrchestrateError> for Failure {
    fn from(e: OrchestrateError) -> Self {
        let code = if e.is_environmental() { EXIT_ENVIRONMENT } else { EXIT_USAGE };
        Failure { code, message: e.to_string() }
    }
}

impl From<report::ReportError> for Failure {
    fn from(e: report::ReportError) -> Self {
        match e {
            report::ReportError::Io { .. } => Failure::environment(e.to_string()),
            _ => Failure::usage(e.to_string()),
        }
    }
}

type CmdResult = Result<u8, Failure>;

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::environment(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::environment(format!("{}: {e}", path.display())))
}

fn noise_floor(out: &Path, baseline: Option<&str>) -> Result<Option<f64>, Failure> {
    let Some(id) = baseline else { return Ok(None) };
    let (_, rs) = orchestrate::load_campaign(&orchestrate::campaign_dir(out, id))?;
    metrics::noise_floor(&rs).map(Some).map_err(|e| Failure::usage(e.to_string()))
}

/// Recomputes a stored campaign and writes `analysis/` next to its runs.
fn analyze_one(out: &Path, id: &str, floor: Option<f64>) -> Result<(orchestrate::Manifest, metrics::AuditResult), Failure> {
    let dir = orchestrate::campaign_dir(out, id);
    let (manifest, mut audit) = orchestrate::analyze(&dir)?;
    if let Some(f) = floor {
        audit = audit.with_noise_floor(f);
    }
    let analysis = dir.join("analysis");
    write(&analysis.join("summary.txt"), &audit.summary())?;
    report::emit_series_csv(&audit, &analysis)?;
    Ok((manifest, audit))
}

fn cmd_run(c: &CampaignArgs, gate: bool) -> CmdResult {
    let config = c.config().map_err(Failure::usage)?;
    let outcome = orchestrate::run_repeats(&c.adapter(), &config, Some(&c.out), c.campaign.as_deref())?;
    let (_, audit) = analyze_one(&c.out, &outcome.campaign_id, None)?;
    print!("{}", audit.summary());
    println!("campaign_dir={}", orchestrate::campaign_dir(&c.out, &outcome.campaign_id).display());
    if !outcome.failed.is_empty() {
        println!("failed_runs={}", outcome.failed.len());
    }
    Ok(if gate && audit.verdict == Verdict::NonPermissible { EXIT_GATE } else { 0 })
}

fn cmd_sweep(c: &CampaignArgs, factor: FactorArg, levels: Option<Vec<f64>>) -> CmdResult {
    let base = c.config().map_err(Failure::usage)?;
    let scenario_id = scenario_file::load(&c.scenario).map_err(|e| Failure::usage(e.to_string()))?.scenario_id;
    let adapter = c.adapter();
    let (result, tag) = match factor {
        FactorArg::Utilization => {
            let levels = levels.unwrap_or_else(|| report::DEFAULT_LEVELS.to_vec());
            let id = c.campaign.clone().unwrap_or(format!("{scenario_id}-util"));
            (orchestrate::sweep_utilization(&adapter, &base, &levels, Some(&c.out), Some(&id))?, id)
        }
        FactorArg::Priority => {
            let levels = levels.unwrap_or_else(|| vec![-20.0, 0.0, 19.0]);
            if levels.iter().any(|l| l.fract() != 0.0) {
                return Err(Failure::usage("priority levels must be integers"));
            }
            let prios: Vec<i32> = levels.iter().map(|&l| l as i32).collect();
            let id = c.campaign.clone().unwrap_or(format!("{scenario_id}-prio"));
            (orchestrate::sweep_priority(&adapter, &base, &prios, Some(&c.out), Some(&id))?, id)
        }
    };
    let text = report::render_sweep(&result)?;
    print!("{text}");
    let dir = c.out.join("sweeps");
    write(&dir.join(format!("{tag}.txt")), &text)?;
    write(&dir.join(format!("{tag}.csv")), &report::sweep_csv(&result)?)?;
    Ok(0)
}

fn cmd_escalate(c: &CampaignArgs, max_n: usize) -> CmdResult {
    let config = c.config().map_err(Failure::usage)?;
    let tol = Tolerance::new(c.tolerance).map_err(|e| Failure::usage(e.to_string()))?;
    let e = orchestrate::escalate_sample_size(&c.adapter(), &config, tol, max_n, Some(&c.out), c.campaign.as_deref())?;
    for s in &e.stages {
        println!("stage n={} max_deviation_m={} verdict={}", s.n, s.max_deviation, s.verdict);
    }
    println!("n_final={}", e.n_final);
    print!("{}", e.audit.summary());
    Ok(0)
}

fn cmd_analyze(out: &Path, campaigns: &[String], baseline: Option<&str>) -> CmdResult {
    let floor = noise_floor(out, baseline)?;
    for id in campaigns {
        let (_, audit) = analyze_one(out, id, floor)?;
        println!("campaign={id}");
        print!("{}", audit.summary());
    }
    Ok(0)
}

fn all_campaigns(out: &Path) -> Result<Vec<String>, Failure> {
    let root = out.join(orchestrate::CAMPAIGNS_DIR);
    let entries = fs::read_dir(&root).map_err(|e| Failure::usage(format!("{}: {e}", root.display())))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(orchestrate::MANIFEST_FILE).exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    Ok(ids)
}

fn cmd_report(out: &Path, campaigns: &[String], cap: f64, tolerance: f64, baseline: Option<&str>, gate: bool) -> CmdResult {
    let tol = Tolerance::new(tolerance).map_err(|e| Failure::usage(e.to_string()))?;
    let ids = if campaigns.is_empty() { all_campaigns(out)? } else { campaigns.to_vec() };
    let floor = noise_floor(out, baseline)?;
    let mut results = Vec::new();
    for id in ids {
        let (manifest, audit) = orchestrate::analyze(&orchestrate::campaign_dir(out, &id))?;
        if manifest.utilization_invalid {
            warn!("campaign {id} ran in parallel; its utilization level is not controlled");
        }
        results.push(LevelResult { campaign_id: id, level: manifest.config.load.cpu_percent, audit });
    }
    let policy = RestrictionPolicy { utilization_cap: cap, pre_collision_only: true };
    let table = report::build_table(&results, policy, tol, floor)?;
    let text = table.render();
    print!("{text}");
    write(&out.join("report.txt"), &text)?;
    Ok(if gate && !table.gate_passes() { EXIT_GATE } else { 0 })
}

fn cmd_selftest(skip_load: bool) -> CmdResult {
    let opts = SelftestOptions { include_load: !skip_load, ..Default::default() };
    let checks = selftest::run_all(&opts, |c| println!("{c}"));
    let count = |o: Outcome| checks.iter().filter(|c| c.outcome == o).count();
    let failed = count(Outcome::Fail);
    println!("selftest: {} passed, {failed} failed, {} skipped", count(Outcome::Pass), count(Outcome::Skip));
    Ok(if failed > 0 { EXIT_GATE } else { 0 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.cmd {
        Cmd::Run { c, gate } => cmd_run(c, *gate),
        Cmd::Sweep { c, factor, levels } => cmd_sweep(c, *factor, levels.clone()),
        Cmd::Escalate { c, max_n } => cmd_escalate(c, *max_n),
        Cmd::Analyze { campaign, out, baseline } => cmd_analyze(out, campaign, baseline.as_deref()),
        Cmd::Report { campaign, out, cap, tolerance, baseline, gate } => {
            cmd_report(out, campaign, *cap, *tolerance, baseline.as_deref(), *gate)
        }
        Cmd::Selftest { skip_load } => cmd_selftest(*skip_load),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
