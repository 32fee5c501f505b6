//! `jobstats`: collector hooks, ingestion, analysis and reporting.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use jobstats_core::collectors::pool::{planted_pool, production_queues, PoolSpec};
use jobstats_core::collectors::{Arch, SyntheticScenario};
use jobstats_core::ingest::{
    self, filter_jobs, load_accounting, scenario_accounting, write_accounting_csv, IngestOptions, JobFilter,
    JobStore, StoreError,
};
use jobstats_core::jobhooks::{self, HookError, HookOutcome, LocalNode, STATS_DIR_ENV};
use jobstats_core::metrics::{self, analyze_store};
use jobstats_core::record_format::{ParseError, ParseMode, RecordReader};
use jobstats_core::report::{emit_scatter, flag_imbalance, flag_waste, FlagReport, ImbalanceRule, WasteRule};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "jobstats", version, about = "Job-tagged node statistics: collect, ingest, analyze, report")]
struct Cli {
    /// Raw file root (one subdirectory per host).
    #[arg(long, global = true, env = STATS_DIR_ENV)]
    stats_dir: Option<PathBuf>,

    /// Job store directory.
    #[arg(long, global = true, env = "JOBSTATS_STORE")]
    store: Option<PathBuf>,

    /// Sampling interval in seconds, recorded in file headers.
    #[arg(long, global = true, default_value_t = 600)]
    interval: u64,

    /// Counter event set of this node: opteron, nehalem_westmere or synthetic.
    #[arg(long, global = true, env = "JOBSTATS_ARCH", default_value = "synthetic")]
    arch: String,

    /// Treat malformed input as an error instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct HookArgs {
    /// Event time in epoch seconds; defaults to now.
    #[arg(long)]
    time: Option<u64>,
    /// Override the recorded hostname.
    #[arg(long)]
    hostname: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Take one sample of every source and append it.
    Collect(HookArgs),
    /// Scheduler prolog: mark a job start and program counters.
    BeginJob {
        job_id: String,
        #[command(flatten)]
        hook: HookArgs,
    },
    /// Scheduler epilog: final sample, then the end mark.
    EndJob {
        job_id: String,
        #[command(flatten)]
        hook: HookArgs,
    },
    /// Close the current raw file and start a new one.
    Rotate(HookArgs),
    /// Generate raw files and accounting for a synthetic scenario.
    Synth {
        /// Scenario file (TOML).
        #[arg(long, conflicts_with = "pool")]
        scenario: Option<PathBuf>,
        /// Use the built-in planted-anomaly pool instead.
        #[arg(long)]
        pool: bool,
        #[arg(long, default_value_t = 2012)]
        seed: u64,
        /// Accounting CSV to write; defaults to <stats-dir>/accounting.csv.
        #[arg(long)]
        accounting: Option<PathBuf>,
        /// Also write the scenario that was simulated.
        #[arg(long)]
        write_scenario: Option<PathBuf>,
    },
    /// Join raw files with accounting into per-job timelines.
    Ingest {
        #[arg(long)]
        accounting: PathBuf,
    },
    /// Compute per-job profiles for every stored timeline.
    Analyze,
    /// Apply flag rules and emit scatter data.
    Report(ReportArgs),
    /// Parse-check raw files.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Kv,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    format: Format,
    /// Write report files here instead of printing.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    waste_threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    min_bw_gbps: f64,
    #[arg(long, default_value_t = 1.0)]
    min_cov: f64,
    /// Also consider jobs that do not fill every core.
    #[arg(long)]
    any_wayness: bool,
    #[arg(long, default_value_t = 1.0)]
    min_node_hours: f64,
    /// Comma-separated production queues.
    #[arg(long, value_delimiter = ',')]
    production_queues: Option<Vec<String>>,
    /// Scatter axes as `x,y`, e.g. `idle_fraction,used_mem_fraction`.
    #[arg(long)]
    scatter: Option<String>,
    /// With --out, also render the scatter as SVG.
    #[arg(long, requires = "out")]
    svg: bool,
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CliResult = Result<(), Failure>;

fn io_fail(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_IO,
        err: err.into(),
    }
}

fn data_fail(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_DATA,
        err: err.into(),
    }
}

fn usage_fail(msg: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        err: anyhow!(msg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("jobstats: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn need<'a>(opt: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    opt.as_deref()
        .ok_or_else(|| usage_fail(format!("{flag} is required for this command")))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn run(cli: &Cli) -> CliResult {
    let arch = || Arch::parse(&cli.arch).ok_or_else(|| usage_fail(format!("unknown arch {:?}", cli.arch)));
    match &cli.command {
        Command::Collect(h) => hook(cli, h, arch()?, |a, t| a.collect(t)),
        Command::BeginJob { job_id, hook: h } => {
            let arch = arch()?;
            hook(cli, h, arch, |a, t| a.begin_job(job_id, arch, t))
        }
        Command::EndJob { job_id, hook: h } => hook(cli, h, arch()?, |a, t| a.end_job(job_id, t)),
        Command::Rotate(h) => hook(cli, h, arch()?, |a, t| a.rotate(t)),
        Command::Synth {
            scenario,
            pool,
            seed,
            accounting,
            write_scenario,
        } => synth(cli, scenario.as_deref(), *pool, *seed, accounting.as_deref(), write_scenario.as_deref()),
        Command::Ingest { accounting } => ingest_cmd(cli, accounting),
        Command::Analyze => analyze_cmd(cli),
        Command::Report(args) => report_cmd(cli, args),
        Command::Validate { files } => validate(cli, files),
    }
}

/// Hook commands succeed on warnings; only unwritable storage fails.
fn hook(
    cli: &Cli,
    h: &HookArgs,
    arch: Arch,
    op: impl FnOnce(&mut jobhooks::NodeAppender, u64) -> Result<HookOutcome, HookError>,
) -> CliResult {
    let dir = need(&cli.stats_dir, "--stats-dir")?;
    let node = LocalNode {
        hostname: h.hostname.clone(),
        interval: cli.interval,
        arch,
        ..Default::default()
    };
    let mut appender = jobhooks::open_local(dir, &node).map_err(io_fail)?;
    let outcome = op(&mut appender, h.time.unwrap_or_else(now)).map_err(io_fail)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    if let Some(events) = &outcome.programmed {
        log::info!("programmed counters: {}", events.metadata_value());
    }
    for (source, n) in appender.collector().error_counts() {
        log::warn!("source {source} failed {n} time(s)");
    }
    appender.finish().map_err(io_fail)
}

fn synth(
    cli: &Cli,
    scenario: Option<&Path>,
    pool: bool,
    seed: u64,
    accounting: Option<&Path>,
    write_scenario: Option<&Path>,
) -> CliResult {
    let dir = need(&cli.stats_dir, "--stats-dir")?;
    let scenario = match (scenario, pool) {
        (Some(path), false) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(io_fail)?;
            SyntheticScenario::from_toml(&text)
                .with_context(|| format!("scenario {}", path.display()))
                .map_err(data_fail)?
        }
        (None, true) => {
            planted_pool(&PoolSpec {
                seed,
                ..Default::default()
            })
            .scenario
        }
        _ => return Err(usage_fail("synth needs --scenario FILE or --pool".into())),
    };
    if let Some(out) = write_scenario {
        fs::write(out, scenario.to_toml())
            .with_context(|| format!("writing {}", out.display()))
            .map_err(io_fail)?;
    }
    let files = jobhooks::simulate(&scenario, dir).map_err(io_fail)?;
    let acct = accounting.map_or_else(|| dir.join("accounting.csv"), Path::to_path_buf);
    fs::write(&acct, write_accounting_csv(&scenario_accounting(&scenario)))
        .with_context(|| format!("writing {}", acct.display()))
        .map_err(io_fail)?;
    println!(
        "wrote {} raw files for {} nodes and {} jobs; accounting in {}",
        files.len(),
        scenario.nodes,
        scenario.jobs.len(),
        acct.display()
    );
    Ok(())
}

fn store_fail(e: StoreError) -> Failure {
    match e {
        StoreError::Io { .. } => io_fail(e),
        _ => data_fail(e),
    }
}

fn ingest_cmd(cli: &Cli, accounting: &Path) -> CliResult {
    let stats = need(&cli.stats_dir, "--stats-dir")?;
    let store_dir = need(&cli.store, "--store")?;
    let text = fs::read_to_string(accounting)
        .with_context(|| format!("reading {}", accounting.display()))
        .map_err(io_fail)?;
    let acct = load_accounting(&text).map_err(data_fail)?;
    if cli.strict && !acct.rejected.is_empty() {
        let rows: Vec<String> = acct.rejected.iter().map(|r| format!("row {}: {}", r.row, r.reason)).collect();
        return Err(data_fail(anyhow!("rejected accounting rows:\n{}", rows.join("\n"))));
    }
    let mut store = JobStore::open_writer(store_dir).map_err(store_fail)?;
    let opts = IngestOptions {
        mode: if cli.strict { ParseMode::Strict } else { ParseMode::Lenient },
        delta: ingest::DeltaConfig::with_tick(cli.interval),
        ..Default::default()
    };
    let report = ingest::ingest(stats, &acct, &mut store, &opts).map_err(|e| match e {
        ingest::IngestError::Io { .. } => io_fail(e),
        ingest::IngestError::Store(s) => store_fail(s),
        _ => data_fail(e),
    })?;
    for r in &report.rejected_rows {
        log::warn!("accounting row {}: {}", r.row, r.reason);
    }
    println!(
        "jobs {}\nnode_dirs {}\nfiles {}\nskipped_lines {}\nrejected_rows {}\nempty_jobs {}\nmissing_nodes {}",
        report.jobs,
        report.node_dirs,
        report.files,
        report.skipped_lines,
        report.rejected_rows.len(),
        report.empty_jobs.len(),
        report.missing_nodes
    );
    Ok(())
}

fn analyze_cmd(cli: &Cli) -> CliResult {
    let store_dir = need(&cli.store, "--store")?;
    let mut store = JobStore::open_writer(store_dir).map_err(store_fail)?;
    let r = analyze_store(&mut store).map_err(store_fail)?;
    if cli.strict && !r.corrupt.is_empty() {
        return Err(data_fail(anyhow!("{} corrupt timelines", r.corrupt.len())));
    }
    let (profiles, _) = store.scan_profiles();
    let pool_idle = metrics::aggregate_idle(&profiles)
        .map_or_else(|_| "undefined".to_string(), |v| v.to_string());
    println!(
        "profiles {}\nundefined_waste {}\ncorrupt {}\naggregate_idle {}",
        r.profiles,
        r.undefined_waste,
        r.corrupt.len(),
        pool_idle
    );
    Ok(())
}

fn write_out(dir: &Path, name: &str, text: &str) -> CliResult {
    let path = dir.join(name);
    fs::write(&path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(io_fail)
}

fn report_cmd(cli: &Cli, args: &ReportArgs) -> CliResult {
    let store_dir = need(&cli.store, "--store")?;
    let store = JobStore::open_reader(store_dir).map_err(store_fail)?;
    let (profiles, corrupt) = store.scan_profiles();
    if cli.strict && !corrupt.is_empty() {
        return Err(data_fail(anyhow!("{} corrupt profiles", corrupt.len())));
    }
    let filter = JobFilter {
        min_node_hours: args.min_node_hours,
        production_queues: args
            .production_queues
            .as_ref()
            .map_or_else(production_queues, |q| q.iter().cloned().collect::<BTreeSet<_>>()),
    };
    let kept = filter_jobs(&profiles, &filter);
    let rule_fail = |e: jobstats_core::report::ReportError| usage_fail(e.to_string());
    let waste = flag_waste(
        &kept,
        WasteRule {
            threshold: args.waste_threshold,
        },
    )
    .map_err(rule_fail)?;
    let imbalance = flag_imbalance(
        &kept,
        ImbalanceRule {
            min_bw_gbps: args.min_bw_gbps,
            min_cov: args.min_cov,
            require_full_wayness: !args.any_wayness,
        },
    )
    .map_err(rule_fail)?;
    let scatter = match &args.scatter {
        Some(axes) => {
            let (x, y) = axes
                .split_once(',')
                .ok_or_else(|| usage_fail(format!("--scatter wants `x,y`, got {axes:?}")))?;
            Some(emit_scatter(&kept, x.trim(), y.trim()).map_err(rule_fail)?)
        }
        None => None,
    };

    let render = |r: &FlagReport| match args.format {
        Format::Csv => r.to_csv(),
        Format::Kv => r.to_kv(),
    };
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(io_fail)?;
            for r in [&waste, &imbalance] {
                write_out(dir, &format!("{}.csv", r.rule), &r.to_csv())?;
                write_out(dir, &format!("{}.kv", r.rule), &r.to_kv())?;
            }
            if let Some(s) = &scatter {
                let stem = format!("scatter_{}_{}", s.x_metric, s.y_metric);
                write_out(dir, &format!("{stem}.csv"), &s.to_csv())?;
                write_out(dir, &format!("{stem}.undefined.csv"), &s.undefined_sidecar())?;
                if args.svg {
                    write_out(dir, &format!("{stem}.svg"), &s.to_svg())?;
                }
            }
            println!(
                "pool {} kept {} waste {} imbalance {}",
                profiles.len(),
                kept.len(),
                waste.flagged.len(),
                imbalance.flagged.len()
            );
        }
        None => {
            print!("{}", render(&waste));
            if args.format == Format::Kv {
                println!();
            }
            print!("{}", render(&imbalance));
            if let Some(s) = &scatter {
                print!("{}", s.to_csv());
            }
        }
    }
    Ok(())
}

fn validate(cli: &Cli, files: &[PathBuf]) -> CliResult {
    let mode = if cli.strict { ParseMode::Strict } else { ParseMode::Lenient };
    let mut first_error: Option<Failure> = None;
    for path in files {
        let result = (|| -> Result<(usize, usize), Failure> {
            let file = fs::File::open(path)
                .with_context(|| format!("opening {}", path.display()))
                .map_err(io_fail)?;
            let classify = |e: ParseError| match e {
                ParseError::Io(_) => io_fail(e),
                _ => data_fail(e),
            };
            let mut reader = RecordReader::new(std::io::BufReader::new(file), mode).map_err(classify)?;
            let mut entries = 0;
            for e in reader.by_ref() {
                e.map_err(classify)?;
                entries += 1;
            }
            Ok((entries, reader.skipped()))
        })();
        match result {
            Ok((entries, skipped)) => println!("{}: ok entries={entries} skipped={skipped}", path.display()),
            Err(f) => {
                println!("{}: error {:#}", path.display(), f.err);
                first_error.get_or_insert(f);
            }
        }
    }
    match first_error {
        Some(f) => Err(f),
        None => Ok(()),
    }
}
