use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use perr_core::cohort::{
    build_counting_rows, match_cohort, rate_table, CohortError, PoolingBasis, RowOptions,
};
use perr_core::cox::{estimate_perr_ag, estimate_perr_cf, CoxError, FitOptions, VarianceKind};
use perr_core::drim::{discretize_with_covariates, fit_drim, DrimError, DrimOptions};
use perr_core::harness::{
    calibrate_beta0, ingest_subjects, load_scenario_config, metrics_tsv, read_counting_csv,
    replicate_csv, run_scenario, scenario_specs, write_events_csv, write_subjects_csv,
    HarnessError, IngestError, SuiteTable,
};
use perr_core::rng::{replicate_rng, StreamPurpose};
use perr_core::simulate::{simulate_cohort, SimError};
use perr_core::{CountingRow, PerrEstimate, ScenarioConfig};

#[derive(Parser)]
#[command(name = "perr", version, about = "Prior event rate ratio analysis for recurrent events")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one simulated pre-match cohort as subject and event CSVs.
    Simulate(SimulateArgs),
    /// Fit PERR_AG (and PERR_CF with --stratify) to user data.
    Perr(PerrArgs),
    /// Fit the dynamic random-intercept model for event dependence.
    Drim(DrimArgs),
    /// Run a built-in scenario table or a scenario config file.
    Scenario(ScenarioArgs),
    /// Calibrate the outcome intercept of each scenario to a target event count.
    #[command(name = "calibrate-beta0")]
    CalibrateBeta0(CalibrateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML scenario config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long)]
    subjects: PathBuf,
    #[arg(long)]
    events: PathBuf,
}

#[derive(Args)]
struct SubjectInput {
    /// Subject CSV: id,end_time,treatment_time,<covariates...>
    #[arg(long, requires = "events")]
    subjects: Option<PathBuf>,
    /// Event CSV: id,time
    #[arg(long, requires = "subjects")]
    events: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceArg {
    Robust,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Persons,
    Events,
}

impl From<BasisArg> for PoolingBasis {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Persons => PoolingBasis::Persons,
            BasisArg::Events => PoolingBasis::Events,
        }
    }
}

#[derive(Args)]
struct PerrArgs {
    #[command(flatten)]
    input: SubjectInput,
    /// Counting-process CSV (id,start,stop,status,trt,post[,trt_x_post][,stratum]) used
    /// instead of subject and event files.
    #[arg(long, conflicts_with_all = ["subjects", "events"])]
    counting: Option<PathBuf>,
    /// Days kept on each side of the index date.
    #[arg(long)]
    window: Option<f64>,
    /// Comma-separated covariates that matched pairs must share.
    #[arg(long, value_delimiter = ',')]
    match_keys: Vec<String>,
    /// Also fit PERR_CF (event-number strata plus gamma frailty).
    #[arg(long)]
    stratify: bool,
    /// Percentile of per-person event counts at which strata are pooled.
    #[arg(long, default_value_t = 0.95)]
    pooling: f64,
    /// Take the pooling percentile over per-person event counts or over
    /// the sequence numbers of all events.
    #[arg(long, value_enum, default_value_t = BasisArg::Events)]
    pooling_basis: BasisArg,
    /// Restart event-number strata at the index date.
    #[arg(long)]
    reset_strata: bool,
    #[arg(long, value_enum, default_value_t = VarianceArg::Robust)]
    variance: VarianceArg,
    /// Seed for the random choice among eligible controls.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct DrimArgs {
    #[arg(long, required = true)]
    subjects: PathBuf,
    #[arg(long, required = true)]
    events: PathBuf,
    /// Interval length in the time unit of the data.
    #[arg(long)]
    interval: f64,
    #[arg(long, default_value_t = 15)]
    nodes: usize,
    /// Comma-separated numeric covariates.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableArg {
    Main,
    S1,
    S2,
}

impl From<TableArg> for SuiteTable {
    fn from(t: TableArg) -> Self {
        match t {
            TableArg::Main => SuiteTable::Main,
            TableArg::S1 => SuiteTable::S1,
            TableArg::S2 => SuiteTable::S2,
        }
    }
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, value_enum, default_value_t = TableArg::Main, conflicts_with = "config")]
    table: TableArg,
    /// Run a single scenario from a TOML config instead of a built-in table.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Only run table rows whose label contains this text.
    #[arg(long)]
    only: Option<String>,
    /// Write the metrics TSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Directory for per-replicate CSVs, one per scenario.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, value_enum, default_value_t = TableArg::Main, conflicts_with = "config")]
    table: TableArg,
    /// Calibrate a single TOML config against --target-events.
    #[arg(long, requires = "target_events")]
    config: Option<PathBuf>,
    #[arg(long)]
    target_events: Option<f64>,
    #[arg(long, default_value_t = 50)]
    replicates: usize,
    #[arg(long)]
    seed: Option<u64>,
}

/// An error together with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const DATA: u8 = 2;
const CONVERGENCE: u8 = 3;

impl Failure {
    fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: DATA,
            error: error.into(),
        }
    }
}

fn cox_code(e: &CoxError) -> u8 {
    match e {
        CoxError::NotConverged(_)
        | CoxError::EmNotConverged { .. }
        | CoxError::MonotoneLikelihood { .. } => CONVERGENCE,
        _ => DATA,
    }
}

impl From<CoxError> for Failure {
    fn from(e: CoxError) -> Self {
        Self {
            code: cox_code(&e),
            error: e.into(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::TooManyFailures { .. } => CONVERGENCE,
            HarnessError::Fit(inner) => cox_code(inner),
            _ => DATA,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl From<DrimError> for Failure {
    fn from(e: DrimError) -> Self {
        let code = match e {
            DrimError::NotConverged(_) | DrimError::SingularInformation => CONVERGENCE,
            _ => DATA,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::data(e)
            }
        })*
    };
}
data_errors!(IngestError, CohortError, SimError, anyhow::Error, csv::Error, io::Error);

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(Failure::data)
}

fn config_or_default(path: Option<&Path>) -> Result<ScenarioConfig, Failure> {
    match path {
        Some(p) => Ok(load_scenario_config(p)?),
        None => Ok(ScenarioConfig::default()),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = config_or_default(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    let subjects = simulate_cohort(&config, args.replicate)?;
    write_subjects_csv(&subjects, create(&args.subjects)?)?;
    write_events_csv(&subjects, create(&args.events)?)?;
    eprintln!(
        "wrote {} subjects and {} events",
        subjects.len(),
        subjects.iter().map(|s| s.event_times.len()).sum::<usize>()
    );
    Ok(())
}

fn print_estimate(out: &mut impl Write, label: &str, e: &PerrEstimate) -> io::Result<()> {
    writeln!(
        out,
        "{label}\tHR {:.2} (95% CI {:.2} to {:.2})\tp {:.3}\tprior HR {:.2}\tpost HR {:.2}{}",
        e.perr_hr,
        e.ci_low,
        e.ci_high,
        e.p_value,
        e.hr_prior,
        e.hr_post,
        e.theta.map(|t| format!("\ttheta {t:.3}")).unwrap_or_default()
    )
}

/// Reorders counting-file covariates to `[trt, post, trt_x_post]`,
/// deriving the interaction when the file does not carry it.
fn perr_design(rows: Vec<CountingRow>, names: &[String]) -> Result<Vec<CountingRow>, Failure> {
    let find = |name: &str| names.iter().position(|n| n == name);
    let (Some(trt), Some(post)) = (find("trt"), find("post")) else {
        return Err(Failure::data(anyhow::anyhow!(
            "counting file needs `trt` and `post` columns"
        )));
    };
    let interaction = find("trt_x_post");
    Ok(rows
        .into_iter()
        .map(|mut r| {
            let (t, p) = (r.covariates[trt], r.covariates[post]);
            let tp = interaction.map_or(t * p, |i| r.covariates[i]);
            r.covariates = vec![t, p, tp];
            r
        })
        .collect())
}

fn perr(args: PerrArgs) -> Result<(), Failure> {
    if !(args.pooling > 0.0 && args.pooling <= 1.0) {
        return Err(Failure {
            code: 1,
            error: anyhow::anyhow!("--pooling must lie in (0, 1]"),
        });
    }
    let variance = match args.variance {
        VarianceArg::Robust => VarianceKind::Robust,
        VarianceArg::Model => VarianceKind::Model,
    };
    let options = FitOptions::default();
    let stdout = io::stdout();
    let mut out = stdout.lock();

    let (ag_rows, cf_rows) = if let Some(path) = &args.counting {
        let file = File::open(path)
            .with_context(|| format!("cannot open {}", path.display()))?;
        let table = read_counting_csv(file, &path.display().to_string())?;
        let rows = perr_design(table.rows, &table.covariate_names)?;
        writeln!(out, "rows\t{}\tsubjects\t{}", rows.len(), table.subject_ids.len())?;
        (rows.clone(), rows)
    } else {
        let (Some(subjects_path), Some(events_path)) = (&args.input.subjects, &args.input.events) else {
            return Err(Failure {
                code: 1,
                error: anyhow::anyhow!("give --subjects and --events, or --counting"),
            });
        };
        let subjects = ingest_subjects(subjects_path, events_path)?;
        let keys: Vec<&str> = args.match_keys.iter().map(String::as_str).collect();
        let mut rng = replicate_rng(args.seed, 0, StreamPurpose::Matching);
        let matched = match_cohort(&subjects, &keys, &mut rng)?;
        writeln!(
            out,
            "matched pairs\t{}\tunmatched treated\t{}",
            matched.pairs.len(),
            matched.unmatched.len()
        )?;
        let base = RowOptions {
            window: args.window,
            stratify: false,
            pooling_percentile: args.pooling,
            pooling_basis: args.pooling_basis.into(),
            reset_strata_at_index: args.reset_strata,
        };
        let ag = build_counting_rows(&subjects, &matched.pairs, &base)?;
        let cf = build_counting_rows(
            &subjects,
            &matched.pairs,
            &RowOptions {
                stratify: true,
                ..base
            },
        )?;
        let rates = rate_table(&ag.rows)?;
        writeln!(out, "group\tperiod\tevents\tperson_time\trate")?;
        for (group, period, cell) in [
            ("treated", "prior", rates.treated_prior),
            ("treated", "post", rates.treated_post),
            ("control", "prior", rates.control_prior),
            ("control", "post", rates.control_post),
        ] {
            writeln!(
                out,
                "{group}\t{period}\t{}\t{:.2}\t{:.4}",
                cell.events, cell.person_time, cell.rate
            )?;
        }
        (ag.rows, cf.rows)
    };

    let (ag, _) = estimate_perr_ag(&ag_rows, variance, &options)?;
    print_estimate(&mut out, "PERR_AG", &ag)?;
    if args.stratify {
        let (cf, _) = estimate_perr_cf(&cf_rows, &options)?;
        print_estimate(&mut out, "PERR_CF", &cf)?;
    }
    Ok(())
}

fn drim(args: DrimArgs) -> Result<(), Failure> {
    let subjects = ingest_subjects(&args.subjects, &args.events)?;
    let names: Vec<&str> = args.covariates.iter().map(String::as_str).collect();
    let panel = discretize_with_covariates(&subjects, args.interval, &names)?;
    let fit = fit_drim(
        &panel,
        &DrimOptions {
            quadrature_nodes: args.nodes,
            ..DrimOptions::default()
        },
    )?;
    let mut out = io::stdout().lock();
    writeln!(out, "intervals\t{}", panel.len())?;
    writeln!(
        out,
        "lag OR\t{:.3} (95% CI {:.3} to {:.3})\tp {:.4}",
        fit.odds_ratio, fit.ci_low, fit.ci_high, fit.p_value
    )?;
    writeln!(out, "intercept\t{:.4}", fit.intercept)?;
    for (name, b) in names.iter().zip(&fit.covariate_coefficients) {
        writeln!(out, "{name}\t{b:.4}")?;
    }
    writeln!(out, "sigma_b\t{:.4}\tloglik\t{:.4}", fit.sigma_b, fit.log_likelihood)?;
    Ok(())
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn scenario(args: ScenarioArgs) -> Result<(), Failure> {
    let mut configs: Vec<ScenarioConfig> = match &args.config {
        Some(path) => vec![load_scenario_config(path)?],
        None => {
            let table = SuiteTable::from(args.table);
            scenario_specs(table)
                .iter()
                .map(|s| s.config(table, 500, ScenarioConfig::default().master_seed))
                .filter(|c| args.only.as_ref().is_none_or(|f| c.name.contains(f.as_str())))
                .collect()
        }
    };
    for config in &mut configs {
        if let Some(r) = args.replicates {
            config.replicates = r;
        }
        if let Some(seed) = args.seed {
            config.master_seed = seed;
        }
    }
    let workers = args.workers.unwrap_or_else(default_workers);
    let mut outcomes = Vec::with_capacity(configs.len());
    for (i, config) in configs.iter().enumerate() {
        log::info!("scenario {}/{}: {}", i + 1, configs.len(), config.name);
        let outcome = run_scenario(config, workers)?;
        if let Some(dir) = &args.records {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("replicates_{:02}.csv", i + 1));
            replicate_csv(&outcome.records, create(&path)?)?;
        }
        outcomes.push(outcome);
    }
    let tsv = metrics_tsv(&outcomes);
    match &args.output {
        Some(path) => create(path)?.write_all(tsv.as_bytes())?,
        None => io::stdout().write_all(tsv.as_bytes())?,
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    writeln!(out, "scenario\tbeta0\tmean_events\ttarget_events\tmean_n")?;
    let jobs: Vec<(ScenarioConfig, f64)> = match (&args.config, args.target_events) {
        (Some(path), Some(target)) => vec![(load_scenario_config(path)?, target)],
        _ => {
            let table = SuiteTable::from(args.table);
            scenario_specs(table)
                .iter()
                .map(|s| {
                    (
                        s.config(table, args.replicates, ScenarioConfig::default().master_seed),
                        s.benchmark.mean_events,
                    )
                })
                .collect()
        }
    };
    for (mut config, target) in jobs {
        if let Some(seed) = args.seed {
            config.master_seed = seed;
        }
        let c = calibrate_beta0(&config, target, args.replicates)?;
        writeln!(
            out,
            "{}\t{:.4}\t{:.1}\t{:.0}\t{:.1}",
            config.name, c.beta0, c.mean_events, target, c.mean_n
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Perr(a) => perr(a),
        Command::Drim(a) => drim(a),
        Command::Scenario(a) => scenario(a),
        Command::CalibrateBeta0(a) => calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
