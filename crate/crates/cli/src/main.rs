use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use momentfed::federation::{
    self, cmd_aggregate, cmd_fit, cmd_generate, cmd_validate, parse_formula, ExportSpec, FitRequest,
    PipelineConfig,
};
use momentfed::glm::Family;
use momentfed::pseudogen::SolverOptions;
use momentfed::simharness::{cmd_simulate, SimSetting};
use momentfed::Error;

/// One-shot federated model fitting from shared sample moments.
///
/// Exit status: 0 on success, 1 on invalid input or a failed summary
/// validation, 2 on a numerical failure.
#[derive(Parser, Debug)]
#[command(name = "momentfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Summarize a provider CSV into moment summaries (provider side).
    Aggregate(AggregateArgs),
    /// Check summaries for structural and moment-identity violations.
    Validate {
        /// A summary file or a directory of them.
        #[arg(long)]
        summaries: PathBuf,
    },
    /// Generate pooled pseudo-data from every summary (analyst side).
    Generate(GenerateArgs),
    /// Fit a GLM or random-intercept GLMM to a CSV.
    Fit(FitArgs),
    /// Run the simulation study and write report CSVs.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated columns to export.
    #[arg(long, value_delimiter = ',', required = true)]
    vars: Vec<String>,
    /// Columns to dummy-code even if numeric.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
    /// Export one provider per level of this column; --out is then a directory.
    #[arg(long)]
    group: Option<String>,
    /// Provider id; defaults to the input file stem.
    #[arg(long)]
    provider_id: Option<String>,
    /// Highest moment order.
    #[arg(long, default_value_t = 4)]
    k: u32,
    #[arg(long, default_value_t = 250)]
    subgroup_base: usize,
    #[arg(long, default_value_t = 500)]
    subgroup_cap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
    /// Required max |moment residual|.
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    /// Extra seeded attempts per subgroup.
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    /// Worker threads; defaults to $MOMENTFED_WORKERS or the core count.
    #[arg(long)]
    workers: Option<usize>,
}

impl SolverArgs {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            seed: self.seed,
            max_iterations: self.max_iterations,
            residual_tolerance: self.tolerance,
            restarts: self.restarts,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// A summary file or a directory of them.
    #[arg(long)]
    summaries: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// e.g. "los ~ covid + charges + C(race)"
    #[arg(long)]
    formula: String,
    /// gaussian, soft_binomial or soft_poisson
    #[arg(long, default_value = "gaussian")]
    family: Family,
    /// Grouping column for a random intercept.
    #[arg(long)]
    random_intercept: Option<String>,
    /// Standardize this predictor before fitting (repeatable).
    #[arg(long = "std")]
    standardize: Vec<String>,
    /// Quadrature nodes per group; 1 is the Laplace approximation.
    #[arg(long, default_value_t = 1)]
    nagq: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// m30n100, m50n60 or m100n30
    #[arg(long)]
    setting: String,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Comma-separated moment orders.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    k: Vec<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    nagq: usize,
    /// Override the random-intercept standard deviation.
    #[arg(long)]
    sigma_u: Option<f64>,
    /// Leave out the nuisance predictors x4 and x5.
    #[arg(long)]
    no_nuisance: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Aggregate(a) => {
            let config = PipelineConfig {
                k_max: a.k,
                subgroup_base: a.subgroup_base,
                subgroup_cap: a.subgroup_cap,
                ..Default::default()
            };
            let spec = ExportSpec {
                variables: a.vars,
                categorical: a.categorical,
                group_column: a.group,
                provider_id: a.provider_id,
            };
            for path in cmd_aggregate(&a.input, &spec, &config, &a.out)? {
                println!("{}", path.display());
            }
        }
        Command::Validate { summaries } => {
            let mut all = Vec::new();
            for (id, report) in cmd_validate(&summaries)? {
                if report.is_ok() {
                    println!("{id}: ok");
                } else {
                    for v in &report.violations {
                        println!("{id}: {v}");
                    }
                    all.extend(report.violations.into_iter().map(|v| format!("{id}: {v}")));
                }
            }
            if !all.is_empty() {
                return Err(Error::Validation(all));
            }
        }
        Command::Generate(g) => {
            let workers = federation::worker_count(g.solver.workers)?;
            let table = cmd_generate(&g.summaries, &g.solver.options(), workers, &g.out)?;
            info!("{} rows written to {}", table.n_rows(), g.out.display());
        }
        Command::Fit(f) => {
            let req = FitRequest {
                formula: parse_formula(&f.formula)?,
                family: f.family,
                random_intercept: f.random_intercept,
                standardize: f.standardize,
                n_agq: f.nagq,
            };
            let report = cmd_fit(&f.data, &req, &f.formula, &f.out)?;
            for (name, b) in report.predictors.iter().zip(report.coefficients()) {
                println!("{name:>16} {b:>14.6}");
            }
            println!("{:>16} {:>14.3}", "AIC", report.aic());
        }
        Command::Simulate(s) => {
            let mut setting = SimSetting::named(&s.setting)?;
            setting.reps = s.reps;
            setting.k_values = s.k;
            setting.seed = s.seed;
            setting.n_agq = s.nagq;
            setting.nuisance = !s.no_nuisance;
            if let Some(su) = s.sigma_u {
                setting.sigma_u = su;
            }
            let workers = federation::worker_count(s.workers)?;
            let report = cmd_simulate(&setting, workers, &s.out)?;
            for row in &report.selection {
                println!(
                    "{} {}: {} replicates, {} failed, correct {:.3}, same as actual {}",
                    row.setting,
                    row.data,
                    row.n_reps,
                    row.n_failed,
                    row.prop_correct,
                    row.prop_same_as_actual.map_or("-".into(), |p| format!("{p:.3}"))
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
