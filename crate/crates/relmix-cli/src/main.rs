//! Command-line surface: compile, fit, predict, query, cluster, synth,
//! and the benchmark harnesses.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
//! Diagnostics go to standard error; data goes to files or standard
//! output. All randomness is controlled by --seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relmix::compiler::{compile, describe};
use relmix::data::{
    dataset_to_csv, ground_truth_csv, load_csv, load_csv_bound, mask_cells, read_csv_dir,
    standardize, Dataset,
};
use relmix::engine::{fit, FitConfig, InitMethod};
use relmix::error::Error;
use relmix::posterior::{FitSummary, PosteriorFile};
use relmix::query::{
    cluster_assignments, clusters_to_csv, parse_query, predict_missing_cells,
    predictions_to_csv, QuerySession,
};
use relmix::schema::{apply_config, parse_ddl, AttributeType, ColumnRole, ModelConfig, Schema};
use relmix::synth::{
    default_win_matrix, generate, h2h_gen_params, head_to_head_experiment,
    missing_value_experiment, scaling_experiment, umr_gen_params, umr_model_config, UmrSizes,
};

#[derive(Parser)]
#[command(
    name = "relmix",
    about = "Compile a relational schema into a Bayesian gated mixture model and run inference",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a schema, then print the compiled model structure.
    Compile(CompileArgs),
    /// Train the model on CSV data and write a posterior file.
    Fit(FitArgs),
    /// Predict every missing cell in the training data.
    Predict(PredictArgs),
    /// Answer probabilistic queries over new partial records.
    Query(QueryArgs),
    /// Export per-row cluster assignments for one table.
    Cluster(ClusterArgs),
    /// Generate synthetic data from a built-in preset.
    Synth(SynthArgs),
    /// Benchmark harnesses.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct CompileArgs {
    /// DDL file with CREATE TABLE statements.
    #[arg(long)]
    schema: PathBuf,
    /// Model configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data directory with <table>.csv files (resolves deferred
    /// categorical level counts).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data directory with <table>.csv files.
    #[arg(long)]
    data: PathBuf,
    /// Output posterior file.
    #[arg(long)]
    out: PathBuf,
    /// Maximum number of sweeps.
    #[arg(long, default_value_t = 200)]
    sweeps: usize,
    /// Relative ELBO convergence tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Responsibility init noise amplitude.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Initialization: "noise" or "stratified" (seed components from
    /// observed evidence; helps when evidence is weak or discrete).
    #[arg(long, default_value = "noise")]
    init: String,
    /// Worker threads for parallel row sweeps (1 = bitwise-reproducible
    /// reference mode).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Omit per-row responsibilities from the posterior file.
    #[arg(long)]
    no_resp: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Posterior file from `fit`.
    #[arg(long)]
    model: PathBuf,
    /// The data directory the model was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    /// Query file: a JSON list of partial records.
    #[arg(long)]
    query: PathBuf,
    /// Message-passing iterations over the query records.
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    model: PathBuf,
    /// Table to export assignments for.
    #[arg(long)]
    table: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Preset: "umr" (user-movie-rating) or "h2h" (players and matches).
    #[arg(long)]
    preset: String,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 943)]
    users: usize,
    #[arg(long, default_value_t = 1682)]
    movies: usize,
    #[arg(long, default_value_t = 100_000)]
    ratings: usize,
    #[arg(long, default_value_t = 90)]
    players: usize,
    #[arg(long, default_value_t = 3000)]
    matches: usize,
    /// Also mask this fraction of attribute cells and write the ground
    /// truth to ground_truth.csv.
    #[arg(long)]
    mask: Option<f64>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Missing-value prediction: relational model vs the join baseline.
    Missing(BenchMissingArgs),
    /// Seconds per sweep against leaf-table row count.
    Scaling(BenchScalingArgs),
    /// Head-to-head clustering quality.
    H2h(BenchH2hArgs),
}

#[derive(Args)]
struct BenchMissingArgs {
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5", value_delimiter = ',')]
    fractions: Vec<f64>,
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 300)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    movies: usize,
    #[arg(long, default_value_t = 8000)]
    ratings: usize,
    #[arg(long, default_value_t = 60)]
    sweeps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchScalingArgs {
    #[arg(long, default_value = "10000,20000,40000,80000", value_delimiter = ',')]
    rows: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    sweeps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchH2hArgs {
    #[arg(long, default_value_t = 90)]
    players: usize,
    #[arg(long, default_value_t = 3000)]
    matches: usize,
    #[arg(long, default_value_t = 3)]
    tiers: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not usage errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error[1]: {}", first_line(&e.to_string()));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error[{code}]: {e}");
            ExitCode::from(code as u8)
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("invalid usage").to_string()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Compile(args) => cmd_compile(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Query(args) => cmd_query(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Bench(BenchCommand::Missing(args)) => cmd_bench_missing(args),
        Command::Bench(BenchCommand::Scaling(args)) => cmd_bench_scaling(args),
        Command::Bench(BenchCommand::H2h(args)) => cmd_bench_h2h(args),
    }
}

fn read_schema(path: &Path) -> Result<Schema, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_ddl(&text)
}

fn read_config(path: &Option<PathBuf>) -> Result<ModelConfig, Error> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
            ModelConfig::from_json(&text)
        }
        None => Ok(ModelConfig::default()),
    }
}

fn write_out(out: &Option<PathBuf>, content: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn has_deferred_levels(schema: &Schema) -> bool {
    schema.tables.iter().any(|t| {
        t.columns.iter().any(|c| {
            matches!(
                c.role,
                ColumnRole::Attribute(AttributeType::Categorical { levels: None })
            )
        })
    })
}

fn cmd_compile(args: CompileArgs) -> Result<(), Error> {
    let schema = read_schema(&args.schema)?;
    let config = read_config(&args.config)?;
    let schema = apply_config(&schema, &config)?;
    let schema = match (&args.data, has_deferred_levels(&schema)) {
        (Some(dir), _) => {
            let sources = read_csv_dir(&schema, dir)?;
            let (resolved, data) = load_csv(&schema, &config, &sources)?;
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
            resolved
        }
        (None, true) => {
            return Err(Error::Config(
                "schema has text columns with deferred level counts; pass --data or declare \
                 levels in the config"
                    .into(),
            ))
        }
        (None, false) => schema,
    };
    let spec = compile(&schema, &config)?;
    print!("{}", describe(&spec));
    Ok(())
}

fn load_training_data(
    schema: &Schema,
    config: &ModelConfig,
    dir: &Path,
) -> Result<(Schema, Dataset), Error> {
    let sources = read_csv_dir(schema, dir)?;
    let (resolved, mut data) = load_csv(schema, config, &sources)?;
    standardize(&mut data);
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    Ok((resolved, data))
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    let schema = read_schema(&args.schema)?;
    let config = read_config(&args.config)?;
    let schema = apply_config(&schema, &config)?;
    let (resolved, data) = load_training_data(&schema, &config, &args.data)?;
    let spec = compile(&resolved, &config)?;
    let init = match args.init.as_str() {
        "noise" => InitMethod::Noise,
        "stratified" => InitMethod::Stratified,
        other => return Err(Error::Config(format!("unknown init method '{other}'"))),
    };
    let fit_config = FitConfig {
        max_sweeps: args.sweeps,
        tol: args.tol,
        seed: args.seed,
        noise: args.noise,
        threads: args.threads,
        init,
    };
    let (state, report) = fit(&spec, &data, &fit_config)?;
    for (i, (elbo, secs)) in report.elbo_trace.iter().zip(&report.sweep_seconds).enumerate() {
        eprintln!("sweep {:>3}: elbo {elbo:.6} ({secs:.3}s)", i + 1);
    }
    eprintln!(
        "{} after {} sweeps",
        if report.converged { "converged" } else { "stopped" },
        report.sweeps
    );
    let file = PosteriorFile::build(
        &spec,
        &data,
        &state,
        FitSummary {
            sweeps: report.sweeps,
            converged: report.converged,
            elbo: report.elbo_trace,
        },
        !args.no_resp,
    );
    std::fs::write(&args.out, file.to_json()?)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", args.out.display())))?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn read_posterior(path: &Path) -> Result<PosteriorFile, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    PosteriorFile::from_json(&text)
}

fn cmd_predict(args: PredictArgs) -> Result<(), Error> {
    let file = read_posterior(&args.model)?;
    let state = file.to_state(true)?;
    let bindings = file.bindings();
    let sources = read_csv_dir(&file.spec.schema, &args.data)?;
    let (_, data) = load_csv_bound(&file.spec.schema, &file.spec.config, &sources, &bindings)?;
    let predictions = predict_missing_cells(&state, &file.spec, &data)?;
    write_out(&args.out, &predictions_to_csv(&predictions))
}

fn cmd_query(args: QueryArgs) -> Result<(), Error> {
    let file = read_posterior(&args.model)?;
    let state = file.to_state(false)?;
    let text = std::fs::read_to_string(&args.query)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", args.query.display())))?;
    let records = parse_query(&text)?;
    let session = QuerySession::new(&file, &state);
    let predictions = session.answer(&records, args.iters)?;
    write_out(&args.out, &predictions_to_csv(&predictions))
}

fn cmd_cluster(args: ClusterArgs) -> Result<(), Error> {
    let file = read_posterior(&args.model)?;
    let state = file.to_state(true)?;
    let assignments = cluster_assignments(&state, &file.spec, &args.table)?;
    let keys = file.keys_for(&args.table).unwrap_or(&[]);
    write_out(&args.out, &clusters_to_csv(keys, &assignments))
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let (params, config) = match args.preset.as_str() {
        "umr" => (
            umr_gen_params(args.users, args.movies, args.ratings, args.seed),
            umr_model_config(),
        ),
        "h2h" => {
            let win = default_win_matrix(3);
            let config = ModelConfig::default()
                .with_components("players", 3)
                .with_components("matches", 2);
            (h2h_gen_params(args.players, args.matches, &win, args.seed), config)
        }
        other => return Err(Error::Config(format!("unknown preset '{other}'"))),
    };
    let (mut data, true_z) = generate(&params)?;
    let mut truth_rows = String::from("table,row,component\n");
    for (t, zs) in true_z.iter().enumerate() {
        for (row, z) in zs.iter().enumerate() {
            truth_rows.push_str(&format!("{},{row},{z}\n", params.schema.tables[t].name));
        }
    }
    let masked = match args.mask {
        Some(fraction) => Some(mask_cells(&mut data, fraction, args.seed)?),
        None => None,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", args.out.display())))?;
    for (table, csv) in dataset_to_csv(&params.schema, &data) {
        std::fs::write(args.out.join(format!("{table}.csv")), csv)?;
    }
    std::fs::write(args.out.join("schema.sql"), params.schema.to_ddl())?;
    std::fs::write(
        args.out.join("config.json"),
        model_config_json(&config),
    )?;
    std::fs::write(args.out.join("true_components.csv"), truth_rows)?;
    if let Some(truth) = masked {
        std::fs::write(
            args.out.join("ground_truth.csv"),
            ground_truth_csv(&params.schema, &truth),
        )?;
    }
    eprintln!("wrote {} tables to {}", params.schema.tables.len(), args.out.display());
    Ok(())
}

/// Renders a ModelConfig as the documented JSON configuration format.
fn model_config_json(config: &ModelConfig) -> String {
    let mut tables = BTreeMap::new();
    for (table, k) in &config.components {
        tables.insert(table.clone(), serde_json::json!({"components": k}));
    }
    let mut columns = BTreeMap::new();
    for (colref, over) in &config.overrides {
        let value = match over {
            relmix::schema::ColumnOverride::Real => serde_json::json!({"type": "real"}),
            relmix::schema::ColumnOverride::Boolean => serde_json::json!({"type": "boolean"}),
            relmix::schema::ColumnOverride::Categorical { levels } => match levels {
                Some(n) => serde_json::json!({"type": "categorical", "levels": n}),
                None => serde_json::json!({"type": "categorical"}),
            },
            relmix::schema::ColumnOverride::Ignore => serde_json::json!({"type": "ignore"}),
        };
        columns.insert(colref.clone(), value);
    }
    serde_json::to_string_pretty(&serde_json::json!({
        "tables": tables,
        "columns": columns,
        "priors": {
            "dirichlet_alpha": config.priors.dirichlet_alpha,
            "gauss_mean": config.priors.gauss_mean,
            "gauss_precision": config.priors.gauss_precision,
            "gamma_shape": config.priors.gamma_shape,
            "gamma_rate": config.priors.gamma_rate,
            "beta_a": config.priors.beta_a,
            "beta_b": config.priors.beta_b,
        },
        "limits": {
            "max_categories": config.limits.max_categories,
            "cpt_cell_cap": config.limits.cpt_cell_cap,
            "fk_candidate_cap": config.limits.fk_candidate_cap,
        },
    }))
    .expect("config serializes")
}

fn cmd_bench_missing(args: BenchMissingArgs) -> Result<(), Error> {
    let sizes = UmrSizes { users: args.users, movies: args.movies, ratings: args.ratings };
    let fit_config = FitConfig { max_sweeps: args.sweeps, ..FitConfig::default() };
    let result = missing_value_experiment(&sizes, &args.fractions, &args.seeds, &fit_config)?;
    std::fs::write(&args.out, result.to_csv())?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_bench_scaling(args: BenchScalingArgs) -> Result<(), Error> {
    let result = scaling_experiment(&args.rows, args.sweeps, args.seed)?;
    if let Some(r2) = result.r_squared {
        eprintln!("linear fit R^2 = {r2:.6}");
    }
    std::fs::write(&args.out, result.to_csv())?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_bench_h2h(args: BenchH2hArgs) -> Result<(), Error> {
    let win = default_win_matrix(args.tiers);
    let result = head_to_head_experiment(args.players, args.matches, &win, args.k, args.seed)?;
    eprintln!("adjusted agreement with true tiers: {:.4}", result.agreement);
    std::fs::write(&args.out, result.to_csv())?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}
