//! `bilinid` command-line front end.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bilinid::hankel::{build_hankel, default_levels};
use bilinid::io::{ingest_input, markov_from_json, markov_to_json, read_batch, spectrum_csv, trace_csv, write_batch};
use bilinid::narx::NarxFile;
use bilinid::pipeline::{gaussian_input, harmonic_input, DirectOutcome};
use bilinid::synthetic::{random_stable_discrete, toy_system, RandomSystemSpec};
use bilinid::{
    compare, discretize_backward_euler, generate_experiments, identify_direct, identify_from_sequence,
    ingest, recover_markov, Category, DatasetFormat, DiscreteBilinearSystem, Model, PipelineConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(bilinid::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) => match e.category() {
                Category::Usage => 2,
                Category::Data => 3,
                Category::Numerical => 4,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<bilinid::Error> for CliError {
    fn from(e: bilinid::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "bilinid", version, about = "Bilinear state-space identification")]
struct Cli {
    /// TOML pipeline configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset and print its length and statistics.
    IngestCheck(DataArgs),
    /// Identify a model by running experiments on a known simulator.
    IdentifyDirect {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Identify a model from one measured sequence through a NARX surrogate.
    IdentifySequence {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Write the trained NARX network here.
        #[arg(long)]
        narx_out: Option<PathBuf>,
        /// Write a t,u,y_ref,model,narx overlay here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Simulate a model file on an input file or a generated input.
    Simulate(SimulateArgs),
    /// Score model outputs against a reference dataset.
    Compare(CompareArgs),
    /// Recover and dump the Markov parameters.
    Markov {
        #[command(flatten)]
        source: OptionalSourceArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Recover from this experiment batch instead of running experiments.
        #[arg(long, conflicts_with_all = ["model", "toy", "random"])]
        batch: Option<PathBuf>,
        /// Also write the generated experiment batch here.
        #[arg(long)]
        batch_out: Option<PathBuf>,
        /// Destination of the Markov JSON; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the Hankel singular spectrum as index,sigma,sigma_ratio.
    Hankel {
        /// Markov parameters written by the markov subcommand.
        #[arg(long)]
        markov: PathBuf,
        /// Row levels; defaults to half the depth.
        #[arg(long)]
        p: Option<usize>,
        /// Column levels; defaults to the remaining depth.
        #[arg(long)]
        q: Option<usize>,
        /// Destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    /// Comma-separated with a t,u,y header.
    Csv,
    /// Whitespace-separated columns chosen by --u-col and --y-col.
    Daisy,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    layout: LayoutArgs,
}

#[derive(Args)]
struct LayoutArgs {
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// 1-based input column (daisy).
    #[arg(long)]
    u_col: Option<usize>,
    /// 1-based output column (daisy).
    #[arg(long)]
    y_col: Option<usize>,
    /// 1-based time column (daisy).
    #[arg(long)]
    t_col: Option<usize>,
    /// Sampling time; overrides one inferred from a time column.
    #[arg(long)]
    sample_time: Option<f64>,
}

impl LayoutArgs {
    fn format(&self, need_y: bool) -> CliResult<DatasetFormat> {
        match self.format {
            FormatArg::Csv => Ok(DatasetFormat::Csv),
            FormatArg::Daisy => {
                let u_col = self
                    .u_col
                    .ok_or_else(|| CliError::Usage("daisy format needs --u-col".into()))?;
                let y_col = match (self.y_col, need_y) {
                    (Some(c), _) => c,
                    (None, false) => u_col,
                    (None, true) => return Err(CliError::Usage("daisy format needs --y-col".into())),
                };
                Ok(DatasetFormat::Whitespace {
                    u_col,
                    y_col,
                    t_col: self.t_col,
                })
            }
        }
    }
}

impl DataArgs {
    fn load(&self) -> CliResult<bilinid::Dataset> {
        let mut ds = ingest(&self.data, &self.layout.format(true)?)?;
        if let Some(dt) = self.layout.sample_time {
            ds.dt = Some(dt);
        }
        Ok(ds)
    }
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SourceSelect {
    /// Model file to run experiments on.
    #[arg(long)]
    model: Option<PathBuf>,
    /// The built-in two-state toy system.
    #[arg(long)]
    toy: bool,
    /// A random stable system of this order.
    #[arg(long)]
    random: Option<usize>,
}

#[derive(Args)]
struct SourceArgs {
    #[command(flatten)]
    select: SourceSelect,
    #[command(flatten)]
    extra: SourceExtra,
}

#[derive(Args)]
#[group(required = false, multiple = false)]
struct OptionalSourceSelect {
    /// Model file to run experiments on.
    #[arg(long)]
    model: Option<PathBuf>,
    /// The built-in two-state toy system.
    #[arg(long)]
    toy: bool,
    /// A random stable system of this order.
    #[arg(long)]
    random: Option<usize>,
}

#[derive(Args)]
struct OptionalSourceArgs {
    #[command(flatten)]
    select: OptionalSourceSelect,
    #[command(flatten)]
    extra: SourceExtra,
}

#[derive(Args)]
struct SourceExtra {
    /// Seed for --random.
    #[arg(long, default_value_t = 0)]
    system_seed: u64,
    /// Sampling time for discretizing a continuous model.
    #[arg(long)]
    dt: Option<f64>,
}

fn resolve_source(
    model: Option<&Path>,
    toy: bool,
    random: Option<usize>,
    extra: &SourceExtra,
) -> CliResult<DiscreteBilinearSystem> {
    if let Some(path) = model {
        return discrete_model(&Model::load(path)?, extra.dt);
    }
    if toy {
        return Ok(toy_system());
    }
    match random {
        Some(0) => Err(CliError::Usage("--random needs a positive order".into())),
        Some(n) => Ok(random_stable_discrete(
            &mut ChaCha8Rng::seed_from_u64(extra.system_seed),
            n,
            RandomSystemSpec::default(),
        )),
        None => Err(CliError::Usage("choose one of --model, --toy or --random".into())),
    }
}

impl SourceArgs {
    fn system(&self) -> CliResult<DiscreteBilinearSystem> {
        let s = &self.select;
        resolve_source(s.model.as_deref(), s.toy, s.random, &self.extra)
    }
}

impl OptionalSourceArgs {
    fn system(&self) -> CliResult<DiscreteBilinearSystem> {
        let s = &self.select;
        resolve_source(s.model.as_deref(), s.toy, s.random, &self.extra)
    }
}

/// Discrete form of a model; continuous models need an explicit `dt`.
fn discrete_model(model: &Model, dt: Option<f64>) -> CliResult<DiscreteBilinearSystem> {
    match model {
        Model::Discrete(sys) => Ok(sys.clone()),
        Model::Continuous(csys, _) => {
            let dt = dt.ok_or_else(|| {
                CliError::Usage("continuous model needs --dt to be discretized".into())
            })?;
            Ok(discretize_backward_euler(csys, dt)?)
        }
    }
}

#[derive(Args)]
struct PipelineArgs {
    /// Experiment length L (the Markov depth).
    #[arg(long)]
    depth: Option<usize>,
    /// Experiment count d.
    #[arg(long)]
    experiments: Option<usize>,
    /// Excitation mean.
    #[arg(long, allow_hyphen_values = true)]
    mean: Option<f64>,
    /// Excitation standard deviation.
    #[arg(long)]
    std: Option<f64>,
    /// Relative singular-value tolerance for order selection.
    #[arg(long)]
    tol: Option<f64>,
    /// Fixed realization order.
    #[arg(long)]
    order: Option<usize>,
    /// Experiment and training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Leading samples used to train the surrogate.
    #[arg(long)]
    train_prefix: Option<usize>,
    /// NARX input and output lags.
    #[arg(long)]
    lags: Option<usize>,
    /// NARX hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// NARX training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Skip the zero-response augmentation segment.
    #[arg(long)]
    no_zero_response: bool,
}

impl PipelineArgs {
    fn apply(&self, mut cfg: PipelineConfig) -> PipelineConfig {
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$($target)+ = v;
                }
            };
        }
        set!(depth => depth);
        set!(experiments => experiments);
        set!(mean => excitation_mean);
        set!(std => excitation_std);
        set!(tol => tol);
        set!(seed => seed);
        set!(train_prefix => train_prefix);
        set!(hidden => narx.hidden);
        set!(epochs => train.epochs);
        if let Some(r) = self.order {
            cfg.order = Some(r);
        }
        if let Some(lags) = self.lags {
            cfg.narx.input_lags = lags;
            cfg.narx.output_lags = lags;
        }
        if self.no_zero_response {
            cfg.zero_response = false;
        }
        cfg
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Write the identified model here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the Hankel spectrum here.
    #[arg(long)]
    spectrum: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Model file.
    #[arg(long)]
    model: PathBuf,
    /// Sampling time, required for continuous models.
    #[arg(long)]
    dt: Option<f64>,
    #[command(flatten)]
    input: InputSelect,
    #[command(flatten)]
    layout: LayoutArgs,
    /// Seed for --gaussian.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mean for --gaussian.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    mean: f64,
    /// Standard deviation for --gaussian.
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    /// Destination of the t,u,y table; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InputSelect {
    /// Input file; its u column drives the model.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generate u_k = 1/(k+1) for this many steps.
    #[arg(long)]
    harmonic: Option<usize>,
    /// Generate this many seeded Gaussian samples.
    #[arg(long)]
    gaussian: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model file to simulate on the reference input, as name=path.
    #[arg(long = "model", value_parser = parse_named)]
    models: Vec<(String, PathBuf)>,
    /// Output trace with a y column, as name=path.
    #[arg(long = "trace", value_parser = parse_named)]
    traces: Vec<(String, PathBuf)>,
    /// Sampling time for continuous models.
    #[arg(long)]
    dt: Option<f64>,
    /// Write the overlay t,u,y_ref,<names> table here.
    #[arg(long)]
    plot: Option<PathBuf>,
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Ok((
            Path::new(s)
                .file_stem()
                .map_or_else(|| s.to_string(), |n| n.to_string_lossy().into_owned()),
            PathBuf::from(s),
        )),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn write_opt(path: Option<&Path>, text: impl FnOnce() -> CliResult<String>) -> CliResult<()> {
    if let Some(path) = path {
        fs::write(path, text()?)?;
    }
    Ok(())
}

fn print_spectrum_head(sv: &[f64]) {
    let first = sv.first().copied().unwrap_or(1.0);
    let head: Vec<String> = sv.iter().take(8).map(|s| format!("{:.3e}", s / first)).collect();
    println!("sigma/sigma_1: [{}]", head.join(", "));
}

fn run_direct(source: &SourceArgs, cfg: &PipelineConfig, output: &OutputArgs) -> CliResult<()> {
    let truth = source.system()?;
    let DirectOutcome {
        realization, report, ..
    } = identify_direct(&truth, Some(&truth), cfg)?;
    println!("order {}", report.order);
    print_spectrum_head(&report.singular_values);
    println!(
        "recovery rank {}/{}, condition {:.3e}",
        report.diagnostics.rank, report.diagnostics.unknowns, report.diagnostics.condition
    );
    if let (Some(m), Some(h), Some(v)) = (report.markov_error, report.harmonic_error, report.validation_error) {
        println!("markov error {m:.3e}, harmonic response error {h:.3e}, relative validation error {v:.3e}");
    }
    write_opt(output.out.as_deref(), || Ok(Model::Discrete(realization.system.clone()).to_json()? + "\n"))?;
    write_opt(output.report.as_deref(), || Ok(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_opt(output.spectrum.as_deref(), || Ok(spectrum_csv(&report.singular_values)))?;
    Ok(())
}

fn run_sequence(
    data: &DataArgs,
    cfg: &PipelineConfig,
    output: &OutputArgs,
    narx_out: Option<&Path>,
    trace: Option<&Path>,
) -> CliResult<()> {
    let ds = data.load()?;
    let outcome = identify_from_sequence(&ds, cfg)?;
    let report = &outcome.report;
    println!("order {}", report.order);
    print_spectrum_head(&report.singular_values);
    println!("training samples {}", report.training_samples);
    println!("NARX validation MSE {:.3e}", report.narx_validation_mse);
    println!("model MPE {:.4}%, NARX MPE {:.4}%", report.mpe, report.narx_mpe);
    write_opt(output.out.as_deref(), || Ok(Model::Discrete(outcome.model.clone()).to_json()? + "\n"))?;
    write_opt(output.report.as_deref(), || Ok(serde_json::to_string_pretty(report)? + "\n"))?;
    write_opt(output.spectrum.as_deref(), || Ok(spectrum_csv(&report.singular_values)))?;
    write_opt(narx_out, || Ok(serde_json::to_string_pretty(&NarxFile::from(&outcome.narx.model))? + "\n"))?;
    write_opt(trace, || {
        let trend = &report.trend;
        let y_model = outcome.model.simulate(&ds.u)?;
        let y_narx = trend.denormalize_output(&outcome.narx.model.closed_loop(&trend.normalize_input(&ds.u))?);
        Ok(trace_csv(&ds.u, &ds.y, &[("model", &y_model), ("narx", &y_narx)], ds.dt)?)
    })?;
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> CliResult<()> {
    let model = Model::load(&args.model)?;
    let sys = discrete_model(&model, args.dt)?;
    let (u, file_dt) = if let Some(path) = &args.input.input {
        ingest_input(path, &args.layout.format(false)?)?
    } else if let Some(len) = args.input.harmonic {
        (harmonic_input(len), None)
    } else if let Some(len) = args.input.gaussian {
        (gaussian_input(len, args.mean, args.std, args.seed)?, None)
    } else {
        return Err(CliError::Usage("choose one of --input, --harmonic or --gaussian".into()));
    };
    let y = sys.simulate(&u)?;
    let dt = args.layout.sample_time.or(args.dt).or(file_dt);
    let mut text = String::from("t,u,y\n");
    for (k, (u, y)) in u.iter().zip(&y).enumerate() {
        let t = dt.map_or(k as f64, |dt| k as f64 * dt);
        text.push_str(&format!("{t:?},{u:?},{y:?}\n"));
    }
    emit(args.out.as_deref(), &text)
}

fn run_compare(args: &CompareArgs) -> CliResult<()> {
    if args.models.is_empty() && args.traces.is_empty() {
        return Err(CliError::Usage("give at least one --model or --trace".into()));
    }
    let ds = args.data.load()?;
    let mut outputs: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, path) in &args.models {
        let sys = discrete_model(&Model::load(path)?, args.dt)?;
        outputs.push((name.clone(), sys.simulate(&ds.u)?));
    }
    for (name, path) in &args.traces {
        let trace = ingest(path, &DatasetFormat::Csv)?;
        outputs.push((name.clone(), trace.y));
    }
    if let Some((name, y)) = outputs.iter().find(|(_, y)| y.len() != ds.len()) {
        return Err(CliError::Lib(bilinid::Error::Dimension(format!(
            "{name} has {} samples, reference has {}",
            y.len(),
            ds.len()
        ))));
    }
    let traces: Vec<(&str, &[f64])> = outputs.iter().map(|(n, y)| (n.as_str(), y.as_slice())).collect();
    let metrics = compare(&ds.y, &traces)?;
    println!("model,mpe,max_abs,rms");
    for m in &metrics {
        println!("{},{:?},{:?},{:?}", m.name, m.mpe, m.max_abs, m.rms);
    }
    write_opt(args.plot.as_deref(), || Ok(trace_csv(&ds.u, &ds.y, &traces, ds.dt)?))
}

fn run_markov(
    source: &OptionalSourceArgs,
    cfg: &PipelineConfig,
    batch_in: Option<&Path>,
    batch_out: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    cfg.validate()?;
    let batch = match batch_in {
        Some(path) => read_batch(&fs::read_to_string(path)?)?,
        None => {
            let sys = source.system()?;
            generate_experiments(&sys, cfg.experiments, cfg.depth, &cfg.excitation(), cfg.seed)?
        }
    };
    write_opt(batch_out, || Ok(write_batch(&batch)))?;
    let recovery = recover_markov(&batch)?;
    log::info!(
        "rank {}/{}, condition {:.3e}, residual {:.3e}",
        recovery.diagnostics.rank,
        recovery.diagnostics.unknowns,
        recovery.diagnostics.condition,
        recovery.diagnostics.residual
    );
    emit(out, &(markov_to_json(&recovery.markov)? + "\n"))
}

fn run_hankel(markov: &Path, p: Option<usize>, q: Option<usize>, out: Option<&Path>) -> CliResult<()> {
    let w = markov_from_json(&fs::read_to_string(markov)?)?;
    let (p, q) = match (p, q) {
        (Some(p), Some(q)) => (p, q),
        (Some(p), None) => (p, w.depth().saturating_sub(p)),
        (None, Some(q)) => (w.depth().saturating_sub(q), q),
        (None, None) => default_levels(w.depth()),
    };
    let hs = build_hankel(&w, p, q)?;
    emit(out, &spectrum_csv(&hs.singular_values()))
}

fn run(cli: Cli) -> CliResult<()> {
    let base = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::IngestCheck(data) => {
            let ds = data.load()?;
            let stats = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                format!("mean {mean}, min {min}, max {max}")
            };
            println!("samples {}", ds.len());
            match ds.dt {
                Some(dt) => println!("dt {dt}"),
                None => println!("dt unknown"),
            }
            println!("u: {}", stats(&ds.u));
            println!("y: {}", stats(&ds.y));
            Ok(())
        }
        Command::IdentifyDirect {
            source,
            pipeline,
            output,
        } => run_direct(source, &pipeline.apply(base), output),
        Command::IdentifySequence {
            data,
            pipeline,
            output,
            narx_out,
            trace,
        } => run_sequence(data, &pipeline.apply(base), output, narx_out.as_deref(), trace.as_deref()),
        Command::Simulate(args) => run_simulate(args),
        Command::Compare(args) => run_compare(args),
        Command::Markov {
            source,
            pipeline,
            batch,
            batch_out,
            out,
        } => run_markov(source, &pipeline.apply(base), batch.as_deref(), batch_out.as_deref(), out.as_deref()),
        Command::Hankel { markov, p, q, out } => run_hankel(markov, *p, *q, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
