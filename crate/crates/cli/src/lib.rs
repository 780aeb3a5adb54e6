//! Command-line front end: simulate, estimate, predict, scenario, sweep and
//! metrics subcommands over the core library.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 when the
//! computation itself fails numerically.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cmmnl_core::analysis::{
    all_binary_grid, compute_metrics, context_sweep, marginal_context_effect, one_at_a_time_grid, predict,
    scenario_table, write_predictions, FitMetrics,
};
use cmmnl_core::artifact::{self, ModelArtifact};
use cmmnl_core::data::{load_choice_csv, write_choice_csv, write_context_csv, ModelConfig};
use cmmnl_core::model::{ChoiceDataset, ContextKind};
use cmmnl_core::simulate::{generate_cmmnl, generate_mmnl, ShiftSpec, SimSpec};
use cmmnl_core::vi::ModelKind;
use cmmnl_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cmmnl", version, about = "Context-aware mixed logit estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a simulation spec.
    Simulate(SimulateArgs),
    /// Fit a model and write the model artifact.
    Estimate(EstimateArgs),
    /// Predicted choice probabilities for a dataset.
    Predict(PredictArgs),
    /// Base parameters and context shifts over a grid of scenarios.
    Scenario(ScenarioArgs),
    /// Parameter trajectory along one continuous context dimension.
    Sweep(SweepArgs),
    /// Log-likelihood, hit rate and mean choice probability on a dataset.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Directory for choices.csv, context.csv, config.json and truth.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    choices: PathBuf,
    #[arg(long)]
    context: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Overrides the model kind in the config.
    #[arg(long)]
    model: Option<ModelKind>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: PathBuf,
    /// Model artifact to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the gradient; results depend only on the count.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Grid {
    AllBinary,
    OneAtATime,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, value_enum, default_value = "all-binary")]
    grid: Grid,
    /// Reference context as name=value pairs; unnamed dimensions are 0.
    #[arg(long, value_delimiter = ',')]
    reference: Vec<String>,
    /// Relative size below which shifts are blanked in the printed table.
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    /// Full unsuppressed table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the marginal effect of every binary dimension.
    #[arg(long)]
    marginal: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    dim: String,
    #[arg(long)]
    from: f64,
    #[arg(long)]
    to: f64,
    #[arg(long)]
    steps: usize,
    /// Values of the other dimensions as name=value pairs.
    #[arg(long, value_delimiter = ',')]
    at: Vec<String>,
    /// Add `<name>_rel` columns relative to the value at zero.
    #[arg(long)]
    relative: bool,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Scenario(a) => scenario(a),
        Command::Sweep(a) => sweep(a),
        Command::Metrics(a) => metrics(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", a.spec.display())))?;
    let mut spec: SimSpec = serde_json::from_str(&text)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let (data, truth) = if spec.shift == ShiftSpec::None {
        generate_mmnl(&spec)?
    } else {
        generate_cmmnl(&spec)?
    };
    std::fs::create_dir_all(&a.out_dir)?;
    write_choice_csv(&data, create(&a.out_dir.join("choices.csv"))?)?;
    write_context_csv(&data, create(&a.out_dir.join("context.csv"))?)?;
    let kind = if data.n_context() > 0 {
        ModelKind::Cmmnl
    } else if data.n_random() > 0 {
        ModelKind::Mmnl
    } else {
        ModelKind::Mnl
    };
    let mut cfg = ModelConfig::for_dataset(&data, kind);
    cfg.fit.seed = spec.seed;
    std::fs::write(a.out_dir.join("config.json"), cfg.to_json()? + "\n")?;
    write_json(&truth, Some(&a.out_dir.join("truth.json")))?;
    println!(
        "wrote {} individuals, {} occasions to {}",
        data.n_individuals(),
        data.n_occasions(),
        a.out_dir.display()
    );
    Ok(())
}

fn load_data(data: &DataArgs, cfg: &ModelConfig) -> Result<ChoiceDataset> {
    load_choice_csv(&data.choices, data.context.as_deref(), cfg)
}

/// Sidecar paths written next to the artifact.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "fit".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let mut cfg = ModelConfig::load(&a.config)?;
    if let Some(m) = a.model {
        cfg.model_kind = m;
    }
    if let Some(seed) = a.seed {
        cfg.fit.seed = seed;
    }
    if let Some(t) = a.threads {
        cfg.fit.threads = t;
    }
    if let Some(s) = a.max_steps {
        cfg.fit.max_steps = s;
    }
    cfg.validate()?;
    let raw = load_data(&a.data, &cfg)?;
    let trace_path = sidecar(&a.out, "trace.csv");
    let trace_name = trace_path.file_name().map(|n| n.to_string_lossy().into_owned());
    let est = match artifact::estimate(&cfg, &raw, trace_name) {
        Ok(est) => est,
        Err(Error::Diverged { step, reason, trace }) => {
            trace.save(&trace_path)?;
            eprintln!("trace up to the failure written to {}", trace_path.display());
            return Err(Error::Diverged { step, reason, trace });
        }
        Err(e) => return Err(e),
    };
    est.trace.save(&trace_path)?;
    est.artifact.save(&a.out)?;
    write_json(&est.metrics, Some(&sidecar(&a.out, "metrics.json")))?;
    print_summary(&est.artifact, &est.metrics);
    Ok(())
}

fn print_summary(artifact: &ModelArtifact, m: &FitMetrics) {
    println!("{:<24} {:>10} {:>10} {:>10} {:>10}", "parameter", "mean", "sd", "2.5%", "97.5%");
    for r in &artifact.summary {
        println!(
            "{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {}",
            r.name, r.mean, r.sd, r.lower, r.upper, r.stars
        );
    }
    println!(
        "status {:?}, {} steps, log-likelihood {:.3}, {:.1}% correct, avg prob {:.4}, {:.1}s",
        artifact.status, artifact.state.step_count, m.log_likelihood, m.pct_correct, m.avg_choice_prob, m.wall_seconds
    );
}

/// Reads a dataset the way the artifact's training data was read.
fn artifact_data(artifact: &ModelArtifact, data: &DataArgs) -> Result<ChoiceDataset> {
    artifact.prepare(&load_data(data, &artifact.config)?)
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let artifact = ModelArtifact::load(&a.fit)?;
    let data = artifact_data(&artifact, &a.data)?;
    let preds = predict(&data, &artifact.state)?;
    write_predictions(&preds, output(a.out.as_deref())?)
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let artifact = ModelArtifact::load(&a.fit)?;
    let data = artifact_data(&artifact, &a.data)?;
    let m = compute_metrics(&data, &artifact.state, 0.0)?;
    write_json(&m, a.out.as_deref())
}

fn parse_pairs(items: &[String]) -> Result<Vec<(String, f64)>> {
    items
        .iter()
        .map(|item| {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected name=value, got '{item}'")))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("'{value}' is not a number in '{item}'")))?;
            Ok((name.trim().to_string(), v))
        })
        .collect()
}

fn scenario(a: ScenarioArgs) -> Result<()> {
    let artifact = ModelArtifact::load(&a.fit)?;
    let reference = artifact.assignment(&parse_pairs(&a.reference)?)?;
    let kinds = &artifact.context_kinds;
    let grid = match a.grid {
        Grid::AllBinary => all_binary_grid(kinds, &reference),
        Grid::OneAtATime => one_at_a_time_grid(kinds, &reference),
    };
    let report = scenario_table(&artifact.state, &artifact.context_names, kinds, &grid, &reference, a.threshold)?;
    if let Some(out) = &a.out {
        report.write_csv(create(out)?)?;
    }
    let mut stdout = io::stdout().lock();
    write!(stdout, "{}", report.render())?;
    if a.marginal {
        let pinned: Vec<(usize, f64)> = (0..kinds.len())
            .filter(|d| kinds[*d] == ContextKind::Continuous)
            .map(|d| (d, reference[d]))
            .collect();
        writeln!(stdout, "\nmarginal effects")?;
        for (d, name) in artifact.context_names.iter().enumerate() {
            if kinds[d] != ContextKind::Binary {
                continue;
            }
            let eff = marginal_context_effect(&artifact.state, kinds, d, &pinned)?;
            let cells: Vec<String> = artifact
                .state
                .column_names
                .iter()
                .zip(&eff)
                .map(|(c, v)| format!("{c} {v:+.4}"))
                .collect();
            writeln!(stdout, "{name}: {}", cells.join(", "))?;
        }
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let artifact = ModelArtifact::load(&a.fit)?;
    let dim = artifact.context_index(&a.dim)?;
    let fixed = artifact.assignment(&parse_pairs(&a.at)?)?;
    let scaling = artifact.scaling.context.iter().find(|s| s.name == a.dim);
    let table = context_sweep(
        &artifact.state,
        &artifact.context_names,
        &artifact.context_kinds,
        dim,
        (a.from, a.to),
        a.steps,
        &fixed,
        scaling,
    )?;
    table.write_csv(output(a.out.as_deref())?, a.relative)
}
