mod fit;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use xd_core::data::{self, generate_synthetic, sample_model, Dataset, Preset, Schema};
use xd_core::{likelihood, GmmParams, Projection, XdError};

#[derive(Parser, Debug)]
#[command(name = "xd", version, about = "Gaussian mixture density estimation for noisy data")]
struct Cli {
    /// Worker threads for per-point work. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset together with its generating model.
    Gen(GenArgs),
    /// Fit a mixture model and write `model.json` and `report.json`.
    Fit(fit::FitArgs),
    /// Print the mean log-likelihood per point of a model on a dataset.
    Eval(EvalArgs),
    /// Draw noiseless samples from a model.
    Sample(SampleArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value = "three-blobs")]
    preset: String,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for data.csv, schema.json and truth.json.
    #[arg(long)]
    out: PathBuf,
    /// Also write train.csv, val.csv and test.csv with these fractions, e.g. 0.8,0.1,0.1.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to schema.json next to the data file.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `--schema` if given, otherwise `schema.json` beside `data`.
pub(crate) fn resolve_schema(data: &Path, schema: Option<&Path>) -> Result<Schema> {
    let path = match schema {
        Some(p) => p.to_path_buf(),
        None => data.parent().unwrap_or(Path::new(".")).join("schema.json"),
    };
    if !path.exists() {
        bail!("schema file {} not found (pass --schema)", path.display());
    }
    Ok(Schema::load(&path)?)
}

pub(crate) fn load_dataset(path: &Path, schema: Option<&Path>) -> Result<Dataset> {
    let schema = resolve_schema(path, schema)?;
    Ok(data::load_csv(path, &schema)?)
}

fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    data::write_csv(ds, BufWriter::new(file))?;
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let preset = Preset::parse(&args.preset).ok_or_else(|| anyhow!("unknown preset {:?}", args.preset))?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let (ds, truth) = generate_synthetic(&preset.truth(), &preset.noise(), &Projection::Identity, args.n, args.seed)?;
    write_dataset(&ds, &args.out.join("data.csv"))?;
    ds.schema.save(&args.out.join("schema.json"))?;
    truth.save(&args.out.join("truth.json"))?;
    if let Some(f) = args.split {
        if f.len() != 3 {
            bail!("--split takes three comma-separated fractions");
        }
        let (train, val, test) = data::split(&ds, (f[0], f[1], f[2]), args.seed)?;
        write_dataset(&train, &args.out.join("train.csv"))?;
        write_dataset(&val, &args.out.join("val.csv"))?;
        write_dataset(&test, &args.out.join("test.csv"))?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = GmmParams::load(&args.model)?;
    let ds = load_dataset(&args.data, args.schema.as_deref())?;
    let ll = likelihood::mean_log_likelihood(&model, &ds.points)?;
    println!("{ll:.6}");
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let model = GmmParams::load(&args.model)?;
    let samples = sample_model(&model, args.n, args.seed)?;
    match args.out {
        Some(path) => {
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            data::write_samples(&samples, BufWriter::new(file))?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            data::write_samples(&samples, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Fit(a) => fit::cmd_fit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.downcast_ref::<XdError>().is_some_and(XdError::is_numerical);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
