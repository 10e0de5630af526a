use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graphmmp_core::artifacts::{build_graphs, run_ablation, run_cv};
use graphmmp_core::config::RunConfig;
use graphmmp_core::data::{load_dataset, write_dataset};
use graphmmp_core::report::{ablation_from_json, ablation_table, metrics_from_json, metrics_table};
use graphmmp_core::synth::{generate, SynthSpec};
use graphmmp_core::Error;

/// Two-stage multimodal prognosis: MI feature graphs and graph attention
/// with state-space fusion.
#[derive(Parser)]
#[command(name = "graphmmp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-fold MI tables and per-patient graph JSON.
    BuildGraphs(RunArgs),
    /// Cross-validate the full pipeline and write reports and checkpoints.
    Cv(RunArgs),
    /// Compare the full model against the no-MI and no-MGF variants.
    Ablate(RunArgs),
    /// Generate a synthetic two-modality dataset with manifest.
    Synth(SynthArgs),
    /// Render a JSON report as a text table.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Use uniform edge weights of 1.0.
    #[arg(long)]
    no_mi: bool,
    /// Replace the fusion block by the identity.
    #[arg(long)]
    no_mgf: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of patients.
    #[arg(long)]
    n: Option<usize>,
    /// Overrides the dependency strength.
    #[arg(long)]
    strength: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json or ablation.json written by `cv` or `ablate`.
    #[arg(long)]
    input: PathBuf,
    /// With --manifest, checks the report fingerprint against this config.
    #[arg(long, requires = "manifest")]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_config(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.ablation.no_mi |= args.no_mi;
    cfg.ablation.no_mgf |= args.no_mgf;
    cfg.validate()?;
    Ok(cfg)
}

/// Saves the effective configuration next to the outputs so the
/// fingerprint can be recomputed from files alone.
fn save_config(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write(&out.join("config.toml"))
}

fn report_fingerprint(text: &str) -> Result<(String, String), Error> {
    if let Ok(r) = metrics_from_json(text) {
        return Ok((r.fingerprint.clone(), metrics_table(&r)));
    }
    let r = ablation_from_json(text)?;
    Ok((r.fingerprint.clone(), ablation_table(&r)))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::BuildGraphs(args) => {
            let cfg = run_config(&args)?;
            let dataset = load_dataset(&args.manifest)?;
            save_config(&cfg, &args.out)?;
            let summary = build_graphs(&dataset, &cfg, &args.out)?;
            for f in &summary.folds {
                println!(
                    "fold {}: {} graphs, {} nodes, {} directed edges ({} intra, {} cross pairs)",
                    f.fold, f.graphs, f.nodes, f.edges, f.intra_pairs, f.cross_pairs
                );
            }
            println!("fingerprint {}", summary.fingerprint);
        }
        Command::Cv(args) => {
            let cfg = run_config(&args)?;
            let dataset = load_dataset(&args.manifest)?;
            save_config(&cfg, &args.out)?;
            let report = run_cv(&dataset, &cfg, &args.out, args.jobs)?;
            print!("{}", metrics_table(&report));
        }
        Command::Ablate(args) => {
            if args.no_mi || args.no_mgf {
                return Err(Error::contract("ablate runs every variant; drop --no-mi/--no-mgf"));
            }
            let cfg = run_config(&args)?;
            if cfg.ablation.no_mi || cfg.ablation.no_mgf {
                return Err(Error::contract("ablate runs every variant; clear the [ablation] switches"));
            }
            let dataset = load_dataset(&args.manifest)?;
            save_config(&cfg, &args.out)?;
            let report = run_ablation(&dataset, &cfg, &args.out, args.jobs)?;
            print!("{}", ablation_table(&report));
        }
        Command::Synth(args) => {
            let mut spec = match &args.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    SynthSpec::from_toml(&text)?
                }
                None => SynthSpec::default(),
            };
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            if let Some(n) = args.n {
                spec.n = n;
            }
            if let Some(s) = args.strength {
                spec.strength = s;
            }
            let dataset = generate(&spec)?;
            let manifest = write_dataset(&dataset, &args.out)?;
            println!("wrote {} patients to {}", dataset.len(), manifest.display());
        }
        Command::Report(args) => {
            let text = std::fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
            let (fingerprint, table) = report_fingerprint(&text)?;
            if let Some(manifest) = &args.manifest {
                let cfg = match &args.config {
                    Some(p) => RunConfig::read(p)?,
                    None => RunConfig::read(&args.input.with_file_name("config.toml"))?,
                };
                let dataset = load_dataset(manifest)?;
                let expected = cfg.fingerprint(&dataset.source_digest);
                if expected != fingerprint {
                    return Err(Error::contract(format!(
                        "report fingerprint {fingerprint} does not match {expected} from the config and manifest"
                    )));
                }
            }
            match &args.out {
                Some(p) => std::fs::write(p, &table).map_err(|e| Error::io(p, e))?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 3 } else { 2 })
        }
    }
}
