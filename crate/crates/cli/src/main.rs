use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use t2i_audit_core::pipeline::{compare, CompareInput, Pipeline, RunConfig, StageSummary};
use t2i_audit_core::report::ScopeFilter;
use t2i_audit_core::{Error, ErrorKind};

const DEFAULT_CONFIG: &str = "t2i-audit.toml";

/// Open-set bias auditing for text-to-image generators.
#[derive(Debug, Parser)]
#[command(name = "t2i-audit", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Response cache directory (default: <output_dir>/cache).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Worker threads and in-flight requests per backend.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Caption-sampling seed, also forwarded to seeded backends.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the planned backend call count and exit without calling anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ask the LLM for candidate biases and build the knowledge base.
    Propose {
        /// Copy up to N parsed responses into the template as demonstrations.
        #[arg(long, value_name = "N")]
        promote_examples: Option<usize>,
    },
    /// Drop caption/bias pairs whose caption already gives the answer.
    Filter {
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        skip_stage1: bool,
    },
    /// Generate images and ask the VQA model every bias question.
    Assess {
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Assess the images of this manifest instead of generating.
        #[arg(long, value_name = "MANIFEST")]
        real_images: Option<PathBuf>,
    },
    /// Score and rank biases from assessment records.
    Quantify {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        /// Further record files to rank side by side.
        #[arg(long, num_args = 1.., value_name = "RECORDS")]
        compare: Vec<PathBuf>,
    },
    /// Re-render CSV and SVG files from report.json.
    Report {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
    },
    /// Agreement metrics: KL between reports, label accuracy, table diffs, human alignment.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scope {
    ContextFree,
    ContextAware,
    All,
}

impl From<Scope> for ScopeFilter {
    fn from(s: Scope) -> Self {
        match s {
            Scope::ContextFree => ScopeFilter::ContextFree,
            Scope::ContextAware => ScopeFilter::ContextAware,
            Scope::All => ScopeFilter::All,
        }
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).multiple(false)))]
struct CompareArgs {
    /// Two report.json files.
    #[arg(long, num_args = 2, value_names = ["A", "B"], group = "input")]
    reports: Option<Vec<PathBuf>>,
    /// CSV with item,measured,reference columns.
    #[arg(long, group = "input")]
    table: Option<PathBuf>,
    /// Predicted labels (JSONL {item_id, class}); needs --reference.
    #[arg(long, group = "input", requires = "reference")]
    labels: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Human judgments (CSV bias,user,choice,intensity); needs --report.
    #[arg(long, group = "input", requires = "report")]
    human: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Rounding of table diffs.
    #[arg(long, default_value_t = 2)]
    decimals: u32,
    /// Where metrics.json / metrics.csv go (default: the configured output directory, else ".").
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CompareArgs {
    fn input(&self) -> CompareInput {
        if let Some(r) = &self.reports {
            CompareInput::Reports(r[0].clone(), r[1].clone())
        } else if let Some(path) = &self.table {
            CompareInput::Table {
                path: path.clone(),
                decimals: self.decimals,
            }
        } else if let Some(predicted) = &self.labels {
            CompareInput::Labels {
                predicted: predicted.clone(),
                reference: self.reference.clone().expect("required by clap"),
            }
        } else {
            CompareInput::Human {
                judgments: self.human.clone().expect("group is required"),
                report: self.report.clone().expect("required by clap"),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG));
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found; pass --config",
            path.display()
        )));
    }
    let mut config = RunConfig::load(&path)?;
    if let Some(dir) = &cli.cache_dir {
        config.cache_dir = Some(dir.clone());
    }
    if let Some(n) = cli.parallelism {
        config.parallelism = n;
    }
    if let Some(seed) = cli.seed {
        config.sampling.seed = seed;
        for b in [
            &mut config.llm,
            &mut config.generator,
            &mut config.vqa,
            &mut config.captioner,
        ]
        .into_iter()
        .flatten()
        {
            b.seed = Some(seed);
        }
    }
    config.validate()?;
    Ok(config)
}

fn print_summary(s: &StageSummary, dry_run: bool) {
    if dry_run {
        println!(
            "{}: planned backend calls: {}",
            s.stage,
            s.planned_calls.unwrap_or(0)
        );
    }
    for note in &s.notes {
        println!("{}: {note}", s.stage);
    }
    if !dry_run {
        println!(
            "{}: {} network call(s), {} cache hit(s), {} diagnostic(s)",
            s.stage, s.network_calls, s.cache_hits, s.diagnostics
        );
        for p in &s.outputs {
            println!("{}: wrote {}", s.stage, p.display());
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::Compare(args) = &cli.command {
        let out = match (&args.out, &cli.config) {
            (Some(dir), _) => dir.clone(),
            (None, Some(_)) => load_config(cli)?.output_dir,
            (None, None) => PathBuf::from("."),
        };
        if cli.dry_run {
            println!("compare: planned backend calls: 0");
            return Ok(());
        }
        let (metrics, files) = compare(&args.input(), &out)?;
        println!("compare: {}", metrics.headline());
        for f in files {
            println!("compare: wrote {}", f.display());
        }
        return Ok(());
    }

    let config = load_config(cli)?;
    let pipeline = Pipeline::new(config, cli.dry_run);
    let summary = match &cli.command {
        Command::Propose { promote_examples } => pipeline.propose(*promote_examples)?,
        Command::Filter { kb, skip_stage1 } => pipeline.filter(kb.as_deref(), *skip_stage1)?,
        Command::Assess { kb, real_images } => {
            pipeline.assess(kb.as_deref(), real_images.as_deref())?
        }
        Command::Quantify {
            records,
            scope,
            compare,
        } => pipeline.quantify(records.as_deref(), (*scope).into(), compare)?,
        Command::Report { report, scope } => {
            pipeline.report(report.as_deref().map(Path::new), (*scope).into())?
        }
        Command::Compare(_) => unreachable!("handled above"),
    };
    print_summary(&summary, cli.dry_run);
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::User => 1,
        ErrorKind::Backend => 2,
        ErrorKind::Data => 3,
    }
}

fn main() -> ExitCode {
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
