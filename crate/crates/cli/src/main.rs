use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use permrank_core::perm_engine::{cardinality, CardinalityStrategy};
use permrank_core::{
    run_analyze, run_simulate, AdjustMethod, AnalysisConfig, Combiner, Error, SimulationScenario,
    SimulationSummary, Strategy,
};

#[derive(Debug, Parser)]
#[command(name = "permrank", version, about = "Rank multivariate populations with permutation tests")]
struct Cli {
    /// Worker threads (all cores when omitted). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rank the populations of a data table.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo scenario and summarize error rates and power.
    Simulate(SimulateArgs),
    /// Print the size of a permutation space.
    Cardinality(CardinalityArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Output {
    Text,
    Structured,
}

/// Settings shared by `analyze` and `simulate`; each overrides the config.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of conditional Monte Carlo replications.
    #[arg(long = "B", id = "B")]
    b: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// pip, npip or exhaustive.
    #[arg(long, value_parser = Strategy::from_str)]
    strategy: Option<Strategy>,
    /// fisher, liptak, tippett, direct or iterated.
    #[arg(long, value_parser = Combiner::from_str)]
    combiner: Option<Combiner>,
    /// none, holm or shaffer.
    #[arg(long, value_parser = AdjustMethod::from_str)]
    adjust: Option<AdjustMethod>,
    #[arg(long, value_enum, default_value = "text")]
    output: Output,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// TOML file describing the table and the analysis.
    #[arg(long)]
    config: PathBuf,
    /// Response table; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Replicate each row by the count in this column (default "frequency").
    #[arg(
        long,
        value_name = "COLUMN",
        num_args = 0..=1,
        default_missing_value = "frequency"
    )]
    expand_frequencies: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// TOML scenario file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    replications: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct CardinalityArgs {
    /// pip, npip, pcsp or pusp.
    #[arg(long, value_parser = CardinalityStrategy::from_str)]
    strategy: CardinalityStrategy,
    /// Group sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// Pair of group indices (0-based) for PIP with more than two groups.
    #[arg(long, value_name = "J,H", value_delimiter = ',')]
    pair: Option<Vec<usize>>,
}

fn analyze(args: AnalyzeArgs) -> Result<String, Error> {
    let mut cfg = AnalysisConfig::load(&args.config)?;
    if let Some(data) = args.data {
        cfg.data = Some(data);
    }
    if let Some(col) = args.expand_frequencies {
        cfg.dataset.frequency = Some(col);
    }
    let o = args.overrides;
    let a = &mut cfg.analysis;
    if let Some(v) = o.alpha {
        a.alpha = v;
    }
    if let Some(v) = o.b {
        a.b = v;
    }
    if let Some(v) = o.seed {
        a.seed = v;
    }
    if let Some(v) = o.strategy {
        a.strategy = v;
    }
    if let Some(v) = o.combiner {
        a.combiner = v;
    }
    if let Some(v) = o.adjust {
        a.adjust = v;
    }
    let report = run_analyze(&cfg)?;
    Ok(match o.output {
        Output::Text => report.render_text(),
        Output::Structured => report.to_json() + "\n",
    })
}

fn simulate(args: SimulateArgs) -> Result<String, Error> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut scn: SimulationScenario = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let o = args.overrides;
    if let Some(v) = args.replications {
        scn.replications = v;
    }
    if let Some(v) = o.alpha {
        scn.alpha = v;
    }
    if let Some(v) = o.b {
        scn.b = v;
    }
    if let Some(v) = o.seed {
        scn.seed = v;
    }
    if let Some(v) = o.strategy {
        scn.strategy = v;
    }
    if let Some(v) = o.combiner {
        scn.combiner = v;
    }
    if let Some(v) = o.adjust {
        scn.adjust = v;
    }
    let summary = run_simulate(&scn)?;
    Ok(match o.output {
        Output::Text => render_summary(&summary),
        Output::Structured => {
            serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"
        }
    })
}

fn render_summary(s: &SimulationSummary) -> String {
    let scn = &s.scenario;
    let r = s.replications.len();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{r} replications | sizes {:?} | p {} | seed {} | B {} | strategy {} | combiner {} | adjust {} | alpha {}",
        scn.group_sizes, scn.variables, scn.seed, scn.b, scn.strategy, scn.combiner, scn.adjust, scn.alpha
    );
    let _ = writeln!(out, "expected ranks {:?}", s.expected_ranks);
    let rows = [
        ("fwer", s.fwer),
        ("rejection rate", s.rejection_rate),
        ("power", s.power),
        ("all rank 1", s.all_rank_one_rate),
        ("correct ranking", s.correct_ranking_rate),
        ("global test rejections", s.global_rejection_rate),
    ];
    for (name, rate) in rows {
        let _ = writeln!(out, "{name:<24}{rate:.4}  (se {:.4})", s.standard_error(rate));
    }
    let acc: Vec<String> = s.position_accuracy.iter().map(|a| format!("{a:.4}")).collect();
    let _ = writeln!(out, "{:<24}{}", "position accuracy", acc.join(" "));
    out
}

fn count(args: CardinalityArgs) -> Result<String, Error> {
    let pair = match args.pair.as_deref() {
        None => None,
        Some(&[j, h]) => Some((j, h)),
        Some(_) => return Err(Error::Config("--pair takes exactly two indices".into())),
    };
    Ok(format!("{}\n", cardinality(args.strategy, &args.sizes, pair)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
        Command::Cardinality(a) => count(a),
    };
    match result {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
