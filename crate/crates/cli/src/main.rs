use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdelab::criteria::CriterionId;
use sdelab_cli::builtins::{self, BUILTINS};
use sdelab_cli::run::{exit_code, Stage};
use sdelab_cli::{emit, run_scenario, Format, Prepared, Report, RunOptions, Scenario, StageSet};

#[derive(Parser)]
#[command(name = "sdelab", version, about = "Check non-explosion, invariance, recurrence and ergodicity criteria for diffusions, and simulate them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a scenario without running anything.
    Validate(Input),
    /// Density stage: invariance residuals and the finite-volume solve.
    Density(Common),
    /// Criterion checks (runs the density stage first when a solved density is referenced).
    Check(Common),
    /// Path ensemble: moments, exit times and the transition law.
    Simulate(Common),
    /// Long-run time average along one path.
    Ergodic(Common),
    /// Occupation functionals and their refinement check.
    Krylov(Common),
    /// Every stage in order, then the comparisons.
    Run(Common),
    /// List built-in scenarios and the criterion catalog.
    Catalog {
        /// Print the configuration of one built-in scenario.
        #[arg(long, value_name = "NAME")]
        show: Option<String>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Scenario file (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in scenario name (see `sdelab catalog`).
    #[arg(long, value_name = "NAME")]
    builtin: Option<String>,
}

#[derive(Args)]
struct Input {
    #[command(flatten)]
    source: Source,
    /// Override the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Common {
    #[command(flatten)]
    input: Input,
    /// Output directory; defaults to `sdelab-out/<scenario name>`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, value_enum, default_value_t = Format::All)]
    format: Format,
}

fn load(input: &Input) -> Result<Prepared, String> {
    let mut scenario = match (&input.source.config, &input.source.builtin) {
        (Some(path), _) => Scenario::load(path),
        (None, Some(name)) => builtins::load(name),
        (None, None) => unreachable!("clap requires one source"),
    }
    .map_err(|e| e.to_string())?;
    if let Some(seed) = input.seed {
        scenario.seed = seed;
    }
    Prepared::new(scenario).map_err(|e| e.to_string())
}

fn stage_line<T>(name: &str, stage: &Stage<T>) {
    match stage {
        Stage::Skipped => {}
        Stage::Ok { .. } => println!("{name:<12} ok"),
        Stage::Error { message } => println!("{name:<12} error: {message}"),
    }
}

fn print_summary(report: &Report) {
    let s = &report.stages;
    println!("scenario {} (seed {})", report.scenario.name, report.seeds.master);
    stage_line("density", &s.density);
    stage_line("criteria", &s.criteria);
    stage_line("simulation", &s.simulation);
    stage_line("ergodic", &s.ergodic);
    stage_line("krylov", &s.krylov);
    stage_line("comparisons", &s.comparisons);
    if let Some(c) = s.criteria.result() {
        for v in c.verdicts.iter().chain(&c.volume_recurrence) {
            let verdict = serde_json::to_value(v.verdict).expect("verdict serializes");
            let margin = v.min_margin.map(|m| format!(" (min margin {m:.6e})")).unwrap_or_default();
            println!("  {:<26} {}{margin}", v.id, verdict.as_str().unwrap_or_default());
        }
        for search in &c.searches {
            match search.value {
                Some(v) => println!("  smallest {:?} for {}: {v}", search.constant, search.id),
                None => println!("  {} fails at {:?} = {}", search.id, search.constant, search.hi),
            }
        }
    }
    if let Some(cmp) = s.comparisons.result() {
        for c in cmp {
            let mark = if c.consistent { "consistent" } else { "INCONSISTENT" };
            println!("  {:<12} {}: {} vs {}", mark, c.name, c.observed, c.reference);
        }
    }
    for c in &report.conclusions {
        println!("conclusion: {c}");
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    println!("exit code {}", report.exit_code);
}

fn execute(common: &Common, stages: StageSet) -> i32 {
    let prepared = match load(&common.input) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("config error: {e}");
            return exit_code::CONFIG_ERROR;
        }
    };
    let opts = RunOptions {
        threads: common.threads,
        stages,
    };
    let (report, artifacts) = match run_scenario(&prepared, &opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("cannot start the thread pool: {e}");
            return exit_code::STAGE_ERROR;
        }
    };
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("sdelab-out").join(&report.scenario.name));
    print_summary(&report);
    match emit(&report, &artifacts, &dir, common.format) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            report.exit_code
        }
        Err(e) => {
            eprintln!("{e}");
            exit_code::STAGE_ERROR
        }
    }
}

fn catalog(show: Option<&str>) -> i32 {
    if let Some(name) = show {
        return match builtins::find(name) {
            Some(b) => {
                print!("{}", b.source);
                exit_code::GREEN
            }
            None => {
                eprintln!("config error: {}", sdelab_cli::ConfigError::UnknownBuiltin(name.into()));
                exit_code::CONFIG_ERROR
            }
        };
    }
    println!("built-in scenarios:");
    for b in BUILTINS {
        let description = Scenario::from_json(b.source)
            .map(|s| s.description)
            .unwrap_or_else(|e| format!("(invalid: {e})"));
        println!("  {:<22} {description}", b.name);
    }
    println!("\ncriteria:");
    for id in CriterionId::ALL {
        let e = id.entry();
        println!("  {:<26} {} => {}", e.id, e.template, e.conclusion);
    }
    exit_code::GREEN
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let only = |f: fn(&mut StageSet)| {
        let mut s = StageSet::none();
        f(&mut s);
        s.comparisons = true;
        s
    };
    let code = match &cli.command {
        Command::Validate(input) => match load(input) {
            Ok(p) => {
                println!("{}: valid", p.scenario.name);
                exit_code::GREEN
            }
            Err(e) => {
                eprintln!("config error: {e}");
                exit_code::CONFIG_ERROR
            }
        },
        Command::Density(c) => execute(c, only(|s| s.density = true)),
        Command::Check(c) => execute(c, only(|s| s.criteria = true)),
        Command::Simulate(c) => execute(c, only(|s| s.simulation = true)),
        Command::Ergodic(c) => execute(c, only(|s| s.ergodic = true)),
        Command::Krylov(c) => execute(c, only(|s| s.krylov = true)),
        Command::Run(c) => execute(c, StageSet::all()),
        Command::Catalog { show } => catalog(show.as_deref()),
    };
    ExitCode::from(code as u8)
}
