use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cubature_recomb::harness::{
    emit, parse_list, run_recombined, run_whole_tree, study_cones, study_convergence, study_recombination_error,
    HarnessConfig, RecombinationPlan, RunMode, StudyResult, StudyRow,
};
use cubature_recomb::patching::PatchKind;
use cubature_recomb::schemes::SchemeKind;
use cubature_recomb::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cubature-recomb", version, about = "Tree cubature with high-order recombination")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Settings file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// nv, cub3 or em.
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// even or kusuoka.
    #[arg(long, global = true)]
    partition: Option<String>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// wll, ll, rand or cc.
    #[arg(long, global = true)]
    patch: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    patches: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "ufg-ell", global = true)]
    ufg_ell: Option<u32>,
    #[arg(long = "moment-degree", global = true)]
    moment_degree: Option<u32>,
    /// Step counts, comma separated.
    #[arg(long, global = true)]
    n: Option<String>,
    /// Output directory for results.csv and plots.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    plot: bool,
    /// Allow whole trees beyond the default cap.
    #[arg(long = "allow-huge", global = true)]
    allow_huge: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Price the Asian call with recombination for each n (and the whole tree where feasible).
    Price,
    /// Error and support against n for EM and NV, with and without recombination.
    Converge,
    /// Recombination error of each patch rule at matched support budgets.
    RecombError,
    /// Cone payoff study with slope statistics.
    Cones,
}

fn build_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::from_file(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = &cli.scheme {
        cfg.scheme = s.parse()?;
    }
    if let Some(p) = &cli.partition {
        cfg.set_partition(p, cli.gamma)?;
    } else if let Some(g) = cli.gamma {
        cfg.set_partition("kusuoka", Some(g))?;
    }
    if let Some(p) = &cli.patch {
        cfg.rule.kind = p.parse::<PatchKind>()?;
    }
    if let Some(l) = cli.lambda {
        cfg.rule.lambda = l;
    }
    if let Some(k) = cli.patches {
        cfg.rule.target_patches = k;
    }
    if let Some(s) = cli.seed {
        cfg.rule.seed = s;
    }
    if let Some(e) = cli.ufg_ell {
        cfg.rule.ell = e;
    }
    if let Some(m) = cli.moment_degree {
        cfg.moment_degree = Some(m);
    }
    if let Some(n) = &cli.n {
        let list: Vec<usize> = parse_list(n)?;
        if list.is_empty() {
            return Err(Error::Config("--n needs at least one value".into()));
        }
        cfg.recomb_n = list[0];
        cfg.cone_n = list.clone();
        cfg.n_list = list;
    }
    cfg.allow_huge |= cli.allow_huge;
    cfg.validate()?;
    Ok(cfg)
}

fn price(cfg: &HarnessConfig) -> Result<StudyResult> {
    let scheme = cfg.scheme;
    let stepper = cfg.stepper(scheme)?;
    let basis = cfg.basis(scheme);
    let payoff = cfg.asian();
    let mut rows = Vec::new();
    for &n in &cfg.n_list {
        let partition = cfg.partition(n)?;
        if cfg.tree_feasible(&stepper, n) {
            let out = run_whole_tree(&stepper, &partition, &[payoff])?;
            rows.push(row(cfg, n, scheme, RunMode::Tree, None, &out));
        }
        let plan = RecombinationPlan::new(cfg.rule);
        let out = run_recombined(&stepper, &partition, Some(&plan), &basis, &[payoff])?;
        rows.push(row(cfg, n, scheme, RunMode::Recombined, Some(cfg.rule.kind), &out));
    }
    Ok(StudyResult {
        rows,
        slopes: Vec::new(),
    })
}

fn row(
    cfg: &HarnessConfig,
    n: usize,
    scheme: SchemeKind,
    mode: RunMode,
    rule: Option<PatchKind>,
    out: &cubature_recomb::harness::RunOutcome,
) -> StudyRow {
    let value = out.values[0];
    StudyRow {
        study: "price",
        n,
        scheme,
        mode,
        rule,
        setting: rule.map(|_| cfg.rule.lambda),
        payoff: cfg.asian().label(),
        value,
        reference: cfg.reference,
        abs_error: cfg.reference.map(|r| (value - r).abs()),
        support_card_t: out.support_card_t,
        max_support_card: out.max_support_card,
        total_patches: out.total_patches,
        failures: out.failures,
        wall_ms: out.wall.as_secs_f64() * 1e3,
    }
}

fn print_rows(result: &StudyResult) {
    println!(
        "{:<13} {:>3} {:<5} {:<10} {:<5} {:>10} {:<28} {:>20} {:>11} {:>12}",
        "study", "n", "sch", "mode", "rule", "lambda", "payoff", "value", "abs_error", "support_T"
    );
    for r in &result.rows {
        println!(
            "{:<13} {:>3} {:<5} {:<10} {:<5} {:>10} {:<28} {:>20.14} {:>11} {:>12}",
            r.study,
            r.n,
            r.scheme.name(),
            r.mode.to_string(),
            r.rule.map(|k| k.name()).unwrap_or("-"),
            r.setting.map(|s| format!("{s:.4e}")).unwrap_or_else(|| "-".into()),
            r.payoff,
            r.value,
            r.abs_error.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "-".into()),
            r.support_card_t
        );
    }
    for s in &result.slopes {
        println!(
            "slope n={} {:<5} {:<7} {:<10} mean={:.4e} ci=[{:.4e}, {:.4e}] count={}",
            s.n,
            s.rule.name(),
            s.grouping,
            s.key,
            s.mean,
            s.ci_low,
            s.ci_high,
            s.count
        );
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let result = match cli.command {
        Command::Price => price(&cfg)?,
        Command::Converge => study_convergence(&cfg)?,
        Command::RecombError => study_recombination_error(&cfg)?,
        Command::Cones => study_cones(&cfg)?,
    };
    print_rows(&result);
    if let Some(dir) = &cli.out {
        emit(&result, dir, cli.plot)?;
    } else if cli.plot {
        emit(&result, &PathBuf::from("."), true)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
