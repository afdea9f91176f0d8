use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use plasticnet::autodiff::Fault;
use plasticnet::checkpoint;
use plasticnet::config::{TrainConfig, KEYS};
use plasticnet::gradcheck::{run_suite, TOLERANCE};
use plasticnet::ledger::write_scores_csv;
use plasticnet::report::{emit_classwise_csv, emit_report, read_report, RunReport};
use plasticnet::suite::{ExperimentSuite, SuiteKind, ALPHA_GRID};
use plasticnet::trainer::{prepare_data, run_full};

#[derive(Parser)]
#[command(name = "plasticnet", version, about = "Train networks that grow and prune neurons by class-reweighted gradient scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single run and write its report, class table and checkpoint.
    Train(TrainArgs),
    /// Run a named experiment suite over several seeds.
    Suite(SuiteArgs),
    /// Check every differentiable op against finite differences.
    Gradcheck(GradcheckArgs),
    /// Extract learning curves and class tables from reports as CSV.
    Plot(PlotArgs),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Fraction of each mutable layer modified per event.
    #[arg(long)]
    alpha: Option<f64>,
    /// Neuron scoring criterion.
    #[arg(long)]
    criterion: Option<String>,
    /// Comma-separated switches to enable (nam, gr, ws, gda); the rest are disabled. `none` disables all.
    #[arg(long)]
    flags: Option<String>,
    /// `synth` or `idx:<dir>`.
    #[arg(long)]
    dataset: Option<String>,
    /// Imbalance factor.
    #[arg(long)]
    p: Option<f64>,
    /// `mlp` or `cnn`.
    #[arg(long)]
    arch: Option<String>,
}

impl Overrides {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(a) = self.alpha {
            pairs.push(("alpha".into(), a.to_string()));
        }
        if let Some(c) = &self.criterion {
            pairs.push(("criterion".into(), c.clone()));
        }
        if let Some(d) = &self.dataset {
            pairs.push(("dataset".into(), d.clone()));
        }
        if let Some(p) = self.p {
            pairs.push(("p".into(), p.to_string()));
        }
        if let Some(a) = &self.arch {
            pairs.push(("arch".into(), a.clone()));
        }
        if let Some(f) = &self.flags {
            let on: Vec<&str> = f.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none").collect();
            for name in &on {
                if !["nam", "gr", "ws", "gda"].contains(name) {
                    bail!("unknown flag `{name}` (expected nam, gr, ws, gda or none)");
                }
            }
            for name in ["nam", "gr", "ws", "gda"] {
                pairs.push((name.into(), on.contains(&name).to_string()));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; the run goes to `<out>/run-<hash prefix>`.
    #[arg(long, env = "PLASTICNET_OUT", default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// baseline_vs_ours, alpha_sweep, criteria_compare or ablation.
    #[arg(long)]
    suite: SuiteKind,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    seeds: Vec<u64>,
    /// Comma-separated alpha grid for alpha_sweep.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output root; the suite goes to `<out>/<suite>`, which must not exist.
    #[arg(long, env = "PLASTICNET_OUT", default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random probe inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one backward rule to confirm failures are detected.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Report files or directories searched recursively for `report.json`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Directory receiving `curves.csv` and `classwise.csv`.
    #[arg(long, env = "PLASTICNET_OUT", default_value = "plots")]
    out: PathBuf,
}

fn keys_help() -> String {
    let defaults = TrainConfig::default();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (--set KEY=VALUE or config file), with defaults:\n");
    for (key, help) in KEYS {
        let value = defaults.get(key).unwrap_or_default();
        s.push_str(&format!("  {key:<width$}  {help} [default: {value}]\n"));
    }
    s
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.overrides.build()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    let outcome = run_full(&cfg, &data)?;
    let hash = cfg.hash();
    let dir = args.out.join(format!("run-{}", &hash[..12]));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    emit_report(&outcome.report, &dir.join("report.json"))?;
    emit_classwise_csv(&outcome.report, &dir.join("classwise.csv"))?;
    checkpoint::save(&outcome.network, &dir.join("network.ckpt"))?;
    if cfg.dump_scores {
        write_scores_csv(&dir.join("scores.csv"), &outcome.scores)?;
    }
    let r = &outcome.report;
    println!(
        "overall {:.4}  mean-class {:.4}  many {}  medium {}  few {}  events {}",
        r.final_overall,
        r.final_mean_class,
        fmt_opt(r.groups.many),
        fmt_opt(r.groups.medium),
        fmt_opt(r.groups.few),
        r.events.len()
    );
    println!("{}", dir.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn suite(args: SuiteArgs) -> Result<()> {
    let cfg = args.overrides.build()?;
    let alphas = args.alphas.unwrap_or_else(|| ALPHA_GRID.to_vec());
    let suite = ExperimentSuite::new(args.suite, cfg, args.seeds, args.out, &alphas)?;
    let summary = suite.run(args.jobs)?;
    println!("{:<24} {:>5} {:>5} {:>16} {:>16} {:>16}", "cell", "runs", "fail", "overall", "mean-class", "few");
    let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{m:.4}±{s:.4}"),
        _ => "n/a".into(),
    };
    for row in &summary.aggregate {
        println!(
            "{:<24} {:>5} {:>5} {:>16} {:>16} {:>16}",
            row.cell,
            row.runs,
            row.failures,
            pm(row.overall_mean, row.overall_std),
            pm(row.mean_class_mean, row.mean_class_std),
            pm(row.few_mean, row.few_std)
        );
    }
    for cell in &summary.results {
        for (seed, outcome) in &cell.runs {
            if let Err(msg) = outcome {
                eprintln!("{} seed {seed}: {msg}", cell.cell.name);
            }
        }
    }
    println!("{}", summary.dir.display());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let fault = args.inject_fault.then_some(Fault::ConvWeightSignFlip);
    let checks = run_suite(args.seed, fault)?;
    let mut ok = true;
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        ok &= c.passed();
        println!("{:<28} {:.3e}  {status}", c.op, c.max_rel_error);
    }
    println!("tolerance {TOLERANCE:e}: {}", if ok { "all passed" } else { "failures" });
    Ok(ok)
}

fn find_reports(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let mut paths = Vec::new();
    for input in &args.inputs {
        find_reports(input, &mut paths)?;
    }
    if paths.is_empty() {
        bail!("no report.json found");
    }
    std::fs::create_dir_all(&args.out)?;
    let reports: Vec<(String, RunReport)> = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), read_report(p)?)))
        .collect::<Result<_>>()?;
    let curves = args.out.join("curves.csv");
    let mut w = std::fs::File::create(&curves).map(std::io::BufWriter::new)?;
    use std::io::Write;
    writeln!(w, "run,epoch,train_loss,train_accuracy,test_loss,test_accuracy,mean_class_accuracy")?;
    for (name, r) in &reports {
        for m in &r.epochs {
            writeln!(
                w,
                "{name},{},{},{},{},{},{}",
                m.epoch, m.train_loss, m.train_accuracy, m.test_loss, m.test_accuracy, m.mean_class_accuracy
            )?;
        }
    }
    w.flush()?;
    let classwise = args.out.join("classwise.csv");
    let mut w = std::fs::File::create(&classwise).map(std::io::BufWriter::new)?;
    writeln!(w, "run,class_index,train_count,accuracy")?;
    for (name, r) in &reports {
        for (c, (n, a)) in r.train_counts.iter().zip(&r.final_per_class).enumerate() {
            writeln!(w, "{name},{c},{n},{}", a.map(|x| x.to_string()).unwrap_or_default())?;
        }
    }
    w.flush()?;
    println!("{}\n{}", curves.display(), classwise.display());
    Ok(())
}

fn main() -> ExitCode {
    let keys = keys_help();
    let matches = Cli::command()
        .after_help(keys.clone())
        .mut_subcommand("train", |c| c.after_help(keys.clone()))
        .mut_subcommand("suite", |c| c.after_help(keys.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Suite(a) => suite(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Plot(a) => plot(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
