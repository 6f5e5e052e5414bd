use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pcll::checkpoint::Checkpoint;
use pcll::data::{write_task, ManifestEntry, StreamManifest, SyntheticConfig};
use pcll::experiment::{
    evaluate_checkpoint, generate_from_checkpoint, run_experiment, write_dist_csv, write_eval_csv, write_pseudo_csv,
    ExperimentConfig,
};
use pcll::replay::Strategy;

/// Prompt-conditioned generative replay for lifelong NLU learning.
#[derive(Parser)]
#[command(name = "pcll", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over a task stream for every (order, seed) pair.
    Run(RunArgs),
    /// Sample pseudo inputs for one task from a checkpoint.
    Generate(GenerateArgs),
    /// Score a checkpoint on the test splits of a manifest.
    Eval(EvalArgs),
    /// Write the synthetic task stream as JSONL files plus a manifest.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output root.
    #[arg(long, env = "PCLL_OUTPUT_DIR")]
    out: Option<PathBuf>,
    /// Replace existing run directories.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Task orders such as `0,1,2;2,1,0`.
    #[arg(long)]
    orders: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
    #[arg(long)]
    er_fraction: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta_cycles: Option<usize>,
    #[arg(long)]
    z_dim: Option<usize>,
    #[arg(long)]
    no_latent: bool,
    #[arg(long)]
    no_task_id: bool,
    #[arg(long)]
    no_kd: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV dump path; Dist-1..4 go to `<out>.dist.csv`.
    #[arg(long, default_value = "pseudo.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    tasks: usize,
    #[arg(long, default_value_t = 300)]
    per_task: usize,
}

fn parse_orders(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|o| {
            o.split(',')
                .map(|i| i.trim().parse::<usize>().with_context(|| format!("orders: bad index `{i}`")))
                .collect()
        })
        .collect()
}

fn build_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = a.strategy {
        cfg.replay.strategy = s;
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(o) = &a.orders {
        cfg.orders = parse_orders(o)?;
    }
    let r = &mut cfg.replay;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(r.gamma, a.gamma);
    set!(r.epochs, a.epochs);
    set!(r.batch_size, a.batch_size);
    set!(r.top_k, a.top_k);
    set!(r.max_decode_len, a.max_decode_len);
    set!(r.er_fraction, a.er_fraction);
    r.no_latent |= a.no_latent;
    r.no_task_id |= a.no_task_id;
    r.no_kd |= a.no_kd;
    set!(cfg.adam.lr, a.lr);
    set!(cfg.loss.lambda, a.lambda);
    set!(cfg.loss.alpha, a.alpha);
    set!(cfg.loss.beta_cycles_per_epoch, a.beta_cycles);
    set!(cfg.model.z_dim, a.z_dim);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let cfg = build_config(a)?;
    let runs = run_experiment::<pcll::Float>(&cfg, a.force)?;
    for r in &runs {
        println!("order {} seed {}: score {:.2} lca {:.2}", r.order, r.seed, r.score, r.lca);
    }
    let n = runs.len() as f64;
    println!(
        "mean: score {:.2} lca {:.2} ({} runs, aggregate in {})",
        runs.iter().map(|r| r.score).sum::<f64>() / n,
        runs.iter().map(|r| r.lca).sum::<f64>() / n,
        runs.len(),
        cfg.output_dir.join("aggregate.csv").display()
    );
    Ok(())
}

fn dist_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".dist.csv");
    PathBuf::from(s)
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let report = generate_from_checkpoint::<pcll::Float>(&ck, &a.task, a.count, a.seed)?;
    write_pseudo_csv(&a.out, &report.records)?;
    write_dist_csv(&dist_path(&a.out), &report.dist)?;
    let accepted = report.records.iter().filter(|r| r.accepted).count();
    println!("{accepted}/{} accepted, dump in {}", report.records.len(), a.out.display());
    for (n, d) in report.dist.iter().enumerate() {
        match d {
            Some(v) => println!("dist-{}: {v:.4}", n + 1),
            None => println!("dist-{}: n/a", n + 1),
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let rows = evaluate_checkpoint::<pcll::Float>(&ck, &a.manifest)?;
    for r in &rows {
        println!("{}: {:.2} ({} test samples)", r.task, r.score, r.n_test);
    }
    write_eval_csv(&a.out, &rows)?;
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    if a.tasks < 2 {
        bail!("--tasks must be at least 2");
    }
    let tasks = SyntheticConfig {
        seed: a.seed,
        n_tasks: a.tasks,
        n_per_task: a.per_task,
        ..SyntheticConfig::default()
    }
    .generate();
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut entries = Vec::new();
    for t in &tasks {
        let file = PathBuf::from(format!("{}.jsonl", t.name));
        write_task(&a.out.join(&file), t)?;
        entries.push(ManifestEntry {
            name: t.name.clone(),
            path: file,
            kind: t.kind,
        });
    }
    let manifest = a.out.join("manifest.toml");
    StreamManifest::new(entries, &a.out).save(&manifest)?;
    println!("wrote {} tasks and {}", tasks.len(), manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
