use clap::{Args, Parser, Subcommand};
use cloud_transform::models::Task;
use ct_harness::config::TrainConfig;
use ct_harness::experiments::{
    ablation_table, run_ablation, run_depth_stability, run_gradcheck, run_verify_lemma, Scope,
};
use ct_harness::io::{load_into, read_checkpoint};
use ct_harness::train::{run_training, Trainer};
use ct_harness::{HarnessError, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ct-harness",
    version,
    about = "Cloud transform experiments on synthetic point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Restrict to op, block or model cases (repeatable).
        #[arg(long)]
        scope: Vec<Scope>,
        /// Only cases whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the footprint Jacobian, the balancing factor and the
    /// singular-value lemma on random samples.
    VerifyLemma {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Key-gradient RMS per layer of a chain of cloud transforms, with and
    /// without gradient balancing.
    DepthStability {
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, default_value_t = 16)]
        w: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train variants over several seeds and rank them.
    Ablate {
        /// Comma-separated: max, sum, mean, linear-keys, fixed-keys, one-head, no-balancing.
        #[arg(long, default_value = "max,sum,mean", value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on its run's validation or test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

#[derive(Args)]
struct Overrides {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set optim.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    iterations: Option<usize>,
}

fn build_config(task: Option<Task>, o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::desk(task.unwrap_or(Task::Segment)),
    };
    if task.is_some_and(|t| t != cfg.task) {
        return Err(HarnessError::Usage(format!(
            "--task conflicts with task {} in the config file",
            cfg.task
        )));
    }
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        if k.trim() == "task" {
            return Err(HarnessError::Usage("use --task to change the task".into()));
        }
        cfg.set(k.trim(), v.trim()).map_err(HarnessError::Usage)?;
    }
    if let Some(n) = o.iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_metrics(label: &str, m: &ct_harness::train::Metrics) {
    for (k, v) in m {
        println!("{label} {k} {v:.6}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck {
            scope,
            filter,
            seed,
        } => {
            let suite = run_gradcheck(&scope, filter.as_deref(), seed)?;
            print!("{}", suite.table());
            println!(
                "{}",
                if suite.passed() {
                    "all cases passed"
                } else {
                    "gradient check FAILED"
                }
            );
            Ok(suite.passed())
        }
        Command::VerifyLemma { samples, seed } => {
            let r = run_verify_lemma(samples, seed)?;
            let l = &r.lemma2;
            println!("singular-value lemma, {} samples", l.samples);
            println!(
                "  max singular-value deviation {:.3e}",
                l.max_singular_deviation
            );
            println!(
                "  max residual singular value  {:.3e}",
                l.max_residual_singular
            );
            println!("  min |DVD^T| / |V|            {:.6}", l.min_bound_ratio);
            println!("  violations                   {}", l.violations.len());
            for (w, e) in &r.jacobian {
                println!("jacobian w = {w:<3} max |FD - (w-1) D| {e:.3e}");
            }
            for (w, f) in &r.balancing {
                println!("balancing w = {w:<3} factor {f}");
            }
            println!(
                "{}",
                if r.passed() {
                    "lemma checks passed"
                } else {
                    "lemma checks FAILED"
                }
            );
            Ok(r.passed())
        }
        Command::DepthStability { depth, w, seed } => {
            let on = run_depth_stability(depth, w, true, seed)?;
            let off = run_depth_stability(depth, w, false, seed)?;
            print!("{}\n{}", on.table(), off.table());
            let stable = on.ratios().iter().all(|r| (0.2..=5.0).contains(r));
            let explodes = depth < 2 || off.cumulative() > 1e3;
            println!("balanced per-layer ratios within [0.2, 5]: {stable}");
            println!("unbalanced cumulative growth > 1e3: {explodes}");
            Ok(stable && explodes)
        }
        Command::Train {
            task,
            seed,
            out_dir,
            overrides,
        } => {
            let mut cfg = build_config(task, &overrides)?;
            cfg.seed = seed;
            cfg.out_dir = Some(out_dir);
            let r = run_training(&cfg)?;
            println!(
                "iterations {} (stopped early: {})",
                r.iterations, r.stopped_early
            );
            print_metrics("val", &r.val);
            print_metrics("test", &r.test);
            Ok(true)
        }
        Command::Ablate {
            variants,
            seeds,
            task,
            out_dir,
            overrides,
        } => {
            let mut cfg = build_config(task, &overrides)?;
            cfg.out_dir = out_dir;
            let names: Vec<&str> = variants.iter().map(String::as_str).collect();
            let rows = run_ablation(&names, &cfg, &seeds)?;
            print!("{}", ablation_table(&rows));
            Ok(true)
        }
        Command::Eval { checkpoint, split } => {
            let test = match split.as_str() {
                "test" => true,
                "val" => false,
                other => {
                    return Err(HarnessError::Usage(format!(
                        "split must be val or test, got {other:?}"
                    )))
                }
            };
            let (echo, tensors) = read_checkpoint(&checkpoint)?;
            let mut cfg = TrainConfig::parse(&echo)?;
            cfg.out_dir = None;
            let mut store = cloud_transform::ParamStore::new();
            let trainer = Trainer::new(&mut store, &cfg)?;
            load_into(&mut store, tensors, &checkpoint)?;
            let m = trainer.evaluate(&mut store, &cfg, test)?;
            print_metrics(&split, &m);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Usage(_) | HarnessError::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
