use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use rra::cells::CellKind;
use rra::gradcheck::{check_gradients, CheckConfig, DEFAULT_TOLERANCE};
use rra::harness::{
    evaluate, export_attention, load_task, resume_training, run_training, Checkpoint, Task, TrainConfig,
};
use rra::initializers::Rng;
use rra::tasks::{adding_csv, adding_dataset, gen_adding, gen_longrange_text, token_dataset};
use rra::{Error, Result};

#[derive(Parser)]
#[command(name = "rra", version, about = "Train and check recurrent residual attention models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, timing and checkpoints.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its task's test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "rra")]
        cell: CellKind,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        hidden: usize,
        #[arg(long, default_value_t = 3)]
        input: usize,
        #[arg(long, default_value_t = 12)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// First seed; `--seeds` consecutive seeds are checked.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Also write per-block results as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long, default_value = "adding")]
        task: Task,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        seq_len: usize,
        #[arg(long, default_value_t = 60)]
        gap: usize,
        #[arg(long, default_value_t = 50)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Binary container path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the adding examples as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the normalized attention weights logged in a metrics file.
    ExportAttention {
        #[arg(long)]
        metrics: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    /// Layers the config file and then the flags over `base`.
    fn resolve(&self, mut config: TrainConfig) -> Result<TrainConfig> {
        if let Some(path) = &self.config {
            config.apply_str(&fs::read_to_string(path)?)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{kv}'")))?;
            config.set(k, v)?;
        }
        let flags: [(&str, Option<String>); 7] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("task", self.task.clone()),
            ("cell", self.cell.clone()),
            ("k", self.k.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("iterations", self.iters.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                config.set(k, &v)?;
            }
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, resume } => {
            let summary = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    let config = run.resolve(TrainConfig::from_str_kv(&ck.config)?)?;
                    resume_training(&config, ck)?
                }
                None => run_training(&run.resolve(TrainConfig::default())?)?,
            };
            println!(
                "final eval loss {} metric {} over {} examples",
                summary.final_eval.loss, summary.final_eval.metric, summary.final_eval.count
            );
            println!("metrics: {}", summary.metrics_path.display());
            println!("checkpoint: {}", summary.checkpoint_path.display());
        }
        Command::Eval { checkpoint, run } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let config = run.resolve(TrainConfig::from_str_kv(&ck.config)?)?;
            let data = load_task(&config)?;
            let m = evaluate(&ck, &data.test)?;
            println!(
                "iteration,eval_loss,eval_metric\n{},{},{}",
                ck.iteration, m.loss, m.metric
            );
        }
        Command::Gradcheck {
            cell,
            k,
            hidden,
            input,
            steps,
            batch,
            seed,
            seeds,
            tolerance,
            csv,
        } => {
            let config = CheckConfig {
                cell,
                window: k,
                hidden,
                input_size: input,
                steps,
                batch,
                ..CheckConfig::default()
            };
            let mut all = String::new();
            let mut worst = 0.0f64;
            for s in seed..seed + seeds {
                let report = check_gradients(&config, s)?;
                print!("{report}");
                worst = worst.max(report.max_rel_error());
                let body = report.to_csv();
                if all.is_empty() {
                    all.push_str(&body);
                } else {
                    all.push_str(body.split_once('\n').map_or("", |(_, rest)| rest));
                }
            }
            if let Some(path) = csv {
                fs::write(path, all)?;
            }
            println!("max relative error {worst:e} (tolerance {tolerance:e})");
            if !(worst < tolerance) {
                return Err(Error::NonFinite(format!(
                    "gradient check failed: {worst:e} >= {tolerance:e}"
                )));
            }
        }
        Command::GenData {
            task,
            n,
            seq_len,
            gap,
            vocab,
            seed,
            out,
            csv,
        } => {
            let mut rng = Rng::new(seed);
            let ds = match task {
                Task::Adding => {
                    let ex = gen_adding(seq_len, n, &mut rng)?;
                    if let Some(path) = csv {
                        fs::write(path, adding_csv(&ex))?;
                    }
                    adding_dataset(&ex)
                }
                Task::LongRange => token_dataset(&gen_longrange_text(n, seq_len, gap, vocab, &mut rng)?),
                other => {
                    return Err(Error::Config(format!(
                        "gen-data covers the synthetic tasks only, not '{other}'"
                    )))
                }
            };
            ds.write_binary(fs::File::create(&out)?)?;
            println!("wrote {} examples to {}", ds.len(), out.display());
        }
        Command::ExportAttention { metrics, out } => {
            let csv = export_attention(&metrics)?;
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
