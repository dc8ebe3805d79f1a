use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::optim::Optimizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Adding,
    Mnist,
    MnistPermuted,
    Text,
    LongRange,
}

impl Task {
    pub fn is_classification(self) -> bool {
        !matches!(self, Task::Adding)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Adding => "adding",
            Task::Mnist => "mnist",
            Task::MnistPermuted => "mnist-permuted",
            Task::Text => "text",
            Task::LongRange => "longrange",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adding" => Ok(Task::Adding),
            "mnist" => Ok(Task::Mnist),
            "mnist-permuted" | "pmnist" => Ok(Task::MnistPermuted),
            "text" => Ok(Task::Text),
            "longrange" => Ok(Task::LongRange),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adadelta,
    RmsProp,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub cell: CellKind,
    pub bidirectional: bool,
    /// Sequence length `S` (adding) or `T` (long-range); a truncation
    /// length for text, where 0 keeps whole documents. Unused for MNIST.
    pub seq_len: usize,
    pub hidden: usize,
    /// Token embedding width `E`.
    pub embedding: usize,
    /// Attention window `K`.
    pub window: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub rho: f64,
    pub decay: f64,
    pub eps: f64,
    pub clip: f64,
    pub dropout: f64,
    pub seed: u64,
    pub iterations: usize,
    pub eval_interval: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Minimum signal distance from the end (long-range task).
    pub gap: usize,
    /// Vocabulary size `V` (long-range) or word cap (text).
    pub vocab: usize,
    /// 2×2 mean pooling of MNIST images to 14×14.
    pub downsample: bool,
    pub permutation_seed: u64,
    pub mnist_dir: PathBuf,
    pub text_train: PathBuf,
    pub text_test: PathBuf,
    pub out: PathBuf,
    /// Fill the `seconds` metrics column. Off by default so that metrics
    /// files are byte-identical across runs.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Adding,
            cell: CellKind::Rra,
            bidirectional: false,
            seq_len: 100,
            hidden: 64,
            embedding: 32,
            window: 10,
            batch: 50,
            optimizer: OptimizerKind::Adadelta,
            lr: 1e-4,
            rho: 0.95,
            decay: 0.9,
            eps: 1e-6,
            clip: 1.0,
            dropout: 0.5,
            seed: 0,
            iterations: 1000,
            eval_interval: 100,
            checkpoint_interval: 0,
            train_size: 10_000,
            test_size: 2_000,
            gap: 60,
            vocab: 10_000,
            downsample: true,
            permutation_seed: 0,
            mnist_dir: PathBuf::from("data/mnist"),
            text_train: PathBuf::from("data/text/train.tsv"),
            text_test: PathBuf::from("data/text/test.tsv"),
            out: PathBuf::from("runs/latest"),
            timing: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value '{value}' for '{key}'"))),
    }
}

impl TrainConfig {
    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "task" => self.task = value.parse()?,
            "cell" => self.cell = value.parse()?,
            "bidirectional" => self.bidirectional = parse_bool(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "embedding" => self.embedding = parse(key, value)?,
            "k" | "window" => self.window = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value.to_ascii_lowercase().as_str() {
                    "adadelta" => OptimizerKind::Adadelta,
                    "rmsprop" => OptimizerKind::RmsProp,
                    other => return Err(Error::Config(format!("unknown optimizer '{other}'"))),
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "iterations" | "iters" => self.iterations = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "gap" => self.gap = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "downsample" => self.downsample = parse_bool(key, value)?,
            "permutation_seed" => self.permutation_seed = parse(key, value)?,
            "mnist_dir" => self.mnist_dir = PathBuf::from(value),
            "text_train" => self.text_train = PathBuf::from(value),
            "text_test" => self.text_test = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "timing" => self.timing = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_str_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_str_kv(&std::fs::read_to_string(path)?)
    }

    /// Full `key = value` listing; parsing it back gives an equal config.
    pub fn to_kv(&self) -> String {
        let opt = match self.optimizer {
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::RmsProp => "rmsprop",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("task", self.task.to_string()),
            ("cell", self.cell.to_string()),
            ("bidirectional", self.bidirectional.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("hidden", self.hidden.to_string()),
            ("embedding", self.embedding.to_string()),
            ("k", self.window.to_string()),
            ("batch", self.batch.to_string()),
            ("optimizer", opt.to_string()),
            ("lr", self.lr.to_string()),
            ("rho", self.rho.to_string()),
            ("decay", self.decay.to_string()),
            ("eps", self.eps.to_string()),
            ("clip", self.clip.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seed", self.seed.to_string()),
            ("iterations", self.iterations.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("train_size", self.train_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("gap", self.gap.to_string()),
            ("vocab", self.vocab.to_string()),
            ("downsample", self.downsample.to_string()),
            ("permutation_seed", self.permutation_seed.to_string()),
            ("mnist_dir", self.mnist_dir.display().to_string()),
            ("text_train", self.text_train.display().to_string()),
            ("text_test", self.text_test.display().to_string()),
            ("out", self.out.display().to_string()),
            ("timing", self.timing.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Adadelta => Optimizer::Adadelta {
                rho: self.rho,
                eps: self.eps,
            },
            OptimizerKind::RmsProp => Optimizer::RmsProp {
                decay: self.decay,
                eps: self.eps,
                lr: self.lr,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.cell == CellKind::Rra && self.window == 0 {
            return fail("k must be at least 1");
        }
        if self.batch == 0 {
            return fail("batch must be at least 1");
        }
        if self.hidden == 0 {
            return fail("hidden must be at least 1");
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.clip > 0.0) {
            return fail("clip must be positive");
        }
        if self.train_size < self.batch {
            return fail("train_size must be at least one batch");
        }
        if self.test_size == 0 {
            return fail("test_size must be positive");
        }
        if matches!(self.task, Task::Text | Task::LongRange) && self.embedding == 0 {
            return fail("embedding must be at least 1");
        }
        Ok(())
    }
}
