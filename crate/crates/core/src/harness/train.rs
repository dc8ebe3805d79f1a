use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::cells::normalize_attention;
use crate::error::{Error, Result};
use crate::initializers::Rng;
use crate::model::{
    argmax, forward, loss_and_grad, loss_and_output_grad, InputKind, Mode, ModelParams, ModelShape, Targets,
};
use crate::optim::{clip_model_gradients, OptimState};
use crate::tasks::{
    adding_dataset, build_vocab, gen_adding, gen_longrange_text, load_labeled_text, load_mnist_idx, make_permutation,
    pixels_to_sequence, stratified_subset, token_dataset, Dataset, Examples, TokenSequence, UNK_ID,
};

use super::checkpoint::Checkpoint;
use super::config::{Task, TrainConfig};
use super::metrics::{metrics_header, read_metrics, MetricsRow};

const TRAIN_DATA_STREAM: u64 = 1;
const TEST_DATA_STREAM: u64 = 2;
const EPOCH_STREAM_BASE: u64 = 1 << 32;
const DROPOUT_STREAM_BASE: u64 = 2 << 32;
const EVAL_BATCH: usize = 250;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Train and test data for a config, with the model shape they need.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
    pub shape: ModelShape,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    /// MSE for regression, accuracy for classification.
    pub metric: f64,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub last_row: MetricsRow,
    /// Evaluation of the parameters after the final update.
    pub final_eval: EvalMetrics,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn mnist_split(config: &TrainConfig, images: &str, labels: &str, total: usize, seed: u64) -> Result<Dataset> {
    let data = load_mnist_idx(config.mnist_dir.join(images), config.mnist_dir.join(labels))?;
    let pick = stratified_subset(&data.labels, total, seed);
    if pick.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let steps = if config.downsample {
        (data.rows / 2) * (data.cols / 2)
    } else {
        data.rows * data.cols
    };
    let perm = match config.task {
        Task::MnistPermuted => Some(make_permutation(steps, config.permutation_seed)),
        _ => None,
    };
    let mut values = Vec::with_capacity(pick.len() * steps);
    for &i in &pick {
        values.extend(pixels_to_sequence(
            data.image(i),
            data.rows,
            data.cols,
            perm.as_deref(),
            config.downsample,
        )?);
    }
    Ok(Dataset {
        examples: Examples::Dense {
            dim: 1,
            steps,
            data: values,
        },
        targets: Targets::Classes(pick.iter().map(|&i| data.labels[i] as usize).collect()),
    })
}

fn text_split(docs: &[(usize, Vec<String>)], vocab: &crate::tasks::Vocab, max_len: usize) -> Vec<TokenSequence> {
    docs.iter()
        .map(|(label, words)| {
            let mut ids = vocab.encode(words);
            if max_len > 0 {
                ids.truncate(max_len);
            }
            if ids.is_empty() {
                ids.push(UNK_ID);
            }
            TokenSequence { ids, label: *label }
        })
        .collect()
}

/// Builds (or loads) the data a config trains and evaluates on.
pub fn load_task(config: &TrainConfig) -> Result<TaskData> {
    let root = Rng::new(config.seed);
    let dense = |dim| InputKind::Dense(dim);
    let (train, test, input, outputs) = match config.task {
        Task::Adding => {
            let train = gen_adding(config.seq_len, config.train_size, &mut root.split(TRAIN_DATA_STREAM))?;
            let test = gen_adding(config.seq_len, config.test_size, &mut root.split(TEST_DATA_STREAM))?;
            (adding_dataset(&train), adding_dataset(&test), dense(2), 1)
        }
        Task::Mnist | Task::MnistPermuted => {
            let train = mnist_split(
                config,
                MNIST_TRAIN_IMAGES,
                MNIST_TRAIN_LABELS,
                config.train_size,
                config.seed,
            )?;
            let test = mnist_split(
                config,
                MNIST_TEST_IMAGES,
                MNIST_TEST_LABELS,
                config.test_size,
                config.seed,
            )?;
            (train, test, dense(1), 10)
        }
        Task::LongRange => {
            let gen =
                |n, stream| gen_longrange_text(n, config.seq_len, config.gap, config.vocab, &mut root.split(stream));
            let train = token_dataset(&gen(config.train_size, TRAIN_DATA_STREAM)?);
            let test = token_dataset(&gen(config.test_size, TEST_DATA_STREAM)?);
            let input = InputKind::Tokens {
                vocab: config.vocab,
                dim: config.embedding,
            };
            (train, test, input, 2)
        }
        Task::Text => {
            let train_docs = load_labeled_text(&config.text_train)?;
            let test_docs = load_labeled_text(&config.text_test)?;
            let corpus: Vec<Vec<String>> = train_docs.iter().map(|(_, w)| w.clone()).collect();
            let vocab = build_vocab(&corpus, config.vocab)?;
            let classes = train_docs
                .iter()
                .chain(&test_docs)
                .map(|(l, _)| l + 1)
                .max()
                .unwrap_or(0)
                .max(2);
            let train = token_dataset(&text_split(&train_docs, &vocab, config.seq_len));
            let test = token_dataset(&text_split(&test_docs, &vocab, config.seq_len));
            let input = InputKind::Tokens {
                vocab: vocab.len(),
                dim: config.embedding,
            };
            (train, test, input, classes)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = ModelShape {
        cell: config.cell,
        input,
        hidden: config.hidden,
        window: config.window,
        bidirectional: config.bidirectional,
        outputs,
    };
    Ok(TaskData { train, test, shape })
}

/// Eval-mode loss and metric over a whole dataset.
pub fn evaluate_params(params: &ModelParams, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs = params.readout_b.len();
    match &data.targets {
        Targets::Regression(_) if outputs != 1 => {
            return Err(Error::InvalidArgument(format!(
                "regression data needs one output, model has {outputs}"
            )))
        }
        Targets::Classes(_) if outputs < 2 => {
            return Err(Error::InvalidArgument(
                "classification data needs at least two outputs".into(),
            ))
        }
        _ => {}
    }
    let n = data.len();
    let mut rng = Rng::new(0);
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk)?;
        let (out, _) = forward(params, &batch, Mode::Eval, &mut rng)?;
        let (loss, _) = loss_and_output_grad(&out, batch.targets())?;
        loss_sum += loss * chunk.len() as f64;
        if let Targets::Classes(labels) = batch.targets() {
            hits += labels
                .iter()
                .enumerate()
                .filter(|&(b, &l)| argmax(out.row(b)) == l)
                .count();
        }
    }
    let loss = loss_sum / n as f64;
    let metric = match data.targets {
        Targets::Regression(_) => loss,
        Targets::Classes(_) => hits as f64 / n as f64,
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("evaluation loss {loss}")));
    }
    Ok(EvalMetrics { loss, metric, count: n })
}

/// Evaluates a checkpoint's parameters on `data`.
pub fn evaluate(checkpoint: &Checkpoint, data: &Dataset) -> Result<EvalMetrics> {
    evaluate_params(&checkpoint.params, data)
}

fn attention_row(params: &ModelParams) -> Result<Vec<f64>> {
    match &params.cell.w_a {
        Some(w) => normalize_attention(w),
        None => Ok(Vec::new()),
    }
}

/// Fresh run from the config's seed.
pub fn run_training(config: &TrainConfig) -> Result<TrainSummary> {
    config.validate()?;
    let data = load_task(config)?;
    let params = ModelParams::init(&data.shape, &mut Rng::new(config.seed))?;
    let optim = OptimState::for_params(config.optimizer(), &params);
    train_loop(config, &data, params, optim, 0)
}

/// Continues a run from a checkpoint. Metrics rows from the checkpoint's
/// iteration onward are rewritten, so the file matches an uninterrupted run.
pub fn resume_training(config: &TrainConfig, checkpoint: Checkpoint) -> Result<TrainSummary> {
    config.validate()?;
    let data = load_task(config)?;
    if checkpoint.params.shape() != data.shape {
        return Err(Error::Config("checkpoint does not match the configured model".into()));
    }
    train_loop(config, &data, checkpoint.params, checkpoint.optim, checkpoint.iteration)
}

fn open_metrics(path: &Path, window: usize, start: usize) -> Result<BufWriter<File>> {
    let header = metrics_header(window);
    if start == 0 || !path.exists() {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{header}")?;
        return Ok(w);
    }
    let kept: Vec<MetricsRow> = read_metrics(path)?
        .into_iter()
        .filter(|r| r.iteration < start)
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for r in &kept {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(w)
}

fn save_checkpoint(
    config: &TrainConfig,
    params: &ModelParams,
    optim: &OptimState,
    iteration: usize,
    path: &Path,
) -> Result<()> {
    Checkpoint {
        iteration,
        config: config.to_kv(),
        params: params.clone(),
        optim: optim.clone(),
    }
    .save(path)
}

fn train_loop(
    config: &TrainConfig,
    data: &TaskData,
    mut params: ModelParams,
    mut optim: OptimState,
    start: usize,
) -> Result<TrainSummary> {
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("config.txt"), config.to_kv())?;
    let metrics_path = config.out.join("metrics.csv");
    let checkpoint_path = config.out.join("checkpoint.ckpt");
    let mut metrics = open_metrics(&metrics_path, params.cell.window(), start)?;
    let mut timing = OpenOptions::new()
        .create(true)
        .append(true)
        .open(config.out.join("timing.csv"))?;

    let n = data.train.len();
    let per_epoch = n / config.batch;
    let root = Rng::new(config.seed);
    let mode = Mode::Train {
        dropout: config.dropout,
    };
    let started = Instant::now();
    let mut epoch_started = Instant::now();
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut last_row = None;

    for it in start..config.iterations {
        let epoch = it / per_epoch;
        if epoch != order_epoch {
            if order_epoch != usize::MAX {
                writeln!(timing, "{},{}", order_epoch, epoch_started.elapsed().as_secs_f64())?;
                epoch_started = Instant::now();
            }
            order = (0..n).collect();
            root.split(EPOCH_STREAM_BASE + epoch as u64).shuffle(&mut order);
            order_epoch = epoch;
        }
        let at = (it % per_epoch) * config.batch;
        let batch = data.train.batch(&order[at..at + config.batch])?;
        let mut dropout_rng = root.split(DROPOUT_STREAM_BASE + it as u64);
        let (loss, mut grads) = loss_and_grad(&params, &batch, mode, &mut dropout_rng)?;
        let grad_norm = clip_model_gradients(&mut grads, config.clip);
        if !loss.is_finite() || !grad_norm.is_finite() {
            metrics.flush()?;
            save_checkpoint(config, &params, &optim, it, &config.out.join("last_good.ckpt"))?;
            return Err(Error::NonFinite(format!(
                "iteration {it}: loss {loss}, gradient norm {grad_norm}"
            )));
        }

        let (eval_loss, eval_metric) = if it % config.eval_interval == 0 {
            let e = evaluate_params(&params, &data.test)?;
            info!(
                "iteration {it}: train loss {loss:.6}, eval loss {:.6}, eval metric {:.6}",
                e.loss, e.metric
            );
            (Some(e.loss), Some(e.metric))
        } else {
            (None, None)
        };
        let row = MetricsRow {
            iteration: it,
            epoch,
            seconds: config.timing.then(|| started.elapsed().as_secs_f64()),
            train_loss: loss,
            eval_loss,
            eval_metric,
            grad_norm,
            attention: attention_row(&params)?,
        };
        writeln!(metrics, "{}", row.to_csv())?;
        last_row = Some(row);

        optim.step_model(&mut params, &grads)?;
        let done = it + 1;
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 {
            metrics.flush()?;
            save_checkpoint(
                config,
                &params,
                &optim,
                done,
                &config.out.join(format!("checkpoint-{done}.ckpt")),
            )?;
        }
    }
    metrics.flush()?;
    if order_epoch != usize::MAX {
        writeln!(timing, "{},{}", order_epoch, epoch_started.elapsed().as_secs_f64())?;
    }

    let final_eval = evaluate_params(&params, &data.test)?;
    let iterations = config.iterations.max(start);
    fs::write(
        config.out.join("final.csv"),
        format!(
            "iteration,eval_loss,eval_metric\n{},{},{}\n",
            iterations, final_eval.loss, final_eval.metric
        ),
    )?;
    save_checkpoint(config, &params, &optim, iterations, &checkpoint_path)?;
    let last_row = match last_row {
        Some(r) => r,
        None => read_metrics(&metrics_path)?
            .pop()
            .ok_or_else(|| Error::Config("run has no iterations".into()))?,
    };
    Ok(TrainSummary {
        last_row,
        final_eval,
        metrics_path,
        checkpoint_path,
    })
}
