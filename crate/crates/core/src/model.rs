//! One recurrent layer (LSTM or RRA, optionally bidirectional) with an
//! optional token embedding, dropout on the last valid hidden state, and a
//! linear readout. Forward and backward passes run over whole batches.
//!
//! Inside a batch, sequences are processed in order of decreasing length so
//! that the sequences still running at step `s` are always a prefix of the
//! working arrays. Every kernel works row by row, so the number of other
//! rows in a batch never changes a row's bits.

use crate::cells::{activate_gates, normalize_attention_with_sum, CellKind, CellParams, RecurrentState};
use crate::error::{Error, Result};
use crate::initializers::{glorot_uniform, Rng};
use crate::numerics::{axpy, dot, gemm_nn_acc, gemm_tn_acc, tanh, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// Real-valued vectors of this width at every step.
    Dense(usize),
    /// Token ids looked up in a `vocab × dim` embedding.
    Tokens { vocab: usize, dim: usize },
}

impl InputKind {
    pub fn width(&self) -> usize {
        match *self {
            InputKind::Dense(d) => d,
            InputKind::Tokens { dim, .. } => dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub cell: CellKind,
    pub input: InputKind,
    pub hidden: usize,
    /// Attention window `K`; ignored for the LSTM.
    pub window: usize,
    pub bidirectional: bool,
    /// Readout width: 1 for regression, the class count otherwise.
    pub outputs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: Option<Matrix>,
    pub cell: CellParams,
    /// Right-to-left cell of a bidirectional model.
    pub cell_rev: Option<CellParams>,
    /// `C × H` or `C × 2H`.
    pub readout_w: Matrix,
    pub readout_b: Vec<f64>,
}

impl ModelParams {
    pub fn init(shape: &ModelShape, rng: &mut Rng) -> Result<Self> {
        if shape.outputs == 0 {
            return Err(Error::ZeroDimension { what: "output count" });
        }
        let embedding = match shape.input {
            InputKind::Dense(_) => None,
            InputKind::Tokens { vocab, dim } => Some(glorot_uniform(vocab, dim, rng)?.transpose()),
        };
        let d = shape.input.width();
        let cell = CellParams::init(shape.cell, d, shape.hidden, shape.window, rng)?;
        let cell_rev = if shape.bidirectional {
            Some(CellParams::init(shape.cell, d, shape.hidden, shape.window, rng)?)
        } else {
            None
        };
        let width = shape.hidden * if shape.bidirectional { 2 } else { 1 };
        let readout_w = glorot_uniform(width, shape.outputs, rng)?;
        Ok(ModelParams {
            embedding,
            cell,
            cell_rev,
            readout_w,
            readout_b: vec![0.0; shape.outputs],
        })
    }

    pub fn shape(&self) -> ModelShape {
        let input = match &self.embedding {
            Some(e) => InputKind::Tokens {
                vocab: e.rows(),
                dim: e.cols(),
            },
            None => InputKind::Dense(self.cell.input_size),
        };
        ModelShape {
            cell: self.cell.kind(),
            input,
            hidden: self.cell.hidden_size,
            window: self.cell.window(),
            bidirectional: self.cell_rev.is_some(),
            outputs: self.readout_b.len(),
        }
    }

    /// Same structure, every value zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, block) in z.blocks_mut() {
            block.fill(0.0);
        }
        z
    }

    /// Named parameter blocks with their `(rows, cols)` shapes, in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, (usize, usize), &[f64])> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding", e.shape(), e.as_slice()));
        }
        push_cell(&mut out, &self.cell, ["cell.w", "cell.b", "cell.w_a"]);
        if let Some(c) = &self.cell_rev {
            push_cell(&mut out, c, ["cell_rev.w", "cell_rev.b", "cell_rev.w_a"]);
        }
        out.push(("readout.w", self.readout_w.shape(), self.readout_w.as_slice()));
        out.push(("readout.b", (self.readout_b.len(), 1), &self.readout_b));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, (usize, usize), &mut [f64])> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embedding {
            let shape = e.shape();
            out.push(("embedding", shape, e.as_mut_slice()));
        }
        push_cell_mut(&mut out, &mut self.cell, ["cell.w", "cell.b", "cell.w_a"]);
        if let Some(c) = &mut self.cell_rev {
            push_cell_mut(&mut out, c, ["cell_rev.w", "cell_rev.b", "cell_rev.w_a"]);
        }
        let shape = self.readout_w.shape();
        out.push(("readout.w", shape, self.readout_w.as_mut_slice()));
        let n = self.readout_b.len();
        out.push(("readout.b", (n, 1), &mut self.readout_b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, _, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, _, b)| b.iter().all(|v| v.is_finite()))
    }
}

type Block<'a> = (&'static str, (usize, usize), &'a [f64]);
type BlockMut<'a> = (&'static str, (usize, usize), &'a mut [f64]);

fn push_cell<'a>(out: &mut Vec<Block<'a>>, c: &'a CellParams, names: [&'static str; 3]) {
    out.push((names[0], c.w_gates.shape(), c.w_gates.as_slice()));
    out.push((names[1], (c.b_gates.len(), 1), &c.b_gates));
    if let Some(w) = &c.w_a {
        out.push((names[2], (w.len(), 1), w));
    }
}

fn push_cell_mut<'a>(out: &mut Vec<BlockMut<'a>>, c: &'a mut CellParams, names: [&'static str; 3]) {
    let shape = c.w_gates.shape();
    out.push((names[0], shape, c.w_gates.as_mut_slice()));
    let n = c.b_gates.len();
    out.push((names[1], (n, 1), &mut c.b_gates));
    if let Some(w) = &mut c.w_a {
        let k = w.len();
        out.push((names[2], (k, 1), w));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// `B × T × D`, row-major.
    Dense { dim: usize, data: Vec<f64> },
    /// `B × T` token ids.
    Tokens(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Padded batch of sequences. Valid steps of each row precede its padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    size: usize,
    steps: usize,
    inputs: Inputs,
    lengths: Vec<usize>,
    targets: Targets,
}

impl Batch {
    pub fn new(size: usize, steps: usize, inputs: Inputs, mask: &[bool], targets: Targets) -> Result<Self> {
        let expected = match &inputs {
            Inputs::Dense { dim, .. } => size * steps * dim,
            Inputs::Tokens(_) => size * steps,
        };
        let got = match &inputs {
            Inputs::Dense { data, .. } => data.len(),
            Inputs::Tokens(ids) => ids.len(),
        };
        if got != expected {
            return Err(Error::DimensionMismatch {
                op: "batch inputs",
                left: (expected, 1),
                right: (got, 1),
            });
        }
        if mask.len() != size * steps {
            return Err(Error::DimensionMismatch {
                op: "batch mask",
                left: (size, steps),
                right: (mask.len(), 1),
            });
        }
        if targets.len() != size {
            return Err(Error::DimensionMismatch {
                op: "batch targets",
                left: (size, 1),
                right: (targets.len(), 1),
            });
        }
        let mut lengths = Vec::with_capacity(size);
        for b in 0..size {
            let row = &mask[b * steps..(b + 1) * steps];
            let len = row.iter().take_while(|&&m| m).count();
            if row[len..].iter().any(|&m| m) {
                return Err(Error::InvalidArgument(format!(
                    "mask of sequence {b} is not prefix-contiguous"
                )));
            }
            if len == 0 {
                return Err(Error::EmptySequence { index: b });
            }
            lengths.push(len);
        }
        Ok(Batch {
            size,
            steps,
            inputs,
            lengths,
            targets,
        })
    }

    /// Every row valid for all `steps`.
    pub fn full(size: usize, steps: usize, inputs: Inputs, targets: Targets) -> Result<Self> {
        Self::new(size, steps, inputs, &vec![true; size * steps], targets)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn inputs(&self) -> &Inputs {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.size * self.steps];
        for (b, &len) in self.lengths.iter().enumerate() {
            m[b * self.steps..b * self.steps + len].fill(true);
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    /// Inverted dropout with this drop probability on the readout input.
    Train {
        dropout: f64,
    },
}

/// Activations of one direction, one entry per step. Row `p` of step `s`
/// belongs to the `p`-th longest sequence.
#[derive(Clone, Debug, Default)]
struct DirTrace {
    /// `[x; h_prev]`, `n × (D+H)`
    xh: Vec<Vec<f64>>,
    /// activated gates, `n × 4H`
    gates: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    tanh_out: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    wbar: Vec<f64>,
    attention_sum: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `order[p]` is the batch row processed at working position `p`.
    order: Vec<usize>,
    /// running rows per step
    active: Vec<usize>,
    dirs: Vec<DirTrace>,
    /// Last valid hidden state per batch row (forward half first), `B × W`.
    pub final_hidden: Matrix,
    /// Inverted-dropout multipliers, `B × W`; absent in eval mode.
    pub dropout_mask: Option<Matrix>,
    /// Readout outputs, `B × C`.
    pub outputs: Matrix,
}

impl ForwardTrace {
    /// Hidden trajectory of batch row `row` in the given direction (0 forward,
    /// 1 reverse), one vector per valid step.
    pub fn hidden_trajectory(&self, dir: usize, row: usize) -> Vec<Vec<f64>> {
        let p = self.order.iter().position(|&r| r == row).expect("row in batch");
        let h = self.dirs[dir].h.first().map_or(0, |v| v.len() / self.active[0]);
        self.dirs[dir]
            .h
            .iter()
            .zip(&self.active)
            .take_while(|(_, &n)| p < n)
            .map(|(step, _)| step[p * h..(p + 1) * h].to_vec())
            .collect()
    }
}

fn input_row<'a>(params: &'a ModelParams, batch: &'a Batch, row: usize, t: usize) -> Result<&'a [f64]> {
    match batch.inputs() {
        Inputs::Dense { dim, data } => {
            let at = (row * batch.steps + t) * dim;
            Ok(&data[at..at + dim])
        }
        Inputs::Tokens(ids) => {
            let id = ids[row * batch.steps + t];
            let emb = params
                .embedding
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("token inputs need an embedding".into()))?;
            if id >= emb.rows() {
                return Err(Error::TokenOutOfRange { id, vocab: emb.rows() });
            }
            Ok(emb.row(id))
        }
    }
}

fn check_batch(params: &ModelParams, batch: &Batch) -> Result<()> {
    match (batch.inputs(), &params.embedding) {
        (Inputs::Dense { dim, .. }, None) if *dim == params.cell.input_size => Ok(()),
        (Inputs::Dense { dim, .. }, _) => Err(Error::DimensionMismatch {
            op: "dense input width",
            left: (params.cell.input_size, 1),
            right: (*dim, 1),
        }),
        (Inputs::Tokens(_), Some(_)) => Ok(()),
        (Inputs::Tokens(_), None) => Err(Error::InvalidArgument("token inputs need an embedding".into())),
    }?;
    if let Targets::Classes(labels) = batch.targets() {
        let c = params.readout_b.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
    }
    Ok(())
}

fn run_direction(
    params: &ModelParams,
    cell: &CellParams,
    batch: &Batch,
    order: &[usize],
    active: &[usize],
    reverse: bool,
) -> Result<DirTrace> {
    let d = cell.input_size;
    let h = cell.hidden_size;
    let cols = d + h;
    let wt = cell.w_gates.transpose();
    let (wbar, attention_sum) = match &cell.w_a {
        Some(w) => normalize_attention_with_sum(w)?,
        None => (Vec::new(), 0.0),
    };
    let mut tr = DirTrace {
        wbar,
        attention_sum,
        ..DirTrace::default()
    };

    for (s, &n) in active.iter().enumerate() {
        let mut xh = vec![0.0; n * cols];
        for p in 0..n {
            let row = order[p];
            let t = if reverse { batch.lengths[row] - 1 - s } else { s };
            xh[p * cols..p * cols + d].copy_from_slice(input_row(params, batch, row, t)?);
            if s > 0 {
                xh[p * cols + d..(p + 1) * cols].copy_from_slice(&tr.h[s - 1][p * h..(p + 1) * h]);
            }
        }

        let mut gates = vec![0.0; n * 4 * h];
        for row in gates.chunks_exact_mut(4 * h) {
            row.copy_from_slice(&cell.b_gates);
        }
        gemm_nn_acc(&xh, wt.as_slice(), &mut gates, n, cols, 4 * h);
        for row in gates.chunks_exact_mut(4 * h) {
            let pre = row.to_vec();
            activate_gates(&pre, row, h);
        }

        let mut c = vec![0.0; n * h];
        let mut attention = vec![0.0; n * h];
        for p in 0..n {
            let g = &gates[p * 4 * h..(p + 1) * 4 * h];
            for j in 0..h {
                let c_prev = if s > 0 { tr.c[s - 1][p * h + j] } else { 0.0 };
                c[p * h + j] = g[h + j] * c_prev + g[j] * g[3 * h + j];
            }
            for (k, &w) in tr.wbar.iter().enumerate() {
                // history entry k holds h_{t-2-k}
                if s >= k + 2 {
                    let src = &tr.h[s - 2 - k][p * h..(p + 1) * h];
                    axpy(w, src, &mut attention[p * h..(p + 1) * h]);
                }
            }
        }

        let mut tanh_out = vec![0.0; n * h];
        let mut hs = vec![0.0; n * h];
        for p in 0..n {
            for j in 0..h {
                let i = p * h + j;
                let th = tanh(c[i] + attention[i]);
                tanh_out[i] = th;
                hs[i] = gates[p * 4 * h + 2 * h + j] * th;
            }
        }
        tr.xh.push(xh);
        tr.gates.push(gates);
        tr.c.push(c);
        tr.tanh_out.push(tanh_out);
        tr.h.push(hs);
    }
    Ok(tr)
}

/// Unrolls the model over the batch and applies the readout to the last
/// valid hidden state. Runs both directions when the model has a reverse cell.
pub fn forward(params: &ModelParams, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<(Matrix, ForwardTrace)> {
    check_batch(params, batch)?;
    let bsz = batch.size();
    let h = params.cell.hidden_size;

    let mut order: Vec<usize> = (0..bsz).collect();
    order.sort_by(|&a, &b| batch.lengths[b].cmp(&batch.lengths[a]));
    let max_len = batch.lengths[order[0]];
    let active: Vec<usize> = (0..max_len)
        .map(|s| order.iter().take_while(|&&r| batch.lengths[r] > s).count())
        .collect();

    let mut dirs = vec![run_direction(params, &params.cell, batch, &order, &active, false)?];
    if let Some(rev) = &params.cell_rev {
        dirs.push(run_direction(params, rev, batch, &order, &active, true)?);
    }

    let width = h * dirs.len();
    let mut final_hidden = Matrix::zeros(bsz, width);
    for (p, &row) in order.iter().enumerate() {
        let last = batch.lengths[row] - 1;
        for (di, tr) in dirs.iter().enumerate() {
            final_hidden.row_mut(row)[di * h..(di + 1) * h].copy_from_slice(&tr.h[last][p * h..(p + 1) * h]);
        }
    }

    let dropout_mask = match mode {
        Mode::Eval => None,
        Mode::Train { dropout } if dropout > 0.0 => {
            if !(dropout < 1.0) {
                return Err(Error::InvalidArgument(format!("dropout rate {dropout} not in [0, 1)")));
            }
            let keep = 1.0 - dropout;
            let data = (0..bsz * width)
                .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            Some(Matrix::from_vec(bsz, width, data)?)
        }
        Mode::Train { .. } => None,
    };

    let c = params.readout_b.len();
    let mut outputs = Matrix::zeros(bsz, c);
    for b in 0..bsz {
        let input = readout_input(&final_hidden, dropout_mask.as_ref(), b);
        for k in 0..c {
            let mut acc = params.readout_b[k];
            for (x, w) in input.iter().zip(params.readout_w.row(k)) {
                acc += x * w;
            }
            outputs.set(b, k, acc);
        }
    }

    let trace = ForwardTrace {
        order,
        active,
        dirs,
        final_hidden,
        dropout_mask,
        outputs: outputs.clone(),
    };
    Ok((outputs, trace))
}

/// As [`forward`], but refuses a model without a reverse cell.
pub fn forward_bidirectional(
    params: &ModelParams,
    batch: &Batch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Matrix, ForwardTrace)> {
    if params.cell_rev.is_none() {
        return Err(Error::InvalidArgument("model has no reverse cell".into()));
    }
    forward(params, batch, mode, rng)
}

fn readout_input(final_hidden: &Matrix, mask: Option<&Matrix>, b: usize) -> Vec<f64> {
    match mask {
        Some(m) => final_hidden.row(b).iter().zip(m.row(b)).map(|(x, k)| x * k).collect(),
        None => final_hidden.row(b).to_vec(),
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BackwardOptions {
    /// Route gradients through the attention shortcut into older states.
    pub attention_history: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            attention_history: true,
        }
    }
}

/// Exact gradient of `Σ_b Σ_k d_outputs[b,k] · outputs[b,k]` with respect to
/// every parameter, by back-propagation through time.
pub fn backward(params: &ModelParams, batch: &Batch, trace: &ForwardTrace, d_outputs: &Matrix) -> Result<ModelParams> {
    backward_with(params, batch, trace, d_outputs, BackwardOptions::default())
}

pub(crate) fn backward_with(
    params: &ModelParams,
    batch: &Batch,
    trace: &ForwardTrace,
    d_outputs: &Matrix,
    opts: BackwardOptions,
) -> Result<ModelParams> {
    let bsz = batch.size();
    let c = params.readout_b.len();
    if d_outputs.shape() != (bsz, c) {
        return Err(Error::DimensionMismatch {
            op: "backward output gradient",
            left: (bsz, c),
            right: d_outputs.shape(),
        });
    }
    let mut grads = params.zeros_like();
    let width = trace.final_hidden.cols();

    let mut d_final = Matrix::zeros(bsz, width);
    for b in 0..bsz {
        let input = readout_input(&trace.final_hidden, trace.dropout_mask.as_ref(), b);
        let dy = d_outputs.row(b);
        let mut d_in = vec![0.0; width];
        for k in 0..c {
            grads.readout_b[k] += dy[k];
            axpy(dy[k], &input, grads.readout_w.row_mut(k));
            axpy(dy[k], params.readout_w.row(k), &mut d_in);
        }
        if let Some(m) = &trace.dropout_mask {
            for (v, k) in d_in.iter_mut().zip(m.row(b)) {
                *v *= k;
            }
        }
        d_final.row_mut(b).copy_from_slice(&d_in);
    }

    let mut emb_grad = grads.embedding.take();
    for (di, tr) in trace.dirs.iter().enumerate() {
        let (cell, cell_grad) = if di == 0 {
            (&params.cell, &mut grads.cell)
        } else {
            (
                params.cell_rev.as_ref().expect("reverse cell"),
                grads.cell_rev.as_mut().expect("reverse cell"),
            )
        };
        backward_direction(cell, cell_grad, emb_grad.as_mut(), batch, trace, tr, &d_final, di, opts)?;
    }
    grads.embedding = emb_grad;
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn backward_direction(
    cell: &CellParams,
    grad: &mut CellParams,
    mut emb_grad: Option<&mut Matrix>,
    batch: &Batch,
    trace: &ForwardTrace,
    tr: &DirTrace,
    d_final: &Matrix,
    dir: usize,
    opts: BackwardOptions,
) -> Result<()> {
    let d = cell.input_size;
    let h = cell.hidden_size;
    let cols = d + h;
    let reverse = dir == 1;
    let steps = trace.active.len();

    let mut dh: Vec<Vec<f64>> = trace.active.iter().map(|&n| vec![0.0; n * h]).collect();
    for (p, &row) in trace.order.iter().enumerate() {
        let last = batch.lengths[row] - 1;
        dh[last][p * h..(p + 1) * h].copy_from_slice(&d_final.row(row)[dir * h..(dir + 1) * h]);
    }
    let mut dc = vec![0.0; trace.active[0] * h];
    let mut dwbar = vec![0.0; tr.wbar.len()];

    for s in (0..steps).rev() {
        let n = trace.active[s];
        let gates = &tr.gates[s];
        let mut dz = vec![0.0; n * 4 * h];
        for p in 0..n {
            let g = &gates[p * 4 * h..(p + 1) * 4 * h];
            let mut du = vec![0.0; h];
            for j in 0..h {
                let i = p * h + j;
                let (ig, fg, og, gg) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let th = tr.tanh_out[s][i];
                let dhv = dh[s][i];
                let d_o = dhv * th;
                du[j] = dhv * og * (1.0 - th * th);
                let dct = dc[i] + du[j];
                let c_prev = if s > 0 { tr.c[s - 1][i] } else { 0.0 };
                dc[i] = dct * fg;
                let z = &mut dz[p * 4 * h..(p + 1) * 4 * h];
                z[j] = dct * gg * ig * (1.0 - ig);
                z[h + j] = dct * c_prev * fg * (1.0 - fg);
                z[2 * h + j] = d_o * og * (1.0 - og);
                z[3 * h + j] = dct * ig * (1.0 - gg * gg);
            }
            for (k, &w) in tr.wbar.iter().enumerate() {
                if s >= k + 2 {
                    let src = s - 2 - k;
                    dwbar[k] += dot(&du, &tr.h[src][p * h..(p + 1) * h]);
                    if opts.attention_history {
                        axpy(w, &du, &mut dh[src][p * h..(p + 1) * h]);
                    }
                }
            }
        }

        gemm_tn_acc(&dz, &tr.xh[s], grad.w_gates.as_mut_slice(), n, 4 * h, cols);
        for row in dz.chunks_exact(4 * h) {
            for (b, v) in grad.b_gates.iter_mut().zip(row) {
                *b += v;
            }
        }
        let mut dxh = vec![0.0; n * cols];
        gemm_nn_acc(&dz, cell.w_gates.as_slice(), &mut dxh, n, 4 * h, cols);

        for p in 0..n {
            if s > 0 {
                let (prev, _) = dh.split_at_mut(s);
                for (acc, v) in prev[s - 1][p * h..(p + 1) * h]
                    .iter_mut()
                    .zip(&dxh[p * cols + d..(p + 1) * cols])
                {
                    *acc += v;
                }
            }
            if let (Some(eg), Inputs::Tokens(ids)) = (emb_grad.as_deref_mut(), batch.inputs()) {
                let row = trace.order[p];
                let t = if reverse { batch.lengths[row] - 1 - s } else { s };
                let id = ids[row * batch.steps() + t];
                for (acc, v) in eg.row_mut(id).iter_mut().zip(&dxh[p * cols..p * cols + d]) {
                    *acc += v;
                }
            }
        }
    }

    if let Some(gw) = grad.w_a.as_mut() {
        // w̄_i = w_i / S  ⇒  ∂L/∂w_j = (∂L/∂w̄_j − Σ_i ∂L/∂w̄_i · w̄_i) / S
        let coupled: f64 = dwbar.iter().zip(&tr.wbar).map(|(g, w)| g * w).sum();
        for (gj, dj) in gw.iter_mut().zip(&dwbar) {
            *gj += (dj - coupled) / tr.attention_sum;
        }
    }
    Ok(())
}

pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            op: "loss_mse",
            left: (pred.len(), 1),
            right: (target.len(), 1),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean negative log-likelihood of the true class under a row softmax.
pub fn loss_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "loss_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let mut total = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        if l >= logits.cols() {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: logits.cols(),
            });
        }
        total -= log_softmax_row(logits.row(b))[l];
    }
    Ok(total / labels.len().max(1) as f64)
}

/// Fraction of rows whose first maximal logit is the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(b, &l)| argmax(logits.row(b)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Batch-mean loss for the batch's target kind and its gradient with respect
/// to the outputs.
pub fn loss_and_output_grad(outputs: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    let bsz = outputs.rows();
    let mut grad = Matrix::zeros(bsz, outputs.cols());
    let loss = match targets {
        Targets::Regression(t) => {
            let pred: Vec<f64> = (0..bsz).map(|b| outputs.get(b, 0)).collect();
            for b in 0..bsz {
                grad.set(b, 0, 2.0 * (pred[b] - t[b]) / bsz as f64);
            }
            loss_mse(&pred, t)?
        }
        Targets::Classes(labels) => {
            let loss = loss_cross_entropy(outputs, labels)?;
            for (b, &l) in labels.iter().enumerate() {
                let lp = log_softmax_row(outputs.row(b));
                for (k, v) in lp.iter().enumerate() {
                    let p = v.exp();
                    let y = if k == l { 1.0 } else { 0.0 };
                    grad.set(b, k, (p - y) / bsz as f64);
                }
            }
            loss
        }
    };
    Ok((loss, grad))
}

/// Forward, loss, and full parameter gradient in one call.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<(f64, ModelParams)> {
    let (outputs, trace) = forward(params, batch, mode, rng)?;
    let (loss, d_out) = loss_and_output_grad(&outputs, batch.targets())?;
    let grads = backward(params, batch, &trace, &d_out)?;
    Ok((loss, grads))
}

pub fn batch_loss(params: &ModelParams, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<f64> {
    let (outputs, _) = forward(params, batch, mode, rng)?;
    Ok(loss_and_output_grad(&outputs, batch.targets())?.0)
}

/// Runs a single sequence through the cell step functions, for reference.
pub fn unroll_steps(cell: &CellParams, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut state = RecurrentState::for_params(cell);
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let o = crate::cells::step(cell, x, &state)?;
        out.push(o.h.clone());
        state = o.state;
    }
    Ok(out)
}
