use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One logged training iteration. Losses and the gradient norm describe the
/// parameters *before* that iteration's update; evaluation columns are
/// filled only on evaluation iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub epoch: usize,
    pub seconds: Option<f64>,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    /// MSE for regression, accuracy for classification.
    pub eval_metric: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Normalized attention weights, index 0 on `h_{t-2}`. Empty for an LSTM.
    pub attention: Vec<f64>,
}

pub fn metrics_header(window: usize) -> String {
    let mut h = String::from("iteration,epoch,seconds,train_loss,eval_loss,eval_metric,grad_norm");
    for k in 0..window {
        h.push_str(&format!(",attn_{k}"));
    }
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.epoch,
            opt(self.seconds),
            self.train_loss,
            opt(self.eval_loss),
            opt(self.eval_metric),
            self.grad_norm
        );
        for w in &self.attention {
            s.push(',');
            s.push_str(&w.to_string());
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed metrics row '{line}'"));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(MetricsRow {
            iteration: cols[0].parse().map_err(|_| bad())?,
            epoch: cols[1].parse().map_err(|_| bad())?,
            seconds: maybe(cols[2])?,
            train_loss: num(cols[3])?,
            eval_loss: maybe(cols[4])?,
            eval_metric: maybe(cols[5])?,
            grad_norm: num(cols[6])?,
            attention: cols[7..].iter().map(|s| num(s)).collect::<Result<_>>()?,
        })
    }
}

/// Parses a metrics file, header included.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.starts_with("iteration,") => {}
        _ => return Err(Error::InvalidArgument("metrics file lacks its header".into())),
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}

/// Normalized attention weights per logged iteration, as CSV with columns
/// `iteration,attn_0..attn_{K-1}`.
pub fn export_attention(metrics_path: impl AsRef<Path>) -> Result<String> {
    let rows = read_metrics(metrics_path)?;
    let k = rows.first().map_or(0, |r| r.attention.len());
    if k == 0 {
        return Err(Error::NoAttention);
    }
    let mut out = String::from("iteration");
    for i in 0..k {
        out.push_str(&format!(",attn_{i}"));
    }
    out.push('\n');
    for r in &rows {
        out.push_str(&r.iteration.to_string());
        for w in &r.attention {
            out.push(',');
            out.push_str(&w.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}
