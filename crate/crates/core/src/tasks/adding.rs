use crate::error::{Error, Result};
use crate::initializers::Rng;
use crate::model::Targets;

use super::{Dataset, Examples};

#[derive(Clone, Debug, PartialEq)]
pub struct AddingExample {
    pub values: Vec<f64>,
    pub markers: Vec<bool>,
    pub target: f64,
}

impl AddingExample {
    pub fn marker_positions(&self) -> Vec<usize> {
        self.markers
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// `n` adding-problem sequences of length `len`. The first marker lands in
/// `[0, ⌊len/10⌋]`, the second in `[⌊len/2⌋, len)`.
pub fn gen_adding(len: usize, n: usize, rng: &mut Rng) -> Result<Vec<AddingExample>> {
    if len < 10 {
        return Err(Error::InvalidArgument(format!(
            "adding sequences need length >= 10, got {len}"
        )));
    }
    Ok((0..n)
        .map(|_| {
            let values: Vec<f64> = (0..len).map(|_| rng.uniform()).collect();
            let i = rng.index(0, len / 10 + 1);
            let j = rng.index(len / 2, len);
            let mut markers = vec![false; len];
            markers[i] = true;
            markers[j] = true;
            let target = values[i] + values[j];
            AddingExample {
                values,
                markers,
                target,
            }
        })
        .collect())
}

/// Two input channels per step: the value and its marker bit.
pub fn to_dataset(examples: &[AddingExample]) -> Dataset {
    let steps = examples.first().map_or(0, |e| e.values.len());
    let mut data = Vec::with_capacity(examples.len() * steps * 2);
    for e in examples {
        for (v, &m) in e.values.iter().zip(&e.markers) {
            data.push(*v);
            data.push(if m { 1.0 } else { 0.0 });
        }
    }
    Dataset {
        examples: Examples::Dense { dim: 2, steps, data },
        targets: Targets::Regression(examples.iter().map(|e| e.target).collect()),
    }
}

/// One line per example: `values;markers;target`, values space separated.
pub fn adding_csv(examples: &[AddingExample]) -> String {
    let mut out = String::from("values;markers;target\n");
    for e in examples {
        let vals: Vec<String> = e.values.iter().map(|v| v.to_string()).collect();
        let marks: Vec<&str> = e.markers.iter().map(|&m| if m { "1" } else { "0" }).collect();
        out.push_str(&format!("{};{};{}\n", vals.join(" "), marks.join(" "), e.target));
    }
    out
}
