use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{dot, NumericsError, Result};

/// Location and shape of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named contiguous range of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Section {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Allocates tensors into one flat parameter vector, grouped in sections.
pub struct ParamBuilder<'r, R: Rng> {
    data: Vec<f64>,
    sections: Vec<Section>,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            data: Vec::new(),
            sections: Vec::new(),
            rng,
        }
    }

    /// Closes the previous section (if any) and opens a new one.
    pub fn section(&mut self, name: &str) {
        self.close_section();
        self.sections.push(Section {
            name: name.to_string(),
            start: self.data.len(),
            end: self.data.len(),
        });
    }

    fn close_section(&mut self) {
        if let Some(last) = self.sections.last_mut() {
            last.end = self.data.len();
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> ParamRef {
        let r = ParamRef {
            offset: self.data.len(),
            rows,
            cols,
        };
        for _ in 0..rows * cols {
            let z: f64 = self.rng.sample(StandardNormal);
            self.data.push(std * z);
        }
        r
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> ParamRef {
        let r = ParamRef {
            offset: self.data.len(),
            rows,
            cols,
        };
        self.data.extend(std::iter::repeat_n(0.0, rows * cols));
        r
    }

    /// Dense layer with `N(0, gain²/fan_in)` weights and zero bias.
    pub fn linear(&mut self, input: usize, output: usize, gain: f64) -> Linear {
        let std = gain / (input as f64).sqrt();
        let weight = self.normal(output, input, std);
        let bias = Some(self.zeros(output, 1));
        Linear { weight, bias }
    }

    pub fn mlp(&mut self, dims: &[usize], activation: Activation, activate_output: bool) -> Mlp {
        let layers = dims.windows(2).map(|w| self.linear(w[0], w[1], 1.0)).collect();
        Mlp {
            layers,
            activation,
            activate_output,
        }
    }

    pub fn finish(mut self) -> (Vec<f64>, Vec<Section>) {
        self.close_section();
        (self.data, self.sections)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamRef,
    pub bias: Option<ParamRef>,
}

impl Linear {
    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.linear(self.weight, self.bias, x)
    }
}

/// Stack of dense layers with an activation between consecutive layers
/// and optionally after the last one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }
}

fn activate(tape: &mut Tape, act: Activation, x: Var) -> Var {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Identity => x,
    }
}

pub fn mlp_forward(mlp: &Mlp, x: Var, tape: &mut Tape) -> Result<Var> {
    let found = tape.dim(x);
    if found != mlp.input_dim() {
        return Err(NumericsError::DimMismatch {
            op: "mlp_forward",
            expected: mlp.input_dim(),
            found,
        });
    }
    let mut h = x;
    let n = mlp.layers.len();
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = layer.forward(tape, h);
        if i + 1 < n || mlp.activate_output {
            h = activate(tape, mlp.activation, h);
        }
    }
    Ok(h)
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn log_softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(NumericsError::Empty("softmax"));
    }
    Ok(softmax_unchecked(z))
}

pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(NumericsError::Empty("log_softmax"));
    }
    Ok(log_softmax_unchecked(z))
}

fn check_attention_dims(query: usize, keys: &[usize], values: &[usize]) -> Result<()> {
    if keys.is_empty() {
        return Err(NumericsError::Empty("attention"));
    }
    if keys.len() != values.len() {
        return Err(NumericsError::DimMismatch {
            op: "attention values",
            expected: keys.len(),
            found: values.len(),
        });
    }
    if let Some(&bad) = keys.iter().find(|&&k| k != query) {
        return Err(NumericsError::DimMismatch {
            op: "attention key",
            expected: query,
            found: bad,
        });
    }
    if let Some(&bad) = values.iter().find(|&&v| v != values[0]) {
        return Err(NumericsError::DimMismatch {
            op: "attention value",
            expected: values[0],
            found: bad,
        });
    }
    Ok(())
}

/// Scaled dot-product attention of one query over a set of key/value pairs.
pub fn attention(query: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let kd: Vec<usize> = keys.iter().map(Vec::len).collect();
    let vd: Vec<usize> = values.iter().map(Vec::len).collect();
    check_attention_dims(query.len(), &kd, &vd)?;
    let scale = 1.0 / (query.len() as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| dot(query, k) * scale).collect();
    let w = softmax_unchecked(&scores);
    let mut out = vec![0.0; values[0].len()];
    for (wj, v) in w.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += wj * x;
        }
    }
    Ok(out)
}

/// [`attention`] recorded on a tape.
pub fn tape_attention(tape: &mut Tape, query: Var, keys: &[Var], values: &[Var]) -> Result<Var> {
    let kd: Vec<usize> = keys.iter().map(|&k| tape.dim(k)).collect();
    let vd: Vec<usize> = values.iter().map(|&v| tape.dim(v)).collect();
    check_attention_dims(tape.dim(query), &kd, &vd)?;
    let scale = 1.0 / (tape.dim(query) as f64).sqrt();
    let scores: Vec<Var> = keys
        .iter()
        .map(|&k| {
            let s = tape.dot(query, k);
            tape.scale(s, scale)
        })
        .collect();
    let scores = tape.concat(&scores);
    let w = tape.softmax(scores);
    Ok(tape.weighted_sum(w, values))
}
