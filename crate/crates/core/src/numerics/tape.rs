//! Tape-based reverse-mode differentiation over small dense vectors.
//!
//! Every node holds a vector value (scalars are length-1 vectors). Matrix
//! parameters never get copied onto the tape: [`Tape::linear`] reads them
//! straight out of the borrowed parameter slice, and [`Tape::backward`]
//! scatters their gradients into a flat vector with the same layout.

use super::mat::matvec_slice;
use super::nn::ParamRef;
use super::{sigmoid, softplus};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamRef),
    Linear {
        weight: ParamRef,
        bias: Option<ParamRef>,
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Square(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Dot(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Clamp {
        x: Var,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Min(Var, Var),
    Max(Var, Var),
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records one forward pass. Single writer; move it, never share it.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Gradients {
    pub params: Vec<f64>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to an arbitrary node, zero-filled
    /// if the node did not influence the loss.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.nodes[v.0].clone().unwrap_or_else(|| vec![0.0; len])
    }
}

fn same_len(op: &str, a: &[f64], b: &[f64]) {
    assert_eq!(
        a.len(),
        b.len(),
        "{op}: operand lengths differ ({} vs {})",
        a.len(),
        b.len()
    );
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1);
        value[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], Op::Constant)
    }

    /// The parameter tensor as a flat differentiable vector.
    pub fn param(&mut self, r: ParamRef) -> Var {
        let value = self.params[r.offset..r.offset + r.len()].to_vec();
        self.push(value, Op::Param(r))
    }

    /// `weight · x + bias`, weight read in place from the parameter slice.
    pub fn linear(&mut self, weight: ParamRef, bias: Option<ParamRef>, x: Var) -> Var {
        let w = &self.params[weight.offset..weight.offset + weight.len()];
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            xv.len(),
            weight.cols,
            "linear: input dim {} does not match weight cols {}",
            xv.len(),
            weight.cols
        );
        let mut y = matvec_slice(w, weight.rows, weight.cols, xv);
        if let Some(b) = bias {
            let bv = &self.params[b.offset..b.offset + b.len()];
            for (yi, bi) in y.iter_mut().zip(bv) {
                *yi += bi;
            }
        }
        self.push(y, Op::Linear { weight, bias, x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_len("add", av, bv);
        let y = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_len("sub", av, bv);
        let y = av.iter().zip(bv).map(|(x, y)| x - y).collect();
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_len("mul", av, bv);
        let y = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        self.push(y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).iter().map(|x| x * c).collect();
        self.push(y, Op::Scale(a, c))
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).iter().map(|x| x + c).collect();
        self.push(y, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(y, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(y, Op::Sigmoid(a))
    }

    /// `log σ(x) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|&x| -softplus(-x)).collect();
        self.push(y, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(y, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|x| x * x).collect();
        self.push(y, Op::Square(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.dim(p)).sum();
        let mut y = Vec::with_capacity(total);
        for &p in parts {
            y.extend_from_slice(self.value(p));
        }
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x)[start..start + len].to_vec();
        self.push(y, Op::Slice { x, start })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = vec![self.value(a).iter().sum()];
        self.push(y, Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_len("dot", av, bv);
        let y = vec![av.iter().zip(bv).map(|(x, y)| x * y).sum()];
        self.push(y, Op::Dot(a, b))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let y = super::nn::softmax_unchecked(self.value(a));
        self.push(y, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let y = super::nn::log_softmax_unchecked(self.value(a));
        self.push(y, Op::LogSoftmax(a))
    }

    /// Element-wise clamp into `[lo, hi]`; gradient passes where the input
    /// lies inside the closed interval.
    pub fn clamp(&mut self, x: Var, lo: Vec<f64>, hi: Vec<f64>) -> Var {
        let xv = self.value(x);
        same_len("clamp", xv, &lo);
        same_len("clamp", xv, &hi);
        let y = xv
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        self.push(y, Op::Clamp { x, lo, hi })
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_len("min", av, bv);
        let y = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        self.push(y, Op::Min(a, b))
    }

    /// Element-wise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_len("max", av, bv);
        let y = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        self.push(y, Op::Max(a, b))
    }

    /// `Σ_j weights[j] · items[j]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        let w = self.value(weights);
        assert_eq!(w.len(), items.len(), "weighted_sum: weight count");
        assert!(!items.is_empty(), "weighted_sum: no items");
        let dim = self.dim(items[0]);
        let mut y = vec![0.0; dim];
        for (j, &it) in items.iter().enumerate() {
            let v = self.value(it);
            assert_eq!(v.len(), dim, "weighted_sum: item dims differ");
            for (yi, vi) in y.iter_mut().zip(v) {
                *yi += w[j] * vi;
            }
        }
        self.push(
            y,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar (length-1) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.dim(loss), 1, "backward: loss must be scalar");
        let mut params = vec![0.0; self.params.len()];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(r) => {
                    for (p, gi) in params[r.offset..r.offset + r.len()].iter_mut().zip(&g) {
                        *p += gi;
                    }
                }
                Op::Linear { weight, bias, x } => {
                    let xv = &self.nodes[x.0].value;
                    let w = &self.params[weight.offset..weight.offset + weight.len()];
                    let (rows, cols) = (weight.rows, weight.cols);
                    {
                        let gw = &mut params[weight.offset..weight.offset + weight.len()];
                        for r in 0..rows {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            for (c, xc) in xv.iter().enumerate() {
                                gw[r * cols + c] += gr * xc;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        for (p, gi) in params[b.offset..b.offset + b.len()].iter_mut().zip(&g) {
                            *p += gi;
                        }
                    }
                    let gx = acc(&mut grads, *x, cols);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for (c, gxc) in gx.iter_mut().enumerate() {
                            *gxc += gr * w[r * cols + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    add_into(acc(&mut grads, *a, g.len()), &ga, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &gb, 1.0);
                }
                Op::Scale(a, c) => add_into(acc(&mut grads, *a, g.len()), &g, *c),
                Op::Offset(a) => add_into(acc(&mut grads, *a, g.len()), &g, 1.0),
                Op::Tanh(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, y)| gi * (1.0 - y * y))
                        .collect();
                    add_into(acc(&mut grads, *a, g.len()), &d, 1.0);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect();
                    add_into(acc(&mut grads, *a, g.len()), &d, 1.0);
                }
                Op::LogSigmoid(a) => {
                    let xv = &self.nodes[a.0].value;
                    let d: Vec<f64> = g.iter().zip(xv).map(|(gi, &x)| gi * sigmoid(-x)).collect();
                    add_into(acc(&mut grads, *a, g.len()), &d, 1.0);
                }
                Op::Exp(a) => {
                    let d: Vec<f64> = g.iter().zip(&node.value).map(|(gi, y)| gi * y).collect();
                    add_into(acc(&mut grads, *a, g.len()), &d, 1.0);
                }
                Op::Square(a) => {
                    let xv = &self.nodes[a.0].value;
                    let d: Vec<f64> = g.iter().zip(xv).map(|(gi, x)| 2.0 * gi * x).collect();
                    add_into(acc(&mut grads, *a, g.len()), &d, 1.0);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        add_into(acc(&mut grads, *p, len), &g[start..start + len], 1.0);
                        start += len;
                    }
                }
                Op::Slice { x, start } => {
                    let len = self.nodes[x.0].value.len();
                    let gx = acc(&mut grads, *x, len);
                    for (i, gi) in g.iter().enumerate() {
                        gx[start + i] += gi;
                    }
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    let gx = acc(&mut grads, *a, len);
                    gx.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::Dot(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let n = av.len();
                    let ga: Vec<f64> = bv.iter().map(|y| g[0] * y).collect();
                    let gb: Vec<f64> = av.iter().map(|y| g[0] * y).collect();
                    add_into(acc(&mut grads, *a, n), &ga, 1.0);
                    add_into(acc(&mut grads, *b, n), &gb, 1.0);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let d: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| yi * (gi - gy)).collect();
                    add_into(acc(&mut grads, *a, g.len()), &d, 1.0);
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, ly)| gi - ly.exp() * total)
                        .collect();
                    add_into(acc(&mut grads, *a, g.len()), &d, 1.0);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[x.0].value;
                    let d: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            if xv[i] >= lo[i] && xv[i] <= hi[i] {
                                *gi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    add_into(acc(&mut grads, *x, g.len()), &d, 1.0);
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        let pick_a = if is_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
                        if pick_a {
                            ga[i] = g[i];
                        } else {
                            gb[i] = g[i];
                        }
                    }
                    add_into(acc(&mut grads, *a, g.len()), &ga, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &gb, 1.0);
                }
                Op::WeightedSum { weights, items } => {
                    let w = self.nodes[weights.0].value.clone();
                    let gw: Vec<f64> = items
                        .iter()
                        .map(|it| self.nodes[it.0].value.iter().zip(&g).map(|(v, gi)| v * gi).sum())
                        .collect();
                    add_into(acc(&mut grads, *weights, w.len()), &gw, 1.0);
                    for (j, it) in items.iter().enumerate() {
                        add_into(acc(&mut grads, *it, g.len()), &g, w[j]);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { params, nodes: grads }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
