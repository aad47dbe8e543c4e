//! Reverse-mode record of one forward pass.
//!
//! Every builder method evaluates its layer immediately, stores the output
//! next to the operation that produced it, and returns the node index.
//! [`Tape::backward`] walks the record in reverse and accumulates parameter
//! gradients into a buffer aligned with the flat parameter vector.

use super::ops::{self, BnCache, ConvGeom, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv { x: NodeId, w: usize, g: ConvGeom },
    BatchNorm { x: NodeId, gamma: usize, beta: usize, cache: BnCache },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Shortcut { x: NodeId, stride: usize },
    Pool { x: NodeId },
    Linear { x: NodeId, w: usize, b: usize },
}

/// Batch statistics of one normalization layer, pending a running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// Offset of the layer's `[mean; var]` block in the running-statistics vector.
    pub running_offset: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    n_params: usize,
    grad: Vec<f64>,
    input_grads: Vec<(NodeId, Tensor)>,
    batch_stats: Vec<BatchStats>,
    skip_input_grads: bool,
}

impl Tape {
    pub fn new(n_params: usize) -> Self {
        Self {
            n_params,
            grad: vec![0.0; n_params],
            ..Default::default()
        }
    }

    /// Stops `backward` from propagating into input nodes. Convolutions fed
    /// directly by an input then compute only their weight gradient.
    pub fn set_input_gradients(&mut self, on: bool) {
        self.skip_input_grads = !on;
    }

    /// Drops the record and zeroes the gradient buffer.
    pub fn clear(&mut self, n_params: usize) {
        self.values.clear();
        self.ops.clear();
        self.input_grads.clear();
        self.batch_stats.clear();
        self.n_params = n_params;
        self.grad.clear();
        self.grad.resize(n_params, 0.0);
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    /// Output of the last recorded operation.
    pub fn output(&self) -> Option<&Tensor> {
        self.values.last()
    }

    pub fn gradient(&self) -> &[f64] {
        &self.grad
    }

    /// Gradient with respect to an input node, available after `backward`.
    pub fn input_gradient(&self, id: NodeId) -> Option<&Tensor> {
        self.input_grads.iter().find(|(i, _)| *i == id).map(|(_, t)| t)
    }

    /// Smallest `|x|` over all rectifier inputs recorded so far.
    pub fn min_relu_margin(&self) -> f64 {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Relu { x } => self.values[*x].data.iter().map(|v| v.abs()).reduce(f64::min),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn input(&mut self, x: Tensor) -> NodeId {
        self.push(x, Op::Input)
    }

    /// Bias-free convolution, weights at `params[w..w + g.n_weights()]`.
    pub fn conv(&mut self, params: &[f64], x: NodeId, w: usize, g: ConvGeom) -> NodeId {
        let y = ops::conv_forward(&self.values[x], &params[w..w + g.n_weights()], &g);
        self.push(y, Op::Conv { x, w, g })
    }

    /// Normalization with batch statistics (`running = None`) or with the
    /// given running `(mean, var)`. In batch mode the statistics are queued
    /// for a running-average update under `running_offset`.
    pub fn batch_norm(
        &mut self,
        params: &[f64],
        x: NodeId,
        gamma: usize,
        beta: usize,
        running: Option<(&[f64], &[f64])>,
        running_offset: usize,
    ) -> NodeId {
        let c = self.values[x].c;
        let (y, cache, stats) = ops::bn_forward(&self.values[x], &params[gamma..gamma + c], &params[beta..beta + c], running);
        if let Some((mean, var)) = stats {
            self.batch_stats.push(BatchStats {
                running_offset,
                mean,
                var,
            });
        }
        self.push(y, Op::BatchNorm { x, gamma, beta, cache })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu_forward(&self.values[x]);
        self.push(y, Op::Relu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.values[a].same_shape(&self.values[b]) {
            return Err(Error::Shape("residual add of mismatched tensors".into()));
        }
        let mut y = self.values[a].clone();
        for (o, v) in y.data.iter_mut().zip(&self.values[b].data) {
            *o += v;
        }
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn shortcut(&mut self, x: NodeId, stride: usize, cout: usize) -> NodeId {
        let y = ops::shortcut_forward(&self.values[x], stride, cout);
        self.push(y, Op::Shortcut { x, stride })
    }

    pub fn pool(&mut self, x: NodeId) -> NodeId {
        let y = ops::pool_forward(&self.values[x]);
        self.push(y, Op::Pool { x })
    }

    /// Affine layer on pooled features; `W` is `fout x fin` at `w`, bias at `b`.
    pub fn linear(&mut self, params: &[f64], x: NodeId, w: usize, b: usize, fout: usize) -> NodeId {
        let fin = self.values[x].c;
        let y = ops::linear_forward(&self.values[x], &params[w..w + fout * fin], &params[b..b + fout], fout);
        self.push(y, Op::Linear { x, w, b })
    }

    /// Backpropagates `upstream` (the loss gradient with respect to the last
    /// node's output) and returns the parameter gradient.
    pub fn backward(&mut self, params: &[f64], upstream: &[f64]) -> Result<&[f64]> {
        if self.values.is_empty() {
            return Err(Error::Usage("backward called before any forward pass was recorded".into()));
        }
        self.backward_at(params, self.values.len() - 1, upstream)
    }

    /// Like [`Tape::backward`] but seeded at an arbitrary recorded node.
    pub fn backward_at(&mut self, params: &[f64], node: NodeId, upstream: &[f64]) -> Result<&[f64]> {
        let Some(out) = self.values.get(node) else {
            return Err(Error::Usage(format!("node {node} has not been recorded")));
        };
        if upstream.len() != out.data.len() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} values, output has {}",
                upstream.len(),
                out.data.len()
            )));
        }
        if params.len() != self.n_params {
            return Err(Error::Shape(format!(
                "parameter vector has {} values, tape expects {}",
                params.len(),
                self.n_params
            )));
        }
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        self.input_grads.clear();

        let last = node;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        let o = &self.values[last];
        grads[last] = Some(Tensor::from_data(o.c, o.n, o.h, o.w, upstream.to_vec()));

        fn add_into(dst: &mut [f64], src: &[f64]) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }

        fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id] {
                Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=last).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Input if self.skip_input_grads => {}
                Op::Input => self.input_grads.push((id, dy)),
                Op::Conv { x, w, g } => {
                    let nw = g.n_weights();
                    let dw = &mut self.grad[*w..*w + nw];
                    if self.skip_input_grads && matches!(self.ops[*x], Op::Input) {
                        ops::conv_weight_grad(&self.values[*x], g, &dy, dw);
                    } else {
                        let dx = ops::conv_backward(&self.values[*x], &params[*w..*w + nw], g, &dy, dw);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let c = dy.c;
                    let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
                    let dx = ops::bn_backward(cache, &params[*gamma..*gamma + c], &dy, &mut dg, &mut db);
                    add_into(&mut self.grad[*gamma..*gamma + c], &dg);
                    add_into(&mut self.grad[*beta..*beta + c], &db);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(&self.values[*x], &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, dy.clone());
                    accumulate(&mut grads, *a, dy);
                }
                Op::Shortcut { x, stride } => {
                    let dx = ops::shortcut_backward(&self.values[*x], *stride, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Pool { x } => {
                    let dx = ops::pool_backward(&self.values[*x], &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let fin = self.values[*x].c;
                    let fout = dy.c;
                    let mut db = vec![0.0; fout];
                    let dx = ops::linear_backward(&self.values[*x], &params[*w..*w + fout * fin], &dy, &mut self.grad[*w..*w + fout * fin], &mut db);
                    add_into(&mut self.grad[*b..*b + fout], &db);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        self.input_grads.reverse();
        Ok(&self.grad)
    }
}
