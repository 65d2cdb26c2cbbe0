//! Dense layers over a single flat parameter buffer.
//!
//! Every trainable tensor is a named block inside one `Vec<f64>`, so the
//! optimizer, freeze masks and checkpoints all work on plain slices. Weight
//! blocks are column-major `out × in`; activations are `features × batch`.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
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

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
    total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let block = ParamBlock {
            name: name.into(),
            offset: self.total,
            rows,
            cols,
        };
        self.total += block.len();
        self.blocks.push(block);
        self.blocks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, id: usize) -> &ParamBlock {
        &self.blocks[id]
    }

    pub fn find(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn view<'a>(&self, params: &'a [f64], id: usize) -> DMatrixView<'a, f64> {
        let b = &self.blocks[id];
        DMatrixView::from_slice(&params[b.range()], b.rows, b.cols)
    }

    pub fn view_mut<'a>(&self, params: &'a mut [f64], id: usize) -> DMatrixViewMut<'a, f64> {
        let b = &self.blocks[id];
        DMatrixViewMut::from_slice(&mut params[b.range()], b.rows, b.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(layout: &mut ParamLayout, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = layout.push(format!("{name}.weight"), outputs, inputs);
        let bias = layout.push(format!("{name}.bias"), outputs, 1);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, layout: &ParamLayout, params: &[f64], input: &DMatrix<f64>) -> DMatrix<f64> {
        let w = layout.view(params, self.weight);
        let b = layout.view(params, self.bias);
        let mut out = w * input;
        for mut col in out.column_iter_mut() {
            col += &b.column(0);
        }
        out
    }

    /// Accumulates weight and bias gradients into `grads`, returns the
    /// gradient with respect to the input.
    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        input: &DMatrix<f64>,
        grad_out: &DMatrix<f64>,
        grads: &mut [f64],
    ) -> DMatrix<f64> {
        {
            let mut gw = layout.view_mut(grads, self.weight);
            gw.gemm(1.0, grad_out, &input.transpose(), 1.0);
        }
        {
            let mut gb = layout.view_mut(grads, self.bias);
            let sums = grad_out.column_sum();
            gb.column_mut(0).axpy(1.0, &sums, 1.0);
        }
        layout.view(params, self.weight).tr_mul(grad_out)
    }

    /// Uniform fan-in initialisation, bias zero.
    pub fn init_uniform<R: Rng + ?Sized>(&self, layout: &ParamLayout, params: &mut [f64], rng: &mut R, gain: f64) {
        let bound = gain / (self.inputs as f64).sqrt();
        for w in params[layout.block(self.weight).range()].iter_mut() {
            *w = rng.random_range(-bound..=bound);
        }
        params[layout.block(self.bias).range()].fill(0.0);
    }

    pub fn fill(&self, layout: &ParamLayout, params: &mut [f64], weight: f64, bias: f64) {
        params[layout.block(self.weight).range()].fill(weight);
        params[layout.block(self.bias).range()].fill(bias);
    }

    pub fn fill_bias(&self, layout: &ParamLayout, params: &mut [f64], value: f64) {
        params[layout.block(self.bias).range()].fill(value);
    }

    pub fn set_bias(&self, layout: &ParamLayout, params: &mut [f64], bias: &DVector<f64>) {
        params[layout.block(self.bias).range()].copy_from_slice(bias.as_slice());
    }
}

/// Feed-forward stack with `tanh` between layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// Apply `tanh` after the last layer too.
    pub activate_output: bool,
}

/// Layer inputs kept from the forward pass; `inputs[i]` feeds `layers[i]`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub inputs: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl Mlp {
    pub fn new(layout: &mut ParamLayout, name: &str, widths: &[usize], activate_output: bool) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(layout, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self {
            layers,
            activate_output,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.activate_output
    }

    pub fn forward(&self, layout: &ParamLayout, params: &[f64], input: &DMatrix<f64>) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.forward(layout, params, &current);
            if self.activated(i) {
                next.apply(|v| *v = v.tanh());
            }
            inputs.push(current);
            current = next;
        }
        MlpTrace {
            inputs,
            output: current,
        }
    }

    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        trace: &MlpTrace,
        grad_output: DMatrix<f64>,
        grads: &mut [f64],
    ) -> DMatrix<f64> {
        let mut grad = grad_output;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.activated(i) {
                let out = if i + 1 < self.layers.len() {
                    &trace.inputs[i + 1]
                } else {
                    &trace.output
                };
                grad.zip_apply(out, |g, a| *g *= 1.0 - a * a);
            }
            grad = layer.backward(layout, params, &trace.inputs[i], &grad, grads);
        }
        grad
    }

    pub fn init_uniform<R: Rng + ?Sized>(&self, layout: &ParamLayout, params: &mut [f64], rng: &mut R) {
        for layer in &self.layers {
            layer.init_uniform(layout, params, rng, 1.0);
        }
    }
}
