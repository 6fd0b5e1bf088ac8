//! A small feed-forward network over `f64` with hand-written backprop.
//!
//! All parameters live in one flat vector so optimizers, EMA teachers,
//! checkpoints and finite-difference checks can treat them uniformly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Samples per parallel work unit. Fixed so gradient sums are reduced in the
/// same order regardless of thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        offset: usize,
    },
    /// 3x3 convolution, stride 1, zero padding 1.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        offset: usize,
    },
    Relu,
    /// 2x2 max pooling, stride 2.
    MaxPool2 {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Layer {
    fn param_count(&self) -> usize {
        match *self {
            Layer::Dense {
                inputs, outputs, ..
            } => inputs * outputs + outputs,
            Layer::Conv3x3 {
                in_channels,
                out_channels,
                ..
            } => out_channels * in_channels * 9 + out_channels,
            Layer::Relu | Layer::MaxPool2 { .. } => 0,
        }
    }
}

/// Layer stack plus flat parameters. The last layer is the dense output
/// layer; its input is the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    #[serde(skip)]
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty trace")
    }

    /// Input to the output layer.
    pub fn embedding(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

/// Incrementally assembles a layer stack, assigning parameter offsets.
#[derive(Debug)]
pub struct NetworkBuilder {
    input_dim: usize,
    layers: Vec<Layer>,
    n_params: usize,
}

impl NetworkBuilder {
    pub fn new(input_dim: usize) -> Self {
        NetworkBuilder {
            input_dim,
            layers: Vec::new(),
            n_params: 0,
        }
    }

    fn push(mut self, layer: Layer) -> Self {
        self.n_params += layer.param_count();
        self.layers.push(layer);
        self
    }

    pub fn dense(self, inputs: usize, outputs: usize) -> Self {
        let offset = self.n_params;
        self.push(Layer::Dense {
            inputs,
            outputs,
            offset,
        })
    }

    pub fn conv3x3(self, in_channels: usize, out_channels: usize, height: usize, width: usize) -> Self {
        let offset = self.n_params;
        self.push(Layer::Conv3x3 {
            in_channels,
            out_channels,
            height,
            width,
            offset,
        })
    }

    pub fn relu(self) -> Self {
        self.push(Layer::Relu)
    }

    pub fn max_pool2(self, channels: usize, height: usize, width: usize) -> Self {
        self.push(Layer::MaxPool2 {
            channels,
            height,
            width,
        })
    }

    /// He-normal weights, zero biases, drawn in layer order from `seed`.
    pub fn build(self, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.n_params];
        for layer in &self.layers {
            let (offset, n_weights, fan_in) = match *layer {
                Layer::Dense {
                    inputs,
                    outputs,
                    offset,
                } => (offset, inputs * outputs, inputs),
                Layer::Conv3x3 {
                    in_channels,
                    out_channels,
                    offset,
                    ..
                } => (offset, out_channels * in_channels * 9, in_channels * 9),
                _ => continue,
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for w in &mut params[offset..offset + n_weights] {
                *w = normal.sample(&mut rng);
            }
        }
        Network {
            input_dim: self.input_dim,
            layers: self.layers,
            params,
        }
    }
}

impl Network {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn output_dim(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { outputs, .. }) => *outputs,
            _ => panic!("network must end in a dense layer"),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { inputs, .. }) => *inputs,
            _ => panic!("network must end in a dense layer"),
        }
    }

    /// Forward pass for one sample using `params` (normally `self.params`).
    pub fn forward_with(&self, params: &[f64], input: &[f64]) -> Trace {
        assert_eq!(input.len(), self.input_dim, "input length");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let x = acts.last().expect("input pushed");
            let y = layer_forward(layer, params, x);
            acts.push(y);
        }
        Trace { acts }
    }

    pub fn forward(&self, input: &[f64]) -> Trace {
        self.forward_with(&self.params, input)
    }

    /// Forward passes for a batch, in parallel, preserving order.
    pub fn forward_batch_with(&self, params: &[f64], inputs: &[&[f64]]) -> Vec<Trace> {
        inputs
            .par_iter()
            .map(|x| self.forward_with(params, x))
            .collect()
    }

    pub fn forward_batch(&self, inputs: &[&[f64]]) -> Vec<Trace> {
        self.forward_batch_with(&self.params, inputs)
    }

    /// Accumulates `d loss / d params` for one sample into `grad`.
    pub fn backward(&self, trace: &Trace, d_output: &[f64], grad: &mut [f64]) {
        let mut delta = d_output.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.acts[i];
            let y = &trace.acts[i + 1];
            delta = layer_backward(layer, &self.params, x, y, &delta, grad, i > 0);
        }
    }

    /// Sums per-sample gradients of a batch into `grad`. Samples whose
    /// output gradient is `None` are skipped.
    pub fn backward_batch(&self, traces: &[Trace], d_outputs: &[Option<Vec<f64>>], grad: &mut [f64]) {
        assert_eq!(traces.len(), d_outputs.len(), "batch alignment");
        let n = self.num_params();
        let partials: Vec<Vec<f64>> = traces
            .par_chunks(CHUNK)
            .zip(d_outputs.par_chunks(CHUNK))
            .map(|(ts, ds)| {
                let mut g = vec![0.0; n];
                for (t, d) in ts.iter().zip(ds) {
                    if let Some(d) = d {
                        self.backward(t, d, &mut g);
                    }
                }
                g
            })
            .collect();
        for p in partials {
            for (acc, v) in grad.iter_mut().zip(p) {
                *acc += v;
            }
        }
    }
}

fn layer_forward(layer: &Layer, params: &[f64], x: &[f64]) -> Vec<f64> {
    match *layer {
        Layer::Dense {
            inputs,
            outputs,
            offset,
        } => {
            let w = &params[offset..offset + inputs * outputs];
            let b = &params[offset + inputs * outputs..offset + inputs * outputs + outputs];
            (0..outputs)
                .map(|o| {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        }
        Layer::Conv3x3 {
            in_channels,
            out_channels,
            height,
            width,
            offset,
        } => {
            let nw = out_channels * in_channels * 9;
            let w = &params[offset..offset + nw];
            let b = &params[offset + nw..offset + nw + out_channels];
            let plane = height * width;
            let mut y = vec![0.0; out_channels * plane];
            for oc in 0..out_channels {
                let out = &mut y[oc * plane..(oc + 1) * plane];
                out.iter_mut().for_each(|v| *v = b[oc]);
                for ic in 0..in_channels {
                    let inp = &x[ic * plane..(ic + 1) * plane];
                    let k = &w[(oc * in_channels + ic) * 9..(oc * in_channels + ic + 1) * 9];
                    for r in 0..height {
                        for c in 0..width {
                            let mut s = 0.0;
                            for dy in 0..3 {
                                let rr = r + dy;
                                if rr < 1 || rr > height {
                                    continue;
                                }
                                for dx in 0..3 {
                                    let cc = c + dx;
                                    if cc < 1 || cc > width {
                                        continue;
                                    }
                                    s += k[dy * 3 + dx] * inp[(rr - 1) * width + cc - 1];
                                }
                            }
                            out[r * width + c] += s;
                        }
                    }
                }
            }
            y
        }
        Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Layer::MaxPool2 {
            channels,
            height,
            width,
        } => {
            let (oh, ow) = (height / 2, width / 2);
            let mut y = vec![0.0; channels * oh * ow];
            for ch in 0..channels {
                let inp = &x[ch * height * width..(ch + 1) * height * width];
                for r in 0..oh {
                    for c in 0..ow {
                        let i = (2 * r) * width + 2 * c;
                        let m = inp[i].max(inp[i + 1]).max(inp[i + width]).max(inp[i + width + 1]);
                        y[ch * oh * ow + r * ow + c] = m;
                    }
                }
            }
            y
        }
    }
}

/// Returns `d loss / d x` (empty when `need_input_grad` is false) and
/// accumulates parameter gradients.
fn layer_backward(
    layer: &Layer,
    params: &[f64],
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    grad: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    match *layer {
        Layer::Dense {
            inputs,
            outputs,
            offset,
        } => {
            let nw = inputs * outputs;
            let mut dx = if need_input_grad { vec![0.0; inputs] } else { Vec::new() };
            for o in 0..outputs {
                let d = dy[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[offset + o * inputs..offset + (o + 1) * inputs];
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[offset + nw + o] += d;
                if need_input_grad {
                    let row = &params[offset + o * inputs..offset + (o + 1) * inputs];
                    for (dxi, w) in dx.iter_mut().zip(row) {
                        *dxi += d * w;
                    }
                }
            }
            dx
        }
        Layer::Conv3x3 {
            in_channels,
            out_channels,
            height,
            width,
            offset,
        } => {
            let nw = out_channels * in_channels * 9;
            let plane = height * width;
            let mut dx = if need_input_grad {
                vec![0.0; in_channels * plane]
            } else {
                Vec::new()
            };
            for oc in 0..out_channels {
                let dout = &dy[oc * plane..(oc + 1) * plane];
                grad[offset + nw + oc] += dout.iter().sum::<f64>();
                for ic in 0..in_channels {
                    let inp = &x[ic * plane..(ic + 1) * plane];
                    let kbase = offset + (oc * in_channels + ic) * 9;
                    for dyy in 0..3 {
                        for dxx in 0..3 {
                            let mut gk = 0.0;
                            let w = params[kbase + dyy * 3 + dxx];
                            for r in 0..height {
                                let rr = r + dyy;
                                if rr < 1 || rr > height {
                                    continue;
                                }
                                for c in 0..width {
                                    let cc = c + dxx;
                                    if cc < 1 || cc > width {
                                        continue;
                                    }
                                    let d = dout[r * width + c];
                                    let src = (rr - 1) * width + cc - 1;
                                    gk += d * inp[src];
                                    if need_input_grad {
                                        dx[ic * plane + src] += d * w;
                                    }
                                }
                            }
                            grad[kbase + dyy * 3 + dxx] += gk;
                        }
                    }
                }
            }
            dx
        }
        Layer::Relu => x
            .iter()
            .zip(dy)
            .map(|(&xi, &d)| if xi > 0.0 { d } else { 0.0 })
            .collect(),
        Layer::MaxPool2 {
            channels,
            height,
            width,
        } => {
            let (oh, ow) = (height / 2, width / 2);
            let mut dx = vec![0.0; channels * height * width];
            for ch in 0..channels {
                let base = ch * height * width;
                for r in 0..oh {
                    for c in 0..ow {
                        let o = ch * oh * ow + r * ow + c;
                        let i = base + (2 * r) * width + 2 * c;
                        // route to the first maximal input
                        let winner = [i, i + 1, i + width, i + width + 1]
                            .into_iter()
                            .find(|&j| x[j] == y[o])
                            .expect("max comes from the window");
                        dx[winner] += dy[o];
                    }
                }
            }
            dx
        }
    }
}
