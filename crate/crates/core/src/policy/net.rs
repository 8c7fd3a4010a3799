//! Per-element 1-D convolutional trunk with a hand-written backward pass.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PolicyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Zero padding on each side.
    pub padding: usize,
    pub relu: bool,
}

impl ConvLayer {
    pub fn n_weights(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel
    }

    pub fn n_params(&self) -> usize {
        self.n_weights() + self.out_channels
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        input_len + 2 * self.padding + 1 - self.kernel
    }
}

/// Layer stack mapping the `points_per_element` samples of one element to a
/// single scalar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub points_per_element: usize,
    pub layers: Vec<ConvLayer>,
}

impl Architecture {
    /// Zero-padded 3-tap conv with 8 filters, two unpadded 3-tap convs with 8
    /// and 4 filters, and a final conv whose kernel spans what is left.
    pub fn standard(points_per_element: usize) -> Result<Self, PolicyError> {
        if points_per_element < 5 {
            return Err(PolicyError::Architecture(format!(
                "need at least 5 points per element, got {points_per_element}"
            )));
        }
        let conv = |in_channels, out_channels, kernel, padding, relu| ConvLayer {
            in_channels,
            out_channels,
            kernel,
            padding,
            relu,
        };
        Ok(Self {
            points_per_element,
            layers: vec![
                conv(1, 8, 3, 1, true),
                conv(8, 8, 3, 0, true),
                conv(8, 4, 3, 0, true),
                conv(4, 1, points_per_element - 4, 0, false),
            ],
        })
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Architecture(m));
        let Some(first) = self.layers.first() else {
            return bad("no layers".into());
        };
        if first.in_channels != 1 {
            return bad("first layer must take one input channel".into());
        }
        let mut len = self.points_per_element;
        let mut channels = 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != channels || l.kernel == 0 || l.out_channels == 0 {
                return bad(format!("layer {i} has inconsistent channels or kernel"));
            }
            if len + 2 * l.padding < l.kernel {
                return bad(format!("layer {i} kernel exceeds its input"));
            }
            len = l.output_len(len);
            channels = l.out_channels;
        }
        if len != 1 || channels != 1 {
            return bad(format!("stack ends in {channels} channels x {len}, expected a scalar"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(ConvLayer::n_params).sum()
    }
}

/// Activations recorded by a forward pass: `inputs[l]` feeds layer `l`, and
/// `pre[l]` is its output before the activation.
struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn conv_forward(layer: &ConvLayer, params: &[f64], input: &[f64], in_len: usize) -> Vec<f64> {
    let out_len = layer.output_len(in_len);
    let (w, b) = params.split_at(layer.n_weights());
    let mut out = vec![0.0; layer.out_channels * out_len];
    for o in 0..layer.out_channels {
        for i in 0..out_len {
            let mut acc = b[o];
            for c in 0..layer.in_channels {
                let w_row = &w[(o * layer.in_channels + c) * layer.kernel..][..layer.kernel];
                let x = &input[c * in_len..(c + 1) * in_len];
                for (j, wj) in w_row.iter().enumerate() {
                    let pos = (i + j) as isize - layer.padding as isize;
                    if pos >= 0 && (pos as usize) < in_len {
                        acc += wj * x[pos as usize];
                    }
                }
            }
            out[o * out_len + i] = acc;
        }
    }
    out
}

/// Accumulates parameter gradients into `grad` and returns the gradient with
/// respect to the layer input.
fn conv_backward(
    layer: &ConvLayer,
    params: &[f64],
    input: &[f64],
    in_len: usize,
    d_out: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let out_len = layer.output_len(in_len);
    let nw = layer.n_weights();
    let w = &params[..nw];
    let (gw, gb) = grad.split_at_mut(nw);
    let mut d_in = vec![0.0; layer.in_channels * in_len];
    for o in 0..layer.out_channels {
        for i in 0..out_len {
            let g = d_out[o * out_len + i];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            for c in 0..layer.in_channels {
                let base = (o * layer.in_channels + c) * layer.kernel;
                for j in 0..layer.kernel {
                    let pos = (i + j) as isize - layer.padding as isize;
                    if pos >= 0 && (pos as usize) < in_len {
                        let p = c * in_len + pos as usize;
                        gw[base + j] += g * input[p];
                        d_in[p] += g * w[base + j];
                    }
                }
            }
        }
    }
    d_in
}

impl Architecture {
    fn forward_tape(&self, params: &[f64], element: &[f64]) -> (f64, Tape) {
        let mut tape = Tape { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::new() };
        let mut x = element.to_vec();
        let mut len = self.points_per_element;
        let mut offset = 0;
        for layer in &self.layers {
            let p = &params[offset..offset + layer.n_params()];
            let pre = conv_forward(layer, p, &x, len);
            let act = if layer.relu { pre.iter().map(|v| v.max(0.0)).collect() } else { pre.clone() };
            tape.inputs.push(std::mem::replace(&mut x, act));
            tape.pre.push(pre);
            len = layer.output_len(len);
            offset += layer.n_params();
        }
        (x[0], tape)
    }

    /// Scalar output for one element's samples.
    pub fn forward(&self, params: &[f64], element: &[f64]) -> f64 {
        self.forward_tape(params, element).0
    }

    /// Adds `d_output * d(output)/d(params)` into `grad`.
    pub fn backward(&self, params: &[f64], element: &[f64], d_output: f64, grad: &mut [f64]) {
        let (_, tape) = self.forward_tape(params, element);
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut lens = Vec::with_capacity(self.layers.len());
        let (mut off, mut len) = (0, self.points_per_element);
        for l in &self.layers {
            offsets.push(off);
            lens.push(len);
            off += l.n_params();
            len = l.output_len(len);
        }
        let mut d = vec![d_output];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                for (g, pre) in d.iter_mut().zip(&tape.pre[li]) {
                    if *pre <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let range = offsets[li]..offsets[li] + layer.n_params();
            d = conv_backward(
                layer,
                &params[range.clone()],
                &tape.inputs[li],
                lens[li],
                &d,
                &mut grad[range],
            );
        }
    }

    /// Orthogonal rows (or columns) per layer scaled by `sqrt(2)` for ReLU
    /// layers and `final_gain` for the output layer; zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R, final_gain: f64) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.n_params());
        for (i, layer) in self.layers.iter().enumerate() {
            let gain = if i + 1 == self.layers.len() { final_gain } else { std::f64::consts::SQRT_2 };
            let rows = layer.out_channels;
            let cols = layer.in_channels * layer.kernel;
            params.extend(orthogonal(rows, cols, rng).into_iter().map(|w| w * gain));
            params.extend(std::iter::repeat_n(0.0, layer.out_channels));
        }
        params
    }
}

/// `rows x cols` row-major matrix with orthonormal rows when `rows <= cols`,
/// orthonormal columns otherwise.
fn orthogonal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (n, d) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            vecs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    out
}
