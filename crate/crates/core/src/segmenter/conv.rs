//! Same-padded 2-D convolutions on channel-planar buffers, forward and
//! reverse.

use super::{LayerSpec, LogitMap, NetSpec};
use crate::error::Result;
use crate::imaging::Image;

/// Activations recorded by the forward pass: the input to every layer,
/// channel-planar.
#[derive(Debug, Clone)]
pub struct Tape {
    height: usize,
    width: usize,
    inputs: Vec<Vec<f64>>,
    /// Output of the final layer (pre-logit reshape), planar.
    output: Vec<f64>,
    relu: Vec<bool>,
}

impl Tape {
    /// Sign pattern of every ReLU unit (true = active). The network is
    /// differentiable wherever this pattern is locally constant.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for (l, &relu) in self.relu.iter().enumerate() {
            if relu {
                let out = self.inputs.get(l + 1).unwrap_or(&self.output);
                pattern.extend(out.iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `d`.
#[inline]
fn valid_range(extent: usize, pad: usize, d: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (extent + pad).saturating_sub(d).min(extent);
    (lo, hi.max(lo))
}

fn conv_forward(layer: &LayerSpec, params: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ci, co, k) = (layer.in_channels, layer.out_channels, layer.kernel);
    let pad = k / 2;
    let plane = h * w;
    let (weights, biases) = params.split_at(layer.weight_count());
    let mut out = vec![0.0; co * plane];
    for o in 0..co {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(biases[o]);
        for i in 0..ci {
            let src = &input[i * plane..(i + 1) * plane];
            for dy in 0..k {
                let (ylo, yhi) = valid_range(h, pad, dy);
                for dx in 0..k {
                    let wt = weights[((o * ci + i) * k + dy) * k + dx];
                    if wt == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(w, pad, dx);
                    if xlo == xhi {
                        continue;
                    }
                    for y in ylo..yhi {
                        let sy = y + dy - pad;
                        let d = &mut dst[y * w + xlo..y * w + xhi];
                        let s = &src[sy * w + xlo + dx - pad..sy * w + xhi + dx - pad];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += wt * b;
                        }
                    }
                }
            }
        }
        if layer.relu {
            dst.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    out
}

/// Accumulates parameter gradients into `grad_params` and, if requested,
/// returns the gradient with respect to the layer input.
fn conv_backward(
    layer: &LayerSpec,
    params: &[f64],
    input: &[f64],
    grad_out: &[f64],
    h: usize,
    w: usize,
    grad_params: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let (ci, co, k) = (layer.in_channels, layer.out_channels, layer.kernel);
    let pad = k / 2;
    let plane = h * w;
    let nw = layer.weight_count();
    let weights = &params[..nw];
    let (gw, gb) = grad_params.split_at_mut(nw);
    let mut grad_in = want_input_grad.then(|| vec![0.0; ci * plane]);

    for o in 0..co {
        let go = &grad_out[o * plane..(o + 1) * plane];
        gb[o] += go.iter().sum::<f64>();
        for i in 0..ci {
            let src = &input[i * plane..(i + 1) * plane];
            for dy in 0..k {
                let (ylo, yhi) = valid_range(h, pad, dy);
                for dx in 0..k {
                    let (xlo, xhi) = valid_range(w, pad, dx);
                    if xlo == xhi {
                        continue;
                    }
                    let widx = ((o * ci + i) * k + dy) * k + dx;
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let sy = y + dy - pad;
                        let g = &go[y * w + xlo..y * w + xhi];
                        let s = &src[sy * w + xlo + dx - pad..sy * w + xhi + dx - pad];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[widx] += acc;

                    if let Some(gi) = grad_in.as_mut() {
                        let wt = weights[widx];
                        if wt == 0.0 {
                            continue;
                        }
                        let gi = &mut gi[i * plane..(i + 1) * plane];
                        for y in ylo..yhi {
                            let sy = y + dy - pad;
                            let g = &go[y * w + xlo..y * w + xhi];
                            let d = &mut gi[sy * w + xlo + dx - pad..sy * w + xhi + dx - pad];
                            for (a, b) in d.iter_mut().zip(g) {
                                *a += wt * b;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub(super) fn forward(spec: &NetSpec, params: &[f64], image: &Image) -> Result<(LogitMap, Tape)> {
    let (h, w) = (image.height(), image.width());
    let offsets = spec.offsets();
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut current = image.to_planar();
    for (layer, &start) in spec.layers.iter().zip(&offsets) {
        let next = conv_forward(layer, &params[start..start + layer.param_count()], &current, h, w);
        inputs.push(std::mem::replace(&mut current, next));
    }
    let k = spec.classes();
    let plane = h * w;
    let mut values = vec![0.0; plane * k];
    for c in 0..k {
        for p in 0..plane {
            values[p * k + c] = current[c * plane + p];
        }
    }
    let logits = LogitMap::new(h, w, k, values)?;
    let tape = Tape {
        height: h,
        width: w,
        inputs,
        output: current,
        relu: spec.layers.iter().map(|l| l.relu).collect(),
    };
    Ok((logits, tape))
}

pub(super) fn backward(spec: &NetSpec, params: &[f64], tape: &Tape, grad_logits: &[f64]) -> Vec<f64> {
    let (h, w) = (tape.height, tape.width);
    let plane = h * w;
    let k = spec.classes();
    let offsets = spec.offsets();
    let mut grad_params = vec![0.0; params.len()];

    let mut grad = vec![0.0; plane * k];
    for c in 0..k {
        for p in 0..plane {
            grad[c * plane + p] = grad_logits[p * k + c];
        }
    }
    for l in (0..spec.layers.len()).rev() {
        let layer = &spec.layers[l];
        if layer.relu {
            let out = tape.inputs.get(l + 1).unwrap_or(&tape.output);
            for (g, &a) in grad.iter_mut().zip(out) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let range = offsets[l]..offsets[l] + layer.param_count();
        let grad_in = conv_backward(
            layer,
            &params[range.clone()],
            &tape.inputs[l],
            &grad,
            h,
            w,
            &mut grad_params[range],
            l > 0,
        );
        match grad_in {
            Some(g) => grad = g,
            None => break,
        }
    }
    grad_params
}
