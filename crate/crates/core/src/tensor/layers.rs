use serde::{Deserialize, Serialize};

use super::{axpy, dot, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    /// Square-kernel 2-D convolution over a `[C, H, W]` input.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Square max pooling without padding.
    MaxPool { size: usize, stride: usize },
    Relu,
    /// Fully connected layer over the flattened input.
    Fc { inputs: usize, units: usize },
}

fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::ShapeMismatch(format!("{self:?} cannot take input {input:?}"));
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => match input {
                &[c, h, w] if c == in_channels && stride > 0 => {
                    let oh = conv_extent(h, kernel, stride, padding).ok_or_else(mismatch)?;
                    let ow = conv_extent(w, kernel, stride, padding).ok_or_else(mismatch)?;
                    Ok(vec![out_channels, oh, ow])
                }
                _ => Err(mismatch()),
            },
            LayerSpec::MaxPool { size, stride } => match input {
                &[c, h, w] if stride > 0 => {
                    let oh = conv_extent(h, size, stride, 0).ok_or_else(mismatch)?;
                    let ow = conv_extent(w, size, stride, 0).ok_or_else(mismatch)?;
                    Ok(vec![c, oh, ow])
                }
                _ => Err(mismatch()),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Fc { inputs, units } => {
                if input.iter().product::<usize>() == inputs {
                    Ok(vec![units])
                } else {
                    Err(mismatch())
                }
            }
        }
    }

    /// `(weight shape, bias shape)` for layers with parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerSpec::Fc { inputs, units } => Some((vec![units, inputs], vec![units])),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        self.param_shapes().is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Params<T> {
    pub fn zeros(spec: &LayerSpec) -> Option<Self> {
        spec.param_shapes().map(|(w, b)| Params {
            weight: Tensor::zeros(w),
            bias: Tensor::zeros(b),
        })
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    fn check(&self, spec: &LayerSpec) -> Result<()> {
        match spec.param_shapes() {
            Some((w, b)) if self.weight.shape() == w.as_slice() && self.bias.shape() == b.as_slice() => Ok(()),
            _ => Err(Error::ShapeMismatch(format!(
                "parameters {:?}/{:?} do not fit {spec:?}",
                self.weight.shape(),
                self.bias.shape()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like<T: Real>(p: &Params<T>) -> Self {
        ParamGrads {
            weight: vec![0.0; p.weight.len()],
            bias: vec![0.0; p.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        axpy(1.0, &other.weight, &mut self.weight);
        axpy(1.0, &other.bias, &mut self.bias);
    }
}

/// What a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv {
        /// im2col matrix, `[C*k*k, out_h*out_w]`.
        cols: Vec<f64>,
        input_shape: Vec<usize>,
        out_hw: (usize, usize),
    },
    Pool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Relu {
        mask: Vec<bool>,
    },
    Fc {
        input: Vec<f64>,
        input_shape: Vec<usize>,
    },
}

fn need_params<'a, T: Real>(spec: &LayerSpec, params: Option<&'a Params<T>>) -> Result<&'a Params<T>> {
    let p = params.ok_or_else(|| Error::ShapeMismatch(format!("{spec:?} requires parameters")))?;
    p.check(spec)?;
    Ok(p)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let p = oh * ow;
    let mut cols = vec![0.0; c * kernel * kernel * p];
    for ch in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &input[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize].to_f64();
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &[f64],
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let p = oh * ow;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let src = &dcols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Applies `spec` to `input`, returning the output and the backward cache.
pub fn forward<T: Real>(
    spec: &LayerSpec,
    params: Option<&Params<T>>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, Cache)> {
    let out_shape = spec.output_shape(input.shape())?;
    match *spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let p = need_params(spec, params)?;
            let (h, w) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let cols = im2col(input.data(), (in_channels, h, w), kernel, stride, padding, (oh, ow));
            let k = in_channels * kernel * kernel;
            let np = oh * ow;
            let weight = p.weight.data();
            let mut out = Vec::with_capacity(out_channels * np);
            let mut acc = vec![0.0; np];
            for o in 0..out_channels {
                acc.fill(p.bias.data()[o].to_f64());
                for kk in 0..k {
                    let wv = weight[o * k + kk].to_f64();
                    axpy(wv, &cols[kk * np..(kk + 1) * np], &mut acc);
                }
                out.extend(acc.iter().map(|&v| T::from_f64(v)));
            }
            Ok((
                Tensor::from_vec(out_shape, out)?,
                Cache::Conv {
                    cols,
                    input_shape: input.shape().to_vec(),
                    out_hw: (oh, ow),
                },
            ))
        }
        LayerSpec::MaxPool { size, stride } => {
            let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let data = input.data();
            let mut out = Vec::with_capacity(c * oh * ow);
            let mut argmax = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (ch * h + oy * stride) * w + ox * stride;
                        for dy in 0..size {
                            for dx in 0..size {
                                let i = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                                if data[i] > data[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(data[best]);
                        argmax.push(best);
                    }
                }
            }
            Ok((
                Tensor::from_vec(out_shape, out)?,
                Cache::Pool {
                    argmax,
                    input_shape: input.shape().to_vec(),
                },
            ))
        }
        LayerSpec::Relu => {
            let zero = T::default();
            let mask: Vec<bool> = input.data().iter().map(|&v| v > zero).collect();
            let out = input
                .data()
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| if m { v } else { zero })
                .collect();
            Ok((Tensor::from_vec(out_shape, out)?, Cache::Relu { mask }))
        }
        LayerSpec::Fc { inputs, units } => {
            let p = need_params(spec, params)?;
            let x = input.to_f64_vec();
            let weight = p.weight.data();
            let mut row = vec![0.0; inputs];
            let out = (0..units)
                .map(|u| {
                    for (r, w) in row.iter_mut().zip(&weight[u * inputs..(u + 1) * inputs]) {
                        *r = w.to_f64();
                    }
                    T::from_f64(p.bias.data()[u].to_f64() + dot(&row, &x))
                })
                .collect();
            Ok((
                Tensor::from_vec(out_shape, out)?,
                Cache::Fc {
                    input: x,
                    input_shape: input.shape().to_vec(),
                },
            ))
        }
    }
}

/// Exact gradients of `spec` at the point recorded in `cache`: returns the
/// gradient with respect to the input and, for parameterised layers, with
/// respect to weight and bias.
pub fn backward<T: Real>(
    spec: &LayerSpec,
    params: Option<&Params<T>>,
    cache: &Cache,
    grad_out: &Tensor<f64>,
) -> Result<(Tensor<f64>, Option<ParamGrads>)> {
    let (grad_in, grads) = backward_with(spec, params, cache, grad_out, true)?;
    Ok((grad_in.expect("input gradient requested"), grads))
}

/// As [`backward`], optionally skipping the input gradient (first layer).
pub(crate) fn backward_with<T: Real>(
    spec: &LayerSpec,
    params: Option<&Params<T>>,
    cache: &Cache,
    grad_out: &Tensor<f64>,
    need_input: bool,
) -> Result<(Option<Tensor<f64>>, Option<ParamGrads>)> {
    let stale = || Error::ShapeMismatch(format!("cache does not belong to {spec:?}"));
    match (*spec, cache) {
        (
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            Cache::Conv {
                cols,
                input_shape,
                out_hw,
            },
        ) => {
            let p = need_params(spec, params)?;
            let np = out_hw.0 * out_hw.1;
            let k = in_channels * kernel * kernel;
            if grad_out.len() != out_channels * np || cols.len() != k * np {
                return Err(stale());
            }
            let g = grad_out.data();
            let mut gw = vec![0.0; out_channels * k];
            let mut gb = vec![0.0; out_channels];
            for o in 0..out_channels {
                let go = &g[o * np..(o + 1) * np];
                gb[o] = go.iter().sum();
                for kk in 0..k {
                    gw[o * k + kk] = dot(go, &cols[kk * np..(kk + 1) * np]);
                }
            }
            let grad_in = if need_input {
                let weight = p.weight.data();
                let mut dcols = vec![0.0; k * np];
                for o in 0..out_channels {
                    let go = &g[o * np..(o + 1) * np];
                    for kk in 0..k {
                        axpy(weight[o * k + kk].to_f64(), go, &mut dcols[kk * np..(kk + 1) * np]);
                    }
                }
                let dims = (input_shape[0], input_shape[1], input_shape[2]);
                let gi = col2im(&dcols, dims, kernel, stride, padding, *out_hw);
                Some(Tensor::from_vec(input_shape.clone(), gi)?)
            } else {
                None
            };
            Ok((grad_in, Some(ParamGrads { weight: gw, bias: gb })))
        }
        (LayerSpec::MaxPool { .. }, Cache::Pool { argmax, input_shape }) => {
            if grad_out.len() != argmax.len() {
                return Err(stale());
            }
            let mut gi = vec![0.0; input_shape.iter().product()];
            for (&src, &g) in argmax.iter().zip(grad_out.data()) {
                gi[src] += g;
            }
            Ok((Some(Tensor::from_vec(input_shape.clone(), gi)?), None))
        }
        (LayerSpec::Relu, Cache::Relu { mask }) => {
            if grad_out.len() != mask.len() {
                return Err(stale());
            }
            let gi = grad_out
                .data()
                .iter()
                .zip(mask)
                .map(|(&g, &m)| if m { g } else { 0.0 })
                .collect();
            Ok((Some(Tensor::from_vec(grad_out.shape().to_vec(), gi)?), None))
        }
        (LayerSpec::Fc { inputs, units }, Cache::Fc { input, input_shape }) => {
            let p = need_params(spec, params)?;
            if grad_out.len() != units || input.len() != inputs {
                return Err(stale());
            }
            let g = grad_out.data();
            let mut gw = vec![0.0; units * inputs];
            for u in 0..units {
                axpy(g[u], input, &mut gw[u * inputs..(u + 1) * inputs]);
            }
            let grad_in = if need_input {
                let weight = p.weight.data();
                let mut gi = vec![0.0; inputs];
                let mut row = vec![0.0; inputs];
                for u in 0..units {
                    for (r, w) in row.iter_mut().zip(&weight[u * inputs..(u + 1) * inputs]) {
                        *r = w.to_f64();
                    }
                    axpy(g[u], &row, &mut gi);
                }
                Some(Tensor::from_vec(input_shape.clone(), gi)?)
            } else {
                None
            };
            Ok((grad_in, Some(ParamGrads { weight: gw, bias: g.to_vec() })))
        }
        _ => Err(stale()),
    }
}
