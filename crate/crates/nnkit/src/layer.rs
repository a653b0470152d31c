//! Layer variants and their forward/backward kernels.
//!
//! Shapes are per sample (no batch axis): dense layers take `[units]`,
//! spatial layers take `[channels, height, width]`. Convolutions are fixed
//! at 3×3 kernels, stride 1, padding 1, so they preserve spatial size.
//! Pooling is 2×2 with stride 2 and floors odd extents.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{RandomStream, Real, Tensor};

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_units: usize, out_units: usize },
    Conv2d { in_channels: usize, out_channels: usize },
    Relu,
    Sigmoid,
    Dropout { rate: f64 },
    MaxPool2d,
    GlobalMaxPerMap,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { in_units, out_units } => write!(f, "Dense({in_units}->{out_units})"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => write!(f, "Conv2d({in_channels}->{out_channels})"),
            LayerSpec::Relu => f.write_str("ReLU"),
            LayerSpec::Sigmoid => f.write_str("Sigmoid"),
            LayerSpec::Dropout { rate } => write!(f, "Dropout({rate})"),
            LayerSpec::MaxPool2d => f.write_str("MaxPool2d"),
            LayerSpec::GlobalMaxPerMap => f.write_str("GlobalMaxPerMap"),
            LayerSpec::Flatten => f.write_str("Flatten"),
        }
    }
}

impl LayerSpec {
    /// Output shape for a given input shape, or a reason the input is not accepted.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense { in_units, out_units } => {
                if in_units == 0 || out_units == 0 {
                    return Err("dense layer needs positive unit counts".into());
                }
                if input != [in_units] {
                    return Err(format!("expected input shape [{in_units}], got {input:?}"));
                }
                Ok(vec![out_units])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return Err("convolution needs positive channel counts".into());
                }
                match input {
                    [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                    _ => Err(format!("expected input shape [{in_channels}, H, W], got {input:?}")),
                }
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool2d => match input {
                [c, h, w] if *h >= POOL && *w >= POOL => Ok(vec![*c, h / POOL, w / POOL]),
                _ => Err(format!("expected [C, H, W] with H, W >= {POOL}, got {input:?}")),
            },
            LayerSpec::GlobalMaxPerMap => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => Err(format!("expected [C, H, W], got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Weight tensor shape for parametric layers.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { in_units, out_units } => Some(vec![out_units, in_units]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => Some(vec![out_channels, in_channels, KERNEL, KERNEL]),
            _ => None,
        }
    }

    pub fn bias_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { out_units, .. } => Some(vec![out_units]),
            LayerSpec::Conv2d { out_channels, .. } => Some(vec![out_channels]),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_units, .. } => in_units,
            LayerSpec::Conv2d { in_channels, .. } => in_channels * KERNEL * KERNEL,
            _ => 0,
        }
    }

    pub fn parameter_count(&self) -> usize {
        let w: usize = self.weight_shape().map(|s| s.iter().product()).unwrap_or(0);
        let b: usize = self.bias_shape().map(|s| s.iter().product()).unwrap_or(0);
        w + b
    }
}

/// Per-layer state recorded by the forward pass for use in backward.
#[derive(Clone, Debug)]
pub(crate) enum LayerAux<T> {
    None,
    /// Dropout multipliers (0 or 1/(1-rate)); `None` when the layer was an identity.
    Mask(Option<Vec<T>>),
    /// Flat input index of the winning element for each output element.
    Argmax(Vec<usize>),
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Forward kernel for one layer. `out_shape` was validated at network build.
pub(crate) fn forward<T: Real>(
    spec: &LayerSpec,
    weight: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
    input: &Tensor<T>,
    out_shape: &[usize],
    dropout_stream: Option<RandomStream>,
) -> (Tensor<T>, LayerAux<T>) {
    let x = input.data();
    match *spec {
        LayerSpec::Dense { in_units, out_units } => {
            let w = weight.expect("dense weight").data();
            let b = bias.expect("dense bias").data();
            let out: Vec<T> = (0..out_units)
                .map(|o| {
                    let row = &w[o * in_units..(o + 1) * in_units];
                    row.iter().zip(x).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
                })
                .collect();
            (tensor(out_shape, out), LayerAux::None)
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
        } => {
            let (h, wd) = (input.shape()[1], input.shape()[2]);
            let out = conv_forward(
                x,
                weight.expect("conv weight").data(),
                bias.expect("conv bias").data(),
                in_channels,
                out_channels,
                h,
                wd,
            );
            (tensor(out_shape, out), LayerAux::None)
        }
        LayerSpec::Relu => (
            input.map(|v| if v > T::zero() { v } else { T::zero() }),
            LayerAux::None,
        ),
        LayerSpec::Sigmoid => (input.map(sigmoid), LayerAux::None),
        LayerSpec::Dropout { rate } => match dropout_stream {
            Some(stream) if rate > 0.0 => {
                let mut rng = stream.rng();
                let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| {
                        if rng.random::<f64>() < rate {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                let out = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                (tensor(out_shape, out), LayerAux::Mask(Some(mask)))
            }
            _ => (input.clone(), LayerAux::Mask(None)),
        },
        LayerSpec::MaxPool2d => {
            let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow) = (h / POOL, w / POOL);
            let mut out = Vec::with_capacity(c * oh * ow);
            let mut arg = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                let base = ch * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = base + (oy * POOL) * w + ox * POOL;
                        let mut best = x[best_idx];
                        for dy in 0..POOL {
                            for dx in 0..POOL {
                                let idx = base + (oy * POOL + dy) * w + ox * POOL + dx;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_idx);
                    }
                }
            }
            (tensor(out_shape, out), LayerAux::Argmax(arg))
        }
        LayerSpec::GlobalMaxPerMap => {
            let c = input.shape()[0];
            let plane = x.len() / c;
            let mut out = Vec::with_capacity(c);
            let mut arg = Vec::with_capacity(c);
            for ch in 0..c {
                let map = &x[ch * plane..(ch + 1) * plane];
                let (mut best_idx, mut best) = (0, map[0]);
                for (i, &v) in map.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        best_idx = i;
                    }
                }
                out.push(best);
                arg.push(ch * plane + best_idx);
            }
            (tensor(out_shape, out), LayerAux::Argmax(arg))
        }
        LayerSpec::Flatten => (tensor(out_shape, x.to_vec()), LayerAux::None),
    }
}

/// Backward kernel for one layer: returns the input gradient and, for
/// parametric layers, the (weight, bias) gradients.
pub(crate) fn backward<T: Real>(
    spec: &LayerSpec,
    weight: Option<&Tensor<T>>,
    input: &Tensor<T>,
    output: &Tensor<T>,
    aux: &LayerAux<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Option<(Tensor<T>, Tensor<T>)>) {
    let x = input.data();
    let g = grad_out.data();
    let in_shape = input.shape();
    match *spec {
        LayerSpec::Dense { in_units, out_units } => {
            let w = weight.expect("dense weight").data();
            let mut gw = vec![T::zero(); out_units * in_units];
            let mut gx = vec![T::zero(); in_units];
            for o in 0..out_units {
                let go = g[o];
                let row = &w[o * in_units..(o + 1) * in_units];
                let grow = &mut gw[o * in_units..(o + 1) * in_units];
                for i in 0..in_units {
                    grow[i] = go * x[i];
                    gx[i] += row[i] * go;
                }
            }
            (
                tensor(in_shape, gx),
                Some((tensor(&[out_units, in_units], gw), tensor(&[out_units], g.to_vec()))),
            )
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
        } => {
            let (h, wd) = (in_shape[1], in_shape[2]);
            let (gx, gw, gb) = conv_backward(
                x,
                weight.expect("conv weight").data(),
                g,
                in_channels,
                out_channels,
                h,
                wd,
            );
            (
                tensor(in_shape, gx),
                Some((
                    tensor(&[out_channels, in_channels, KERNEL, KERNEL], gw),
                    tensor(&[out_channels], gb),
                )),
            )
        }
        LayerSpec::Relu => {
            let gx = x
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                .collect();
            (tensor(in_shape, gx), None)
        }
        LayerSpec::Sigmoid => {
            let gx = output
                .data()
                .iter()
                .zip(g)
                .map(|(&s, &gv)| gv * s * (T::one() - s))
                .collect();
            (tensor(in_shape, gx), None)
        }
        LayerSpec::Dropout { .. } => match aux {
            LayerAux::Mask(Some(mask)) => {
                let gx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                (tensor(in_shape, gx), None)
            }
            _ => (grad_out.clone().reshape(in_shape.to_vec()).expect("shape"), None),
        },
        LayerSpec::MaxPool2d | LayerSpec::GlobalMaxPerMap => {
            let LayerAux::Argmax(arg) = aux else {
                unreachable!("pooling layers always record argmax")
            };
            let mut gx = vec![T::zero(); x.len()];
            for (&idx, &gv) in arg.iter().zip(g) {
                gx[idx] += gv;
            }
            (tensor(in_shape, gx), None)
        }
        LayerSpec::Flatten => (tensor(in_shape, g.to_vec()), None),
    }
}

fn tensor<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("kernel output matches validated shape")
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo, hi.max(lo))
}

/// Unfolds a `[cin, h, w]` input into `[cin * 9, h * w]` patch columns (zero padded).
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, wd: usize) -> Vec<T> {
    let plane = h * wd;
    let mut col = vec![T::zero(); cin * KERNEL * KERNEL * plane];
    for ic in 0..cin {
        let in_plane = &x[ic * plane..(ic + 1) * plane];
        for ky in 0..KERNEL {
            let dy = ky as isize - 1;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..KERNEL {
                let dx = kx as isize - 1;
                let (x0, x1) = valid_range(wd, dx);
                let row = &mut col[((ic * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let src = (sy * wd) as isize + x0 as isize + dx;
                    row[y * wd + x0..y * wd + x1].copy_from_slice(&in_plane[src as usize..][..x1 - x0]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, wd: usize) -> Vec<T> {
    let plane = h * wd;
    let mut gx = vec![T::zero(); cin * plane];
    for ic in 0..cin {
        let gx_plane = &mut gx[ic * plane..(ic + 1) * plane];
        for ky in 0..KERNEL {
            let dy = ky as isize - 1;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..KERNEL {
                let dx = kx as isize - 1;
                let (x0, x1) = valid_range(wd, dx);
                let row = &col[((ic * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let dst = ((sy * wd) as isize + x0 as isize + dx) as usize;
                    for (d, &g) in gx_plane[dst..dst + (x1 - x0)].iter_mut().zip(&row[y * wd + x0..y * wd + x1]) {
                        *d += g;
                    }
                }
            }
        }
    }
    gx
}

fn conv_forward<T: Real>(x: &[T], w: &[T], b: &[T], cin: usize, cout: usize, h: usize, wd: usize) -> Vec<T> {
    let plane = h * wd;
    let col = im2col(x, cin, h, wd);
    let mut out = vec![T::zero(); cout * plane];
    for (oc, row) in out.chunks_exact_mut(plane).enumerate() {
        row.iter_mut().for_each(|v| *v = b[oc]);
    }
    T::matmul(cout, cin * KERNEL * KERNEL, plane, w, false, &col, false, &mut out, true);
    out
}

#[allow(clippy::type_complexity)]
fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = h * wd;
    let patch = cin * KERNEL * KERNEL;
    let col = im2col(x, cin, h, wd);
    let gb = g.chunks_exact(plane).map(|r| r.iter().copied().sum()).collect();
    let mut gw = vec![T::zero(); cout * patch];
    T::matmul(cout, plane, patch, g, false, &col, true, &mut gw, false);
    let mut gcol = vec![T::zero(); patch * plane];
    T::matmul(patch, cout, plane, w, true, g, false, &mut gcol, false);
    (col2im(&gcol, cin, h, wd), gw, gb)
}
