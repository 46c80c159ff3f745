//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output tensor and
//! whatever context its backward rule needs (pooling winners, padding).
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for [`Graph::backward`].
//!
//! ```
//! use unet_vos::autodiff::Graph;
//! use unet_vos::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(&[1, 1, 1, 2], vec![-1.0, 2.0]).unwrap());
//! let y = g.relu(x);
//! let coeffs = Tensor::new(&[1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
//! let s = g.project(y, &coeffs).unwrap();
//! g.backward(s).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::ops::{self, Pad2d, Window};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kind plus saved backward context.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        window: Window,
    },
    TransposedConv2d {
        input: Var,
        weight: Var,
        bias: Var,
        /// Geometry of the adjoint convolution (output map -> input plane).
        window: Window,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
    CropConcat {
        skip: Var,
        up: Var,
        offset: (usize, usize),
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    /// Scalar `sum(input * coeffs)`.
    Project {
        input: Var,
        coeffs: Vec<f64>,
    },
    /// Scalar loss whose gradient w.r.t. `input` was computed alongside the value.
    Loss {
        input: Var,
        grad: Vec<f64>,
    },
}

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower/upper bound applied to sigmoid outputs so they stay strictly inside (0, 1).
pub const SIGMOID_FLOOR: f64 = 1e-15;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient buffer on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Which side of each non-differentiable point the recorded pass took:
    /// the sign of every ReLU input and every max-pool selection. Two passes
    /// with equal patterns lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => out.extend(self.value(*input).data().iter().map(|&v| u32::from(v > 0.0))),
                Op::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_padded(input, weight, bias, stride, Pad2d::uniform(padding))
    }

    /// Convolution with per-side padding (used for even "same" kernels).
    pub fn conv2d_padded(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: Pad2d) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {cin} channels but weight {:?} expects {wcin}",
                    self.value(weight).shape()
                ),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias {:?} does not match {cout} output channels",
                    self.value(bias).shape()
                ),
            ));
        }
        let window = Window::new(cin, h, w, kh, kw, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} does not fit {h}x{w} with padding {pad:?}"),
            )
        })?;
        let (plane_in, plane_out) = (cin * h * w, cout * window.out_len());
        let mut out = vec![0.0; n * plane_out];
        let mut cols = Vec::new();
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            for i in 0..n {
                ops::conv_forward(
                    &x[i * plane_in..(i + 1) * plane_in],
                    wt,
                    b,
                    &window,
                    &mut out[i * plane_out..(i + 1) * plane_out],
                    &mut cols,
                );
            }
        }
        let value = Tensor::new(&[n, cout, window.out_h, window.out_w], out)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                window,
            },
            rg,
        ))
    }

    /// Transposed convolution with weight `[Cin, Cout, kh, kw]` and no padding.
    pub fn transposed_conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4("transposed_conv2d")?;
        let [wcin, cout, kh, kw] = self.value(weight).dims4("transposed_conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "transposed_conv2d",
                format!(
                    "input has {cin} channels but weight {:?} expects {wcin}",
                    self.value(weight).shape()
                ),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                "transposed_conv2d",
                format!(
                    "bias {:?} does not match {cout} output channels",
                    self.value(bias).shape()
                ),
            ));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid("transposed_conv2d needs positive stride and kernel"));
        }
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let window = Window::new(cout, oh, ow, kh, kw, stride, Pad2d::default()).expect("adjoint window always fits");
        debug_assert_eq!((window.out_h, window.out_w), (h, w));
        let (plane_in, plane_out) = (cin * h * w, cout * oh * ow);
        let mut out = vec![0.0; n * plane_out];
        let mut cols = Vec::new();
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            for i in 0..n {
                ops::conv_transpose_forward(
                    &x[i * plane_in..(i + 1) * plane_in],
                    wt,
                    b,
                    cin,
                    &window,
                    &mut out[i * plane_out..(i + 1) * plane_out],
                    &mut cols,
                );
            }
        }
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::TransposedConv2d {
                input,
                weight,
                bias,
                window,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("maxpool2d")?;
        if window > h || window > w {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {window} larger than spatial extent {h}x{w}"),
            ));
        }
        let g = Window::new(c, h, w, window, window, stride, Pad2d::default())
            .ok_or_else(|| Error::invalid("maxpool2d needs positive window and stride"))?;
        let (plane_in, plane_out) = (c * h * w, c * g.out_len());
        let mut out = vec![0.0; n * plane_out];
        let mut argmax = vec![0u32; n * plane_out];
        let x = self.value(input).data();
        for i in 0..n {
            ops::maxpool_forward(
                &x[i * plane_in..(i + 1) * plane_in],
                &g,
                &mut out[i * plane_out..(i + 1) * plane_out],
                &mut argmax[i * plane_out..(i + 1) * plane_out],
            );
            // Make winner indices absolute within the batch tensor.
            for a in &mut argmax[i * plane_out..(i + 1) * plane_out] {
                *a += (i * plane_in) as u32;
            }
        }
        let value = Tensor::new(&[n, c, g.out_h, g.out_w], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be at least 1"));
        }
        let (plane_in, plane_out) = (c * h * w, c * h * w * factor * factor);
        let mut out = vec![0.0; n * plane_out];
        let x = self.value(input).data();
        for i in 0..n {
            ops::upsample_forward(
                &x[i * plane_in..(i + 1) * plane_in],
                c,
                h,
                w,
                factor,
                &mut out[i * plane_out..(i + 1) * plane_out],
            );
        }
        let value = Tensor::new(&[n, c, h * factor, w * factor], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::UpsampleNearest { input, factor }, rg))
    }

    /// Center-crops `skip` to `up`'s spatial size (floor offsets) and
    /// concatenates `[skip, up]` along channels.
    pub fn crop_concat(&mut self, skip: Var, up: Var) -> Result<Var> {
        let [n1, c1, h1, w1] = self.value(skip).dims4("crop_concat")?;
        let [n2, c2, h2, w2] = self.value(up).dims4("crop_concat")?;
        if n1 != n2 {
            return Err(Error::shape("crop_concat", format!("batch {n1} vs {n2}")));
        }
        if h1 < h2 || w1 < w2 {
            return Err(Error::shape(
                "crop_concat",
                format!("skip {h1}x{w1} is smaller than upsampled {h2}x{w2}"),
            ));
        }
        let (oy, ox) = ((h1 - h2) / 2, (w1 - w2) / 2);
        let plane = h2 * w2;
        let c = c1 + c2;
        let mut out = vec![0.0; n1 * c * plane];
        let s = self.value(skip).data();
        let u = self.value(up).data();
        for i in 0..n1 {
            let dst = &mut out[i * c * plane..(i + 1) * c * plane];
            for ch in 0..c1 {
                let src = &s[(i * c1 + ch) * h1 * w1..(i * c1 + ch + 1) * h1 * w1];
                for y in 0..h2 {
                    let row = &src[(y + oy) * w1 + ox..(y + oy) * w1 + ox + w2];
                    dst[ch * plane + y * w2..ch * plane + (y + 1) * w2].copy_from_slice(row);
                }
            }
            dst[c1 * plane..].copy_from_slice(&u[i * c2 * plane..(i + 1) * c2 * plane]);
        }
        let value = Tensor::new(&[n1, c, h2, w2], out)?;
        let rg = self.needs(&[skip, up]);
        Ok(self.push(
            value,
            Op::CropConcat {
                skip,
                up,
                offset: (oy, ox),
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Logistic activation; outputs are clamped to
    /// `[SIGMOID_FLOOR, 1 - SIGMOID_FLOOR]`.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| ops::sigmoid(v).clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR))
            .collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    /// Scalar `sum(input * coeffs)`; the usual way to reduce a tensor to a
    /// scalar for gradient checks.
    pub fn project(&mut self, input: Var, coeffs: &Tensor) -> Result<Var> {
        if self.value(input).shape() != coeffs.shape() {
            return Err(Error::shape(
                "project",
                format!("{:?} vs {:?}", self.value(input).shape(), coeffs.shape()),
            ));
        }
        let s = self.value(input).dot(coeffs);
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Project {
                input,
                coeffs: coeffs.data().to_vec(),
            },
            rg,
        ))
    }

    /// Attaches a precomputed scalar loss and its gradient w.r.t. `input`.
    pub fn loss(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::shape(
                "loss",
                format!(
                    "gradient has {} entries for {:?}",
                    grad.len(),
                    self.value(input).shape()
                ),
            ));
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::Loss { input, grad }, rg))
    }

    /// Back-propagates from the scalar `root`, leaving gradient buffers on
    /// every node that requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", self.value(root).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut cols = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    window,
                } => {
                    let x = self.value(*input);
                    let wt = self.value(*weight);
                    let n = x.shape()[0];
                    let cout = wt.shape()[0];
                    let (plane_in, plane_out) = (x.len() / n, cout * window.out_len());
                    let want_x = self.nodes[input.0].requires_grad;
                    let mut gx = want_x.then(|| vec![0.0; x.len()]);
                    let mut gw = vec![0.0; wt.len()];
                    let mut gb = vec![0.0; cout];
                    for i in 0..n {
                        ops::conv_backward(
                            &x.data()[i * plane_in..(i + 1) * plane_in],
                            wt.data(),
                            &upstream[i * plane_out..(i + 1) * plane_out],
                            window,
                            gx.as_mut().map(|g| &mut g[i * plane_in..(i + 1) * plane_in]),
                            &mut gw,
                            &mut gb,
                            &mut cols,
                        );
                    }
                    let (input, weight, bias) = (*input, *weight, *bias);
                    if let Some(gx) = gx {
                        accumulate(&mut grads, input, gx);
                    }
                    accumulate(&mut grads, weight, gw);
                    accumulate(&mut grads, bias, gb);
                }
                Op::TransposedConv2d {
                    input,
                    weight,
                    bias,
                    window,
                } => {
                    let x = self.value(*input);
                    let wt = self.value(*weight);
                    let [n, cin, _, _] = x.dims4("transposed_conv2d")?;
                    let cout = wt.shape()[1];
                    let plane_in = x.len() / n;
                    let plane_out = cout * window.height * window.width;
                    let want_x = self.nodes[input.0].requires_grad;
                    let mut gx = want_x.then(|| vec![0.0; x.len()]);
                    let mut gw = vec![0.0; wt.len()];
                    let mut gb = vec![0.0; cout];
                    for i in 0..n {
                        ops::conv_transpose_backward(
                            &x.data()[i * plane_in..(i + 1) * plane_in],
                            wt.data(),
                            &upstream[i * plane_out..(i + 1) * plane_out],
                            cin,
                            window,
                            gx.as_mut().map(|g| &mut g[i * plane_in..(i + 1) * plane_in]),
                            &mut gw,
                            &mut gb,
                            &mut cols,
                        );
                    }
                    let (input, weight, bias) = (*input, *weight, *bias);
                    if let Some(gx) = gx {
                        accumulate(&mut grads, input, gx);
                    }
                    accumulate(&mut grads, weight, gw);
                    accumulate(&mut grads, bias, gb);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut gx = vec![0.0; self.value(*input).len()];
                    for (&a, &g) in argmax.iter().zip(&upstream) {
                        gx[a as usize] += g;
                    }
                    let input = *input;
                    accumulate(&mut grads, input, gx);
                }
                Op::UpsampleNearest { input, factor } => {
                    let [n, c, h, w] = self.value(*input).dims4("upsample_nearest")?;
                    let mut gx = vec![0.0; n * c * h * w];
                    let (plane_in, plane_out) = (c * h * w, c * h * w * factor * factor);
                    for i in 0..n {
                        ops::upsample_backward(
                            &upstream[i * plane_out..(i + 1) * plane_out],
                            c,
                            h,
                            w,
                            *factor,
                            &mut gx[i * plane_in..(i + 1) * plane_in],
                        );
                    }
                    let input = *input;
                    accumulate(&mut grads, input, gx);
                }
                Op::CropConcat { skip, up, offset } => {
                    let [n, c1, h1, w1] = self.value(*skip).dims4("crop_concat")?;
                    let [_, c2, h2, w2] = self.value(*up).dims4("crop_concat")?;
                    let (oy, ox) = *offset;
                    let plane = h2 * w2;
                    let c = c1 + c2;
                    let mut gs = vec![0.0; n * c1 * h1 * w1];
                    let mut gu = vec![0.0; n * c2 * plane];
                    for i in 0..n {
                        let src = &upstream[i * c * plane..(i + 1) * c * plane];
                        for ch in 0..c1 {
                            let dst = &mut gs[(i * c1 + ch) * h1 * w1..(i * c1 + ch + 1) * h1 * w1];
                            for y in 0..h2 {
                                dst[(y + oy) * w1 + ox..(y + oy) * w1 + ox + w2]
                                    .copy_from_slice(&src[ch * plane + y * w2..ch * plane + (y + 1) * w2]);
                            }
                        }
                        gu[i * c2 * plane..(i + 1) * c2 * plane].copy_from_slice(&src[c1 * plane..]);
                    }
                    let (skip, up) = (*skip, *up);
                    if self.nodes[skip.0].requires_grad {
                        accumulate(&mut grads, skip, gs);
                    }
                    if self.nodes[up.0].requires_grad {
                        accumulate(&mut grads, up, gu);
                    }
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    let gx = x
                        .iter()
                        .zip(&upstream)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    let input = *input;
                    accumulate(&mut grads, input, gx);
                }
                Op::Sigmoid { input } => {
                    let y = node.value.data();
                    let gx = y.iter().zip(&upstream).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                    let input = *input;
                    accumulate(&mut grads, input, gx);
                }
                Op::Project { input, coeffs } => {
                    let g = upstream[0];
                    let gx = coeffs.iter().map(|c| c * g).collect();
                    let input = *input;
                    accumulate(&mut grads, input, gx);
                }
                Op::Loss { input, grad } => {
                    let g = upstream[0];
                    let gx = grad.iter().map(|d| d * g).collect();
                    let input = *input;
                    accumulate(&mut grads, input, gx);
                }
            }
            self.nodes[idx].value.set_grad(upstream);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
