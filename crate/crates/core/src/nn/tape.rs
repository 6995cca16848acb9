//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its adjoint. Feature maps are rank-3 `C×H×W` tensors
//! (batch size is always one); loss nodes are rank-0 scalars that also keep
//! an `f64` copy of their value.

use crate::error::{Error, Result};
use crate::nn::kernels::{col2im, gemm, im2col, mat, mat_t, Window};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        win: Window,
        cols: Vec<f32>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        // sliding window over the *output* map
        win: Window,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Charbonnier {
        a: Var,
        b: Var,
        eps: f64,
    },
    HyperLaplacian {
        x: Var,
        alpha: f64,
        delta: f64,
    },
    L2Norm {
        x: Var,
    },
    Weighted {
        terms: Vec<(Var, f64)>,
    },
    External {
        x: Var,
        grad: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    scalar: f64,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let scalar = if value.len() == 1 {
            value.data()[0] as f64
        } else {
            f64::NAN
        };
        self.nodes.push(Node {
            value,
            scalar,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Tensor::scalar(value as f32),
            scalar: value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Full-precision value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].scalar
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(shape_err(format!("conv weight {ws:?} for input {c}×{h}×{wd}")));
        }
        let (o, k) = (ws[0], ws[2]);
        if self.value(b).shape() != [o] {
            return Err(shape_err(format!(
                "conv bias {:?}, expected [{o}]",
                self.value(b).shape()
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(format!("kernel {k} larger than padded input {h}×{wd}")));
        }
        let win = Window {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let n = win.positions();
        let mut cols = vec![0.0; win.patch_len() * n];
        im2col(self.value(x).data(), &win, &mut cols);
        let mut out = vec![0.0; o * n];
        for (row, bias) in out.chunks_mut(n).zip(self.value(b).data()) {
            row.fill(*bias);
        }
        gemm(
            o,
            win.patch_len(),
            n,
            mat(self.value(w).data()),
            mat(&cols),
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![o, win.out_h(), win.out_w()], out)?;
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        // column matrix is only needed for the weight gradient
        let cols = if self.ng(w) { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv { x, w, b, win, cols }, needs))
    }

    /// Transposed convolution; weight layout is `in × out × k × k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (ci, hi, wi) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != ci || ws[2] != ws[3] {
            return Err(shape_err(format!(
                "transposed conv weight {ws:?} for input {ci}×{hi}×{wi}"
            )));
        }
        let (co, k) = (ws[1], ws[2]);
        if self.value(b).shape() != [co] {
            return Err(shape_err(format!("transposed conv bias {:?}", self.value(b).shape())));
        }
        let ho = (hi - 1) * stride + k + out_pad - 2 * pad;
        let wo = (wi - 1) * stride + k + out_pad - 2 * pad;
        let win = Window {
            c: co,
            h: ho,
            w: wo,
            k,
            stride,
            pad,
        };
        debug_assert_eq!(win.out_h(), hi);
        debug_assert_eq!(win.out_w(), wi);
        let n = hi * wi;
        let mut cols = vec![0.0; win.patch_len() * n];
        gemm(
            win.patch_len(),
            ci,
            n,
            mat_t(self.value(w).data()),
            mat(self.value(x).data()),
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; co * ho * wo];
        col2im(&cols, &win, &mut out);
        let plane = ho * wo;
        for (ch, bias) in out.chunks_mut(plane).zip(self.value(b).data()) {
            ch.iter_mut().for_each(|v| *v += *bias);
        }
        let value = Tensor::new(vec![co, ho, wo], out)?;
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::ConvTranspose { x, w, b, win }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { a * slope }).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(x);
        self.push(value, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// Channel-wise concatenation of `C_i×H×W` maps.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(parts[0]).chw()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err(format!("concat spatial {ph}×{pw} vs {h}×{w}")));
            }
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![channels, h, w], data)?;
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, needs))
    }

    /// `(C·r²)×H×W → C×(H·r)×(W·r)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (cin, h, w) = self.value(x).chw()?;
        if cin % (r * r) != 0 {
            return Err(shape_err(format!("pixel shuffle of {cin} channels by {r}")));
        }
        let c = cin / (r * r);
        let src = self.value(x).data();
        let mut out = vec![0.0; cin * h * w];
        let (oh, ow) = (h * r, w * r);
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = &src[((ch * r + i) * r + j) * h * w..][..h * w];
                    for y in 0..h {
                        let dst = &mut out[(ch * oh + y * r + i) * ow..][..ow];
                        for xx in 0..w {
                            dst[xx * r + j] = plane[y * w + xx];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::PixelShuffle { x, r }, needs))
    }

    /// Mean of `sqrt((a-b)² + eps²)`.
    pub fn charbonnier(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("charbonnier {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let value = crate::objectives::charbonnier_slices(va.data(), vb.data(), eps);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push_scalar(value, Op::Charbonnier { a, b, eps }, needs))
    }

    pub fn hyper_laplacian(&mut self, x: Var, alpha: f64, delta: f64) -> Result<Var> {
        let value = crate::objectives::hyper_laplacian_tensor(self.value(x), alpha, delta)?;
        let needs = self.ng(x);
        Ok(self.push_scalar(value, Op::HyperLaplacian { x, alpha, delta }, needs))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let value = crate::objectives::l2_norm_slice(self.value(x).data());
        let needs = self.ng(x);
        self.push_scalar(value, Op::L2Norm { x }, needs)
    }

    /// `Σ weight·term` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let needs = terms.iter().any(|&(v, _)| self.ng(v));
        self.push_scalar(value, Op::Weighted { terms: terms.to_vec() }, needs)
    }

    /// Scalar computed outside the tape, with its gradient w.r.t. `x` supplied.
    pub fn external(&mut self, x: Var, value: f64, grad: Vec<f32>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(shape_err(format!(
                "external gradient has {} entries for a tensor of {}",
                grad.len(),
                self.value(x).len()
            )));
        }
        let needs = self.ng(x);
        Ok(self.push_scalar(value, Op::External { x, grad }, needs))
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, win, cols } => {
                let o = node.value.shape()[0];
                let n = win.positions();
                let k = win.patch_len();
                self.accumulate(grads, *b, |db| {
                    for (d, row) in db.iter_mut().zip(g.chunks(n)) {
                        *d += row.iter().sum::<f32>();
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    gemm(o, n, k, mat(g), mat_t(cols), 1.0, dw);
                });
                if self.ng(*x) {
                    let mut dcols = vec![0.0; k * n];
                    gemm(k, o, n, mat_t(self.value(*w).data()), mat(g), 0.0, &mut dcols);
                    self.accumulate(grads, *x, |dx| col2im(&dcols, win, dx));
                }
            }
            Op::ConvTranspose { x, w, b, win } => {
                let ci = self.value(*x).shape()[0];
                let n = win.positions();
                let k = win.patch_len();
                let plane = win.h * win.w;
                self.accumulate(grads, *b, |db| {
                    for (d, ch) in db.iter_mut().zip(g.chunks(plane)) {
                        *d += ch.iter().sum::<f32>();
                    }
                });
                if self.ng(*x) || self.ng(*w) {
                    let mut gcols = vec![0.0; k * n];
                    im2col(g, win, &mut gcols);
                    self.accumulate(grads, *x, |dx| {
                        gemm(ci, k, n, mat(self.value(*w).data()), mat(&gcols), 1.0, dx);
                    });
                    self.accumulate(grads, *w, |dw| {
                        gemm(ci, n, k, mat(self.value(*x).data()), mat_t(&gcols), 1.0, dw);
                    });
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += if xi > 0.0 { gi } else { gi * slope };
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[offset..offset + len];
                    self.accumulate(grads, p, |d| d.iter_mut().zip(slice).for_each(|(d, gi)| *d += gi));
                    offset += len;
                }
            }
            Op::PixelShuffle { x, r } => {
                let r = *r;
                let (cin, h, w) = self.value(*x).chw().expect("rank 3");
                let c = cin / (r * r);
                let (oh, ow) = (h * r, w * r);
                self.accumulate(grads, *x, |dx| {
                    for ch in 0..c {
                        for i in 0..r {
                            for j in 0..r {
                                let plane = &mut dx[((ch * r + i) * r + j) * h * w..][..h * w];
                                for y in 0..h {
                                    let src = &g[(ch * oh + y * r + i) * ow..][..ow];
                                    for xx in 0..w {
                                        plane[y * w + xx] += src[xx * r + j];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Charbonnier { a, b, eps } => {
                let up = g[0] as f64;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let n = va.len() as f64;
                let eps2 = eps * eps;
                let local: Vec<f32> = va
                    .iter()
                    .zip(vb)
                    .map(|(&p, &q)| {
                        let d = p as f64 - q as f64;
                        (up * d / (d * d + eps2).sqrt() / n) as f32
                    })
                    .collect();
                self.accumulate(grads, *a, |d| d.iter_mut().zip(&local).for_each(|(d, l)| *d += l));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(&local).for_each(|(d, l)| *d -= l));
            }
            Op::HyperLaplacian { x, alpha, delta } => {
                let up = g[0] as f64;
                let xv = self.value(*x);
                self.accumulate(grads, *x, |dx| {
                    crate::objectives::hyper_laplacian_grad_into(xv, *alpha, *delta, up, dx)
                        .expect("validated in forward");
                });
            }
            Op::L2Norm { x } => {
                let norm = node.scalar;
                if norm > 0.0 {
                    let s = g[0] as f64 / norm;
                    let xv = self.value(*x).data();
                    self.accumulate(grads, *x, |d| {
                        d.iter_mut().zip(xv).for_each(|(d, &v)| *d += (s * v as f64) as f32)
                    });
                }
            }
            Op::Weighted { terms } => {
                for &(v, w) in terms {
                    let gv = (g[0] as f64 * w) as f32;
                    self.accumulate(grads, v, |d| d[0] += gv);
                }
            }
            Op::External { x, grad } => {
                let up = g[0];
                self.accumulate(grads, *x, |d| d.iter_mut().zip(grad).for_each(|(d, &l)| *d += up * l));
            }
        }
    }
}
