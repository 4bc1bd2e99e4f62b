//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass
//! together with a closure that maps the output gradient back onto the
//! inputs. [`Graph::backward`] replays the tape in reverse.

use super::conv::{self, ConvGeometry};
use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-6;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates the given output gradients through the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            let node = self
                .nodes
                .get(v.0)
                .ok_or_else(|| Error::Shape(format!("unknown variable {}", v.0)))?;
            if node.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} does not match value {:?}",
                    g.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &inputs, &node.value, &needs);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if self.nodes[p].requires_grad {
                        accumulate(&mut grads[p], g);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let out = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    /// `x[..., T, D] + p[T, D]`, broadcasting `p` over leading axes.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (vx, vp) = (self.value(x), self.value(p));
        let plen = vp.len();
        if vx.rank() < vp.rank() || vx.shape()[vx.rank() - vp.rank()..] != *vp.shape() {
            return Err(Error::Shape(format!("add_broadcast: {:?} vs {:?}", vx.shape(), vp.shape())));
        }
        let mut out = vx.clone();
        for chunk in out.data_mut().chunks_mut(plen) {
            for (o, &q) in chunk.iter_mut().zip(vp.data()) {
                *o += q;
            }
        }
        let pshape = vp.shape().to_vec();
        Ok(self.push(
            out,
            &[x, p],
            Box::new(move |g, _, _, needs| {
                let dp = needs[1].then(|| {
                    let mut acc = Tensor::zeros(&pshape);
                    for chunk in g.data().chunks(plen) {
                        for (a, &v) in acc.data_mut().iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![needs[0].then(|| g.clone()), dp]
            }),
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Var {
        let out = self.value(x).map(f);
        self.push(
            out,
            &[x],
            Box::new(move |g, inputs, out, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(inputs[0].data())
                    .zip(out.data())
                    .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::ZERO), |xv, _| if xv > T::ZERO { T::ONE } else { T::ZERO })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::ONE - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, gelu_grad)
    }

    // ----- dense -------------------------------------------------------

    /// `x[..., Din] · w[Din, Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vw.rank() != 2 || vb.shape() != [vw.dim(1)] || vx.shape().last() != Some(&vw.dim(0)) {
            return Err(Error::Shape(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let (din, dout) = (vw.dim(0), vw.dim(1));
        let rows = vx.len() / din;
        let mut data = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            data.extend_from_slice(vb.data());
        }
        gemm(false, false, rows, dout, din, T::ONE, vx.data(), vw.data(), T::ONE, &mut data);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            &[x, w, b],
            Box::new(move |g, inputs, _, needs| {
                let (vx, vw) = (inputs[0], inputs[1]);
                let dx = needs[0].then(|| {
                    let mut d = Tensor::zeros(vx.shape());
                    gemm(false, true, rows, din, dout, T::ONE, g.data(), vw.data(), T::ZERO, d.data_mut());
                    d
                });
                let dw = needs[1].then(|| {
                    let mut d = Tensor::zeros(&[din, dout]);
                    gemm(true, false, din, dout, rows, T::ONE, vx.data(), g.data(), T::ZERO, d.data_mut());
                    d
                });
                let db = needs[2].then(|| {
                    let mut d = Tensor::zeros(&[dout]);
                    for row in g.data().chunks(dout) {
                        for (a, &v) in d.data_mut().iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    d
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape().last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::Shape(format!("layer_norm: x {:?}, gamma {:?}", vx.shape(), vg.shape())));
        }
        let eps = T::from_f64(LN_EPS);
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let (mean, inv_std) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * vg.data()[j] + vb.data()[j];
            }
        }
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, inputs, _, needs| {
                let (vx, vg) = (inputs[0], inputs[1]);
                let dn = T::from_f64(d as f64);
                let mut dx = needs[0].then(|| Tensor::zeros(vx.shape()));
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                let mut xhat = vec![T::ZERO; d];
                for (r, (xrow, grow)) in vx.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let (mean, inv_std) = row_stats(xrow, eps);
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_xhat = T::ZERO;
                    for j in 0..d {
                        xhat[j] = (xrow[j] - mean) * inv_std;
                        dgamma.data_mut()[j] += grow[j] * xhat[j];
                        dbeta.data_mut()[j] += grow[j];
                        let dxh = grow[j] * vg.data()[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let drow = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = grow[j] * vg.data()[j];
                            drow[j] = inv_std * (dxh - sum_dxhat / dn - xhat[j] * sum_dxhat_xhat / dn);
                        }
                    }
                }
                vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            }),
        ))
    }

    /// Multi-head scaled dot-product self-attention core.
    ///
    /// `qkv` is `[N, T, 3D]` laid out as `[q | k | v]`; returns the `[N, T, D]`
    /// context and the attention probabilities `[N, heads, T, T]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<(Var, Tensor<T>)> {
        let v = self.value(qkv);
        if v.rank() != 3 || v.dim(2) % 3 != 0 || heads == 0 || (v.dim(2) / 3) % heads != 0 {
            return Err(Error::Shape(format!("attention: qkv {:?} with {} heads", v.shape(), heads)));
        }
        let (n, t, d3) = (v.dim(0), v.dim(1), v.dim(2));
        let d = d3 / 3;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[n, t, d]);
        let mut probs = Tensor::zeros(&[n, heads, t, t]);
        let mut q = vec![T::ZERO; t * dh];
        let mut k = vec![T::ZERO; t * dh];
        let mut vv = vec![T::ZERO; t * dh];
        let mut ctx = vec![T::ZERO; t * dh];
        for b in 0..n {
            let src = &v.data()[b * t * d3..(b + 1) * t * d3];
            for h in 0..heads {
                gather_head(src, t, d3, h * dh, dh, &mut q);
                gather_head(src, t, d3, d + h * dh, dh, &mut k);
                gather_head(src, t, d3, 2 * d + h * dh, dh, &mut vv);
                let p = &mut probs.data_mut()[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                gemm(false, true, t, t, dh, scale, &q, &k, T::ZERO, p);
                for row in p.chunks_mut(t) {
                    softmax_in_place(row);
                }
                gemm(false, false, t, dh, t, T::ONE, p, &vv, T::ZERO, &mut ctx);
                let dst = &mut out.data_mut()[b * t * d..(b + 1) * t * d];
                scatter_head(&ctx, t, d, h * dh, dh, dst);
            }
        }
        let saved = probs.clone();
        let var = self.push(
            out,
            &[qkv],
            Box::new(move |g, inputs, _, _| {
                let v = inputs[0];
                let mut dqkv = Tensor::zeros(v.shape());
                let mut q = vec![T::ZERO; t * dh];
                let mut k = vec![T::ZERO; t * dh];
                let mut vv = vec![T::ZERO; t * dh];
                let mut dctx = vec![T::ZERO; t * dh];
                let mut dp = vec![T::ZERO; t * t];
                let mut tmp = vec![T::ZERO; t * dh];
                for b in 0..n {
                    let src = &v.data()[b * t * d3..(b + 1) * t * d3];
                    let gsrc = &g.data()[b * t * d..(b + 1) * t * d];
                    for h in 0..heads {
                        gather_head(src, t, d3, h * dh, dh, &mut q);
                        gather_head(src, t, d3, d + h * dh, dh, &mut k);
                        gather_head(src, t, d3, 2 * d + h * dh, dh, &mut vv);
                        gather_head(gsrc, t, d, h * dh, dh, &mut dctx);
                        let p = &saved.data()[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        let dst = &mut dqkv.data_mut()[b * t * d3..(b + 1) * t * d3];
                        // dV = Pᵀ dctx
                        gemm(true, false, t, dh, t, T::ONE, p, &dctx, T::ZERO, &mut tmp);
                        scatter_head(&tmp, t, d3, 2 * d + h * dh, dh, dst);
                        // dP = dctx Vᵀ, then softmax backward into dS
                        gemm(false, true, t, t, dh, T::ONE, &dctx, &vv, T::ZERO, &mut dp);
                        for (prow, drow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        // dQ = dS K · scale, dK = dSᵀ Q · scale
                        gemm(false, false, t, dh, t, scale, &dp, &k, T::ZERO, &mut tmp);
                        scatter_head(&tmp, t, d3, h * dh, dh, dst);
                        gemm(true, false, t, dh, t, scale, &dp, &q, T::ZERO, &mut tmp);
                        scatter_head(&tmp, t, d3, d + h * dh, dh, dst);
                    }
                }
                vec![Some(dqkv)]
            }),
        );
        Ok((var, probs))
    }

    // ----- convolution -------------------------------------------------

    /// 2D convolution: `x[N, C, H, W]`, `w[O, C, k, k]`, `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.rank() != 4 || vw.rank() != 4 || vw.dim(1) != vx.dim(1) || vw.dim(2) != vw.dim(3) || vb.shape() != [vw.dim(0)] {
            return Err(Error::Shape(format!(
                "conv2d: x {:?}, w {:?}, b {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let (n, c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let o = vw.dim(0);
        let geom = ConvGeometry::forward(c, h, wd, vw.dim(2), stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {} larger than padded input {}x{}", vw.dim(2), h, wd)))?;
        let in_sz = c * h * wd;
        let out_sz = o * geom.col_cols();
        let mut out = Tensor::zeros(&[n, o, geom.out_height, geom.out_width]);
        let mut scratch = Vec::new();
        for s in 0..n {
            conv::conv_forward(
                &vx.data()[s * in_sz..(s + 1) * in_sz],
                vw.data(),
                vb.data(),
                &geom,
                &mut out.data_mut()[s * out_sz..(s + 1) * out_sz],
                &mut scratch,
            );
        }
        Ok(self.push(
            out,
            &[x, w, b],
            Box::new(move |g, inputs, _, needs| {
                let (vx, vw) = (inputs[0], inputs[1]);
                let mut dx = needs[0].then(|| Tensor::zeros(vx.shape()));
                let mut dw = needs[1].then(|| Tensor::zeros(vw.shape()));
                let mut db = needs[2].then(|| Tensor::zeros(&[o]));
                let mut scratch = Vec::new();
                for s in 0..n {
                    conv::conv_backward(
                        &vx.data()[s * in_sz..(s + 1) * in_sz],
                        vw.data(),
                        &g.data()[s * out_sz..(s + 1) * out_sz],
                        &geom,
                        dx.as_mut().map(|d| &mut d.data_mut()[s * in_sz..(s + 1) * in_sz]),
                        dw.as_mut().map(|d| d.data_mut()),
                        db.as_mut().map(|d| d.data_mut()),
                        &mut scratch,
                    );
                }
                vec![dx, dw, db]
            }),
        ))
    }

    /// Transposed 2D convolution: `x[N, C, H, W]`, `w[C, O, k, k]`, `b[O]`.
    /// Output size is `(H - 1)·stride - 2·pad + k + out_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.rank() != 4 || vw.rank() != 4 || vw.dim(0) != vx.dim(1) || vw.dim(2) != vw.dim(3) || vb.shape() != [vw.dim(1)] {
            return Err(Error::Shape(format!(
                "conv_transpose2d: x {:?}, w {:?}, b {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let (n, c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let (o, k) = (vw.dim(1), vw.dim(2));
        let ho = ((h - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::Shape("conv_transpose2d: padding too large".into()))?;
        let wo = ((wd - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::Shape("conv_transpose2d: padding too large".into()))?;
        let geom = ConvGeometry::forward(o, ho, wo, k, stride, pad)
            .filter(|g| g.out_height == h && g.out_width == wd)
            .ok_or_else(|| Error::Shape("conv_transpose2d: inconsistent geometry".into()))?;
        let in_sz = c * h * wd;
        let out_sz = o * ho * wo;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let mut scratch = Vec::new();
        for s in 0..n {
            conv::conv_transpose_forward(
                &vx.data()[s * in_sz..(s + 1) * in_sz],
                vw.data(),
                vb.data(),
                &geom,
                &mut out.data_mut()[s * out_sz..(s + 1) * out_sz],
                &mut scratch,
            );
        }
        Ok(self.push(
            out,
            &[x, w, b],
            Box::new(move |g, inputs, _, needs| {
                let (vx, vw) = (inputs[0], inputs[1]);
                let mut dx = needs[0].then(|| Tensor::zeros(vx.shape()));
                let mut dw = needs[1].then(|| Tensor::zeros(vw.shape()));
                let mut db = needs[2].then(|| Tensor::zeros(&[o]));
                let mut scratch = Vec::new();
                for s in 0..n {
                    conv::conv_transpose_backward(
                        &vx.data()[s * in_sz..(s + 1) * in_sz],
                        vw.data(),
                        &g.data()[s * out_sz..(s + 1) * out_sz],
                        &geom,
                        dx.as_mut().map(|d| &mut d.data_mut()[s * in_sz..(s + 1) * in_sz]),
                        dw.as_mut().map(|d| d.data_mut()),
                        db.as_mut().map(|d| d.data_mut()),
                        &mut scratch,
                    );
                }
                vec![dx, dw, db]
            }),
        ))
    }

    /// Bilinear ×2 upsampling of `[N, C, H, W]` (half-pixel centers, edge clamp).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(Error::Shape(format!("upsample2x: {:?}", vx.shape())));
        }
        let (n, c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let taps_y = bilinear_taps(h);
        let taps_x = bilinear_taps(w);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for (plane, dst) in vx.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
            for (oy, &(y0, y1, ly)) in taps_y.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in taps_x.iter().enumerate() {
                    let ly = T::from_f64(ly);
                    let lx = T::from_f64(lx);
                    let top = plane[y0 * w + x0] * (T::ONE - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (T::ONE - lx) + plane[y1 * w + x1] * lx;
                    dst[oy * wo + ox] = top * (T::ONE - ly) + bot * ly;
                }
            }
        }
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, inputs, _, _| {
                let mut dx = Tensor::zeros(inputs[0].shape());
                for (gp, dst) in g.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
                    for (oy, &(y0, y1, ly)) in taps_y.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in taps_x.iter().enumerate() {
                            let gv = gp[oy * wo + ox];
                            let ly = T::from_f64(ly);
                            let lx = T::from_f64(lx);
                            dst[y0 * w + x0] += gv * (T::ONE - ly) * (T::ONE - lx);
                            dst[y0 * w + x1] += gv * (T::ONE - ly) * lx;
                            dst[y1 * w + x0] += gv * ly * (T::ONE - lx);
                            dst[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenates `[N, C1, H, W]` and `[N, C2, H, W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 4 || vb.rank() != 4 || va.dim(0) != vb.dim(0) || va.shape()[2..] != vb.shape()[2..] {
            return Err(Error::Shape(format!("concat_channels: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let n = va.dim(0);
        let sa = va.len() / n;
        let sb = vb.len() / n;
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for s in 0..n {
            data.extend_from_slice(&va.data()[s * sa..(s + 1) * sa]);
            data.extend_from_slice(&vb.data()[s * sb..(s + 1) * sb]);
        }
        let out = Tensor::new(vec![n, va.dim(1) + vb.dim(1), va.dim(2), va.dim(3)], data)?;
        let (shape_a, shape_b) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g, _, _, needs| {
                let mut da = Vec::with_capacity(n * sa);
                let mut db = Vec::with_capacity(n * sb);
                for chunk in g.data().chunks(sa + sb) {
                    da.extend_from_slice(&chunk[..sa]);
                    db.extend_from_slice(&chunk[sa..]);
                }
                vec![
                    needs[0].then(|| Tensor::new(shape_a.clone(), da).expect("shape")),
                    needs[1].then(|| Tensor::new(shape_b.clone(), db).expect("shape")),
                ]
            }),
        ))
    }

    // ----- token layout ------------------------------------------------

    /// `[N, D, h, w]` feature map to `[N, h·w, D]` tokens in raster order.
    pub fn tokens_from_map(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 4 {
            return Err(Error::Shape(format!("tokens_from_map: {:?}", v.shape())));
        }
        let (n, d, hw) = (v.dim(0), v.dim(1), v.dim(2) * v.dim(3));
        let out = transpose_last2(v.data(), n, d, hw);
        let in_shape = v.shape().to_vec();
        Ok(self.push(
            Tensor::new(vec![n, hw, d], out)?,
            &[x],
            Box::new(move |g, _, _, _| {
                let back = transpose_last2(g.data(), n, hw, d);
                vec![Some(Tensor::new(in_shape.clone(), back).expect("shape"))]
            }),
        ))
    }

    /// `[N, h·w, D]` tokens to a `[N, D, h, w]` feature map.
    pub fn map_from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 3 || v.dim(1) != h * w {
            return Err(Error::Shape(format!(
                "map_from_tokens: {:?} cannot fill a {}x{} grid",
                v.shape(),
                h,
                w
            )));
        }
        let (n, t, d) = (v.dim(0), v.dim(1), v.dim(2));
        let out = transpose_last2(v.data(), n, t, d);
        Ok(self.push(
            Tensor::new(vec![n, d, h, w], out)?,
            &[x],
            Box::new(move |g, _, _, _| {
                let back = transpose_last2(g.data(), n, d, t);
                vec![Some(Tensor::new(vec![n, t, d], back).expect("shape"))]
            }),
        ))
    }

    /// Prepends `token[D]` to every sequence of `x[N, T, D]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (vx, vt) = (self.value(x), self.value(token));
        if vx.rank() != 3 || vt.shape() != [vx.dim(2)] {
            return Err(Error::Shape(format!("prepend_token: x {:?}, token {:?}", vx.shape(), vt.shape())));
        }
        let (n, t, d) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let mut data = Vec::with_capacity(n * (t + 1) * d);
        for s in 0..n {
            data.extend_from_slice(vt.data());
            data.extend_from_slice(&vx.data()[s * t * d..(s + 1) * t * d]);
        }
        Ok(self.push(
            Tensor::new(vec![n, t + 1, d], data)?,
            &[x, token],
            Box::new(move |g, _, _, needs| {
                let mut dx = Vec::with_capacity(n * t * d);
                let mut dt = Tensor::zeros(&[d]);
                for chunk in g.data().chunks((t + 1) * d) {
                    for (a, &v) in dt.data_mut().iter_mut().zip(&chunk[..d]) {
                        *a += v;
                    }
                    dx.extend_from_slice(&chunk[d..]);
                }
                vec![
                    needs[0].then(|| Tensor::new(vec![n, t, d], dx).expect("shape")),
                    needs[1].then_some(dt),
                ]
            }),
        ))
    }

    /// Drops the leading (readout) token: `[N, T, D] → [N, T-1, D]`.
    pub fn drop_first_token(&mut self, x: Var) -> Result<Var> {
        let (n, t, d) = self.tokens_dims(x, "drop_first_token")?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * (t - 1) * d);
        for chunk in v.data().chunks(t * d) {
            data.extend_from_slice(&chunk[d..]);
        }
        Ok(self.push(
            Tensor::new(vec![n, t - 1, d], data)?,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut dx = Tensor::zeros(&[n, t, d]);
                for (dst, src) in dx.data_mut().chunks_mut(t * d).zip(g.data().chunks((t - 1) * d)) {
                    dst[d..].copy_from_slice(src);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Adds the readout token to every patch token and drops it.
    pub fn read_add(&mut self, x: Var) -> Result<Var> {
        let (n, t, d) = self.tokens_dims(x, "read_add")?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * (t - 1) * d);
        for chunk in v.data().chunks(t * d) {
            let readout = &chunk[..d];
            for tok in chunk[d..].chunks(d) {
                data.extend(tok.iter().zip(readout).map(|(&a, &b)| a + b));
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, t - 1, d], data)?,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut dx = Tensor::zeros(&[n, t, d]);
                for (dst, src) in dx.data_mut().chunks_mut(t * d).zip(g.data().chunks((t - 1) * d)) {
                    let (head, tail) = dst.split_at_mut(d);
                    tail.copy_from_slice(src);
                    for tok in src.chunks(d) {
                        for (a, &b) in head.iter_mut().zip(tok) {
                            *a += b;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenates the readout token onto every patch token:
    /// `[N, T, D] → [N, T-1, 2D]`.
    pub fn read_concat(&mut self, x: Var) -> Result<Var> {
        let (n, t, d) = self.tokens_dims(x, "read_concat")?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * (t - 1) * 2 * d);
        for chunk in v.data().chunks(t * d) {
            let readout = &chunk[..d];
            for tok in chunk[d..].chunks(d) {
                data.extend_from_slice(tok);
                data.extend_from_slice(readout);
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, t - 1, 2 * d], data)?,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut dx = Tensor::zeros(&[n, t, d]);
                for (dst, src) in dx.data_mut().chunks_mut(t * d).zip(g.data().chunks((t - 1) * 2 * d)) {
                    let (head, tail) = dst.split_at_mut(d);
                    for (tok, gtok) in tail.chunks_mut(d).zip(src.chunks(2 * d)) {
                        tok.copy_from_slice(&gtok[..d]);
                        for (a, &b) in head.iter_mut().zip(&gtok[d..]) {
                            *a += b;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    fn tokens_dims(&self, x: Var, op: &str) -> Result<(usize, usize, usize)> {
        let v = self.value(x);
        if v.rank() != 3 || v.dim(1) < 2 {
            return Err(Error::Shape(format!("{}: need [N, T>=2, D], got {:?}", op, v.shape())));
        }
        Ok((v.dim(0), v.dim(1), v.dim(2)))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::ONE / (var + eps).sqrt())
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T, _y: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], |a, b| a.max(b));
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.to_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn gather_head<T: Real>(src: &[T], t: usize, stride: usize, offset: usize, dh: usize, dst: &mut [T]) {
    for i in 0..t {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * stride + offset..i * stride + offset + dh]);
    }
}

fn scatter_head<T: Real>(src: &[T], t: usize, stride: usize, offset: usize, dh: usize, dst: &mut [T]) {
    for i in 0..t {
        dst[i * stride + offset..i * stride + offset + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// Source taps `(i0, i1, weight of i1)` for ×2 bilinear upsampling.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Transposes the last two axes of `[n, a, b]` into `[n, b, a]`.
fn transpose_last2<T: Real>(src: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for s in 0..n {
        let base = s * a * b;
        for i in 0..a {
            for j in 0..b {
                out[base + j * a + i] = src[base + i * b + j];
            }
        }
    }
    out
}
