//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Trainable values
//! enter through [`Tape::param`], keyed by name, so a parameter used on several
//! paths (support and query encodings, for instance) is one node with one
//! accumulated gradient. Everything else enters through [`Tape::constant`] and
//! never receives a gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Grouping used by [`Tape::l2_normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormLayout {
    /// `[n, d]`: every row is normalized.
    Rows,
    /// `[c, h, w]`: every pixel's channel vector is normalized.
    Channels,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    Tanh(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Affine2 {
        a: Var,
        wa: f64,
        b: Var,
        wb: f64,
    },
    Scale(Var, f64),
    Reshape(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    MaskedMean {
        inputs: Vec<(Var, Vec<usize>)>,
        count: usize,
    },
    Correlate {
        features: Var,
        prototypes: Var,
    },
    L2Normalize {
        x: Var,
        layout: NormLayout,
        norms: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        n_valid: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every named parameter that the loss depends on.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Names and nodes of the parameters registered so far.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Registering the same name twice returns the
    /// node created the first time.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    /// 2-D convolution of `x: [cin, h, w]` with `w: [cout, cin, k, k]` and bias `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::Argument(format!(
                "conv2d shapes incompatible: input {xs:?}, weight {ws:?}"
            )));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::Argument("conv2d bias must match output channels".into()));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::Argument("conv2d kernel larger than padded input".into()));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let r = cin * k * k;
        let mut cols = vec![0.0; r * p];
        {
            let xd = self.value(x).data();
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst = &mut cols[row * p..(row + 1) * p];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &xd[(ci * h + iy as usize) * wd..][..wd];
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    dst[oy * wo + ox] = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; cout * p];
        {
            let wdat = self.value(w).data();
            let bdat = self.value(b).data();
            for co in 0..cout {
                let orow = &mut out[co * p..(co + 1) * p];
                orow.fill(bdat[co]);
                for ri in 0..r {
                    let wv = wdat[co * r + ri];
                    if wv == 0.0 {
                        continue;
                    }
                    let crow = &cols[ri * p..(ri + 1) * p];
                    for (o, c) in orow.iter_mut().zip(crow) {
                        *o += wv * c;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            &[x, w, b],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.tanh()).collect();
        let value = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.push(value, Op::Tanh(x), &[x])
    }

    /// `x: [n, in]`, `w: [in, out]`, `b: [out]` → `x·w + b` of shape `[n, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(b) != [ws[1]] {
            return Err(Error::Argument(format!(
                "linear shapes incompatible: input {xs:?}, weight {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bdat = self.value(b).data();
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let orow = &mut out[i * dout..(i + 1) * dout];
            orow.copy_from_slice(bdat);
            for kk in 0..din {
                let a = xd[i * din + kk];
                for (o, wv) in orow.iter_mut().zip(&wdat[kk * dout..(kk + 1) * dout]) {
                    *o += a * wv;
                }
            }
        }
        let value = Tensor::from_vec(&[n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// `wa·a + wb·b` for equally shaped operands.
    pub fn affine2(&mut self, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Argument(format!(
                "affine2 shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| wa * x + wb * y)
            .collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Affine2 { a, wa, b, wb }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * s).collect();
        let value = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[n, d]` → `[1, d]` row mean.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || v.shape()[0] == 0 {
            return Err(Error::Argument(format!(
                "mean_rows needs a nonempty [n, d] input, got {:?}",
                v.shape()
            )));
        }
        let (n, d) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, a) in out.iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let value = Tensor::from_vec(&[1, d], out)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    /// Stacks row blocks. One-dimensional inputs count as a single row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat of zero blocks".into()));
        };
        let width = self.value(first).row_width();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() > 2 || v.row_width() != width {
                return Err(Error::Argument(format!(
                    "concat block of shape {:?} does not have row width {width}",
                    v.shape()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec(&[rows, width], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Mean of the channel vectors at the selected pixels of several `[c, h, w]`
    /// feature maps, pooled jointly. `selections[i]` lists flat pixel indices
    /// (`y * w + x`) into `features[i]`.
    pub fn masked_mean(&mut self, features: &[Var], selections: &[Vec<usize>]) -> Result<Var> {
        if features.is_empty() || features.len() != selections.len() {
            return Err(Error::Argument("masked_mean needs one selection per feature map".into()));
        }
        let c = self.shape(features[0])[0];
        let count: usize = selections.iter().map(Vec::len).sum();
        if count == 0 {
            return Err(Error::Argument("masked_mean over an empty selection".into()));
        }
        let mut out = vec![0.0; c];
        for (&f, sel) in features.iter().zip(selections) {
            let v = self.value(f);
            if v.shape().len() != 3 || v.shape()[0] != c {
                return Err(Error::Argument(format!(
                    "masked_mean feature shape {:?} mismatches channel count {c}",
                    v.shape()
                )));
            }
            let p = v.shape()[1] * v.shape()[2];
            let d = v.data();
            for (ch, o) in out.iter_mut().enumerate() {
                let plane = &d[ch * p..(ch + 1) * p];
                for &idx in sel {
                    *o += plane[idx];
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let inputs = features
            .iter()
            .copied()
            .zip(selections.iter().cloned())
            .collect();
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::MaskedMean { inputs, count }, features))
    }

    /// Inner products of every pixel of `features: [c, h, w]` with every row of
    /// `prototypes: [k, c]`, giving `[h*w, k]`.
    pub fn correlate(&mut self, features: Var, prototypes: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let ps = self.shape(prototypes).to_vec();
        if fs.len() != 3 || ps.len() != 2 || ps[1] != fs[0] {
            return Err(Error::Argument(format!(
                "correlate shapes incompatible: features {fs:?}, prototypes {ps:?}"
            )));
        }
        let (c, p, k) = (fs[0], fs[1] * fs[2], ps[0]);
        let fd = self.value(features).data();
        let pd = self.value(prototypes).data();
        let mut out = vec![0.0; p * k];
        for ch in 0..c {
            let plane = &fd[ch * p..(ch + 1) * p];
            for kk in 0..k {
                let w = pd[kk * c + ch];
                for (pix, f) in plane.iter().enumerate() {
                    out[pix * k + kk] += f * w;
                }
            }
        }
        let value = Tensor::from_vec(&[p, k], out)?;
        Ok(self.push(
            value,
            Op::Correlate {
                features,
                prototypes,
            },
            &[features, prototypes],
        ))
    }

    pub fn l2_normalize(&mut self, x: Var, layout: NormLayout) -> Result<Var> {
        let v = self.value(x);
        let (groups, width, stride_g, stride_e) = norm_geometry(v.shape(), layout)?;
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        let mut norms = Vec::with_capacity(groups);
        for g in 0..groups {
            let base = g * stride_g;
            let sq: f64 = (0..width).map(|e| d[base + e * stride_e].powi(2)).sum();
            let n = sq.sqrt().max(1e-12);
            for e in 0..width {
                out[base + e * stride_e] = d[base + e * stride_e] / n;
            }
            norms.push(n);
        }
        let value = Tensor::from_vec(v.shape(), out)?;
        Ok(self.push(value, Op::L2Normalize { x, layout, norms }, &[x]))
    }

    /// Mean over pixels with a target of `-log softmax(logits)[target]`.
    /// `logits: [p, k]`; pixels whose target is `None` are excluded. With no
    /// valid pixel the result is exactly zero.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.value(logits);
        if v.shape().len() != 2 || v.shape()[0] != targets.len() {
            return Err(Error::Argument(format!(
                "softmax_xent logits {:?} vs {} targets",
                v.shape(),
                targets.len()
            )));
        }
        let k = v.shape()[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::Argument(format!("target {bad} outside {k} classes")));
        }
        let mut probs = vec![0.0; v.len()];
        let mut total = 0.0;
        let mut n_valid = 0;
        for (pix, target) in targets.iter().enumerate() {
            let row = v.row(pix);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            for (dst, &l) in probs[pix * k..(pix + 1) * k].iter_mut().zip(row) {
                *dst = (l - lse).exp();
            }
            if let Some(t) = *target {
                total += lse - row[t];
                n_valid += 1;
            }
        }
        let loss = if n_valid > 0 { total / n_valid as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
                n_valid,
            },
            &[logits],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(self.shape(loss), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let (ho, wo) = (os[1], os[2]);
                let p = ho * wo;
                let r = cin * k * k;
                self.accumulate(grads, *b, |gb| {
                    for co in 0..cout {
                        gb[co] += gd[co * p..(co + 1) * p].iter().sum::<f64>();
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for co in 0..cout {
                        let grow = &gd[co * p..(co + 1) * p];
                        for ri in 0..r {
                            let crow = &cols[ri * p..(ri + 1) * p];
                            gw[co * r + ri] += grow.iter().zip(crow).map(|(a, c)| a * c).sum::<f64>();
                        }
                    }
                });
                if self.nodes[x.0].needs_grad {
                    let wdat = self.value(*w).data();
                    let mut gcols = vec![0.0; r * p];
                    for co in 0..cout {
                        let grow = &gd[co * p..(co + 1) * p];
                        for ri in 0..r {
                            let wv = wdat[co * r + ri];
                            for (gc, a) in gcols[ri * p..(ri + 1) * p].iter_mut().zip(grow) {
                                *gc += wv * a;
                            }
                        }
                    }
                    let (stride, pad) = (*stride, *pad);
                    self.accumulate(grads, *x, |gx| {
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let row = (ci * k + ky) * k + kx;
                                    for oy in 0..ho {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for ox in 0..wo {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix >= 0 && ix < wd as isize {
                                                gx[(ci * h + iy as usize) * wd + ix as usize] +=
                                                    gcols[row * p + oy * wo + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, a), gi) in gx.iter_mut().zip(xv).zip(gd) {
                        if *a > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, t), gi) in gx.iter_mut().zip(y).zip(gd) {
                        *o += gi * (1.0 - t * t);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[1];
                let xd = self.value(*x).data();
                let wdat = self.value(*w).data();
                self.accumulate(grads, *b, |gb| {
                    for i in 0..n {
                        for (o, gi) in gb.iter_mut().zip(&gd[i * dout..(i + 1) * dout]) {
                            *o += gi;
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for i in 0..n {
                        let grow = &gd[i * dout..(i + 1) * dout];
                        for kk in 0..din {
                            let a = xd[i * din + kk];
                            for (o, gi) in gw[kk * dout..(kk + 1) * dout].iter_mut().zip(grow) {
                                *o += a * gi;
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for i in 0..n {
                        let grow = &gd[i * dout..(i + 1) * dout];
                        for kk in 0..din {
                            gx[i * din + kk] += wdat[kk * dout..(kk + 1) * dout]
                                .iter()
                                .zip(grow)
                                .map(|(wv, gi)| wv * gi)
                                .sum::<f64>();
                        }
                    }
                });
            }
            Op::Affine2 { a, wa, b, wb } => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(gd).for_each(|(o, gi)| *o += wa * gi)
                });
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(gd).for_each(|(o, gi)| *o += wb * gi)
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(gd).for_each(|(o, gi)| *o += s * gi)
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(gd).for_each(|(o, gi)| *o += gi)
                });
            }
            Op::MeanRows(x) => {
                let n = self.shape(*x)[0];
                self.accumulate(grads, *x, |gx| {
                    let d = gd.len();
                    for r in 0..n {
                        for (o, gi) in gx[r * d..(r + 1) * d].iter_mut().zip(gd) {
                            *o += gi / n as f64;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &gd[offset..offset + len];
                    self.accumulate(grads, p, |gp| {
                        gp.iter_mut().zip(slice).for_each(|(o, gi)| *o += gi)
                    });
                    offset += len;
                }
            }
            Op::MaskedMean { inputs, count } => {
                let c = gd.len();
                for (f, sel) in inputs {
                    let fs = self.shape(*f);
                    let p = fs[1] * fs[2];
                    self.accumulate(grads, *f, |gf| {
                        for ch in 0..c {
                            let share = gd[ch] / *count as f64;
                            for &idx in sel {
                                gf[ch * p + idx] += share;
                            }
                        }
                    });
                }
            }
            Op::Correlate {
                features,
                prototypes,
            } => {
                let fs = self.shape(*features);
                let (c, p) = (fs[0], fs[1] * fs[2]);
                let k = self.shape(*prototypes)[0];
                let fd = self.value(*features).data();
                let pd = self.value(*prototypes).data();
                self.accumulate(grads, *features, |gf| {
                    for ch in 0..c {
                        for pix in 0..p {
                            let mut acc = 0.0;
                            for kk in 0..k {
                                acc += gd[pix * k + kk] * pd[kk * c + ch];
                            }
                            gf[ch * p + pix] += acc;
                        }
                    }
                });
                self.accumulate(grads, *prototypes, |gp| {
                    for kk in 0..k {
                        for ch in 0..c {
                            let plane = &fd[ch * p..(ch + 1) * p];
                            let mut acc = 0.0;
                            for (pix, f) in plane.iter().enumerate() {
                                acc += gd[pix * k + kk] * f;
                            }
                            gp[kk * c + ch] += acc;
                        }
                    }
                });
            }
            Op::L2Normalize { x, layout, norms } => {
                let y = node.value.data();
                let (groups, width, stride_g, stride_e) =
                    norm_geometry(node.value.shape(), *layout).expect("validated in forward");
                self.accumulate(grads, *x, |gx| {
                    for g in 0..groups {
                        let base = g * stride_g;
                        let dot: f64 = (0..width)
                            .map(|e| y[base + e * stride_e] * gd[base + e * stride_e])
                            .sum();
                        for e in 0..width {
                            let idx = base + e * stride_e;
                            gx[idx] += (gd[idx] - y[idx] * dot) / norms[g];
                        }
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
                n_valid,
            } => {
                if *n_valid == 0 {
                    return;
                }
                let k = self.shape(*logits)[1];
                let scale = gd[0] / *n_valid as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (pix, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for kk in 0..k {
                            let onehot = if kk == t { 1.0 } else { 0.0 };
                            gl[pix * k + kk] += scale * (probs[pix * k + kk] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// `(groups, group width, group stride, element stride)` for a normalization layout.
fn norm_geometry(shape: &[usize], layout: NormLayout) -> Result<(usize, usize, usize, usize)> {
    match (layout, shape) {
        (NormLayout::Rows, [n, d]) => Ok((*n, *d, *d, 1)),
        (NormLayout::Channels, [c, h, w]) => Ok((h * w, *c, 1, h * w)),
        _ => Err(Error::Argument(format!(
            "cannot normalize shape {shape:?} with layout {layout:?}"
        ))),
    }
}
