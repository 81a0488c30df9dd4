//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] without copying. Calling
//! [`Graph::backward`] on a scalar node returns gradients for every
//! parameter that contributed to it.
//!
//! Every value is a 2-D matrix. Scalars are `1 x 1`; volumes for the 3-D
//! convolutions are stored position-major as `(depth*height*width) x channels`.

use std::borrow::Cow;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Geometry of a 3-D convolution over a position-major volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub in_dims: [usize; 3],
    pub channels: usize,
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dGeom {
    /// Output dims with unit stride, or `None` if the kernel does not fit.
    pub fn out_dims(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = self.in_dims[i] + 2 * self.pad[i];
            if padded < self.kernel[i] {
                return None;
            }
            out[i] = padded - self.kernel[i] + 1;
        }
        Some(out)
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.channels
    }
}

/// Output dims of a non-overlapping max-pool with window = stride and floor rounding.
pub fn pool3d_out_dims(in_dims: [usize; 3], kernel: [usize; 3]) -> [usize; 3] {
    [in_dims[0] / kernel[0], in_dims[1] / kernel[1], in_dims[2] / kernel[2]]
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Mat),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Asin(Var),
    Sqrt(Var),
    Atan2(Var, Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows { base: Var, rows: Var, idx: Vec<usize> },
    BroadcastRows(Var),
    MeanRows(Var),
    CumMeanRows(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Im2Col1d { x: Var, k: usize },
    Im2Col3d { x: Var, geom: Conv3dGeom },
    Select { x: Var, src: Vec<usize> },
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Mat>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.node_grads[v.0].as_ref()
    }

    /// Gradient per parameter, `None` where a parameter was not reached.
    pub fn params(&self) -> Vec<Option<&Mat>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| self.node_grads[v.0].as_ref()))
            .collect()
    }

    pub fn into_params(mut self) -> Vec<Option<Mat>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| self.node_grads[v.0].take()))
            .collect()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(512), param_vars: vec![None; params.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// The single entry of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// The graph node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let mut v = self.value(a).clone();
        Zip::from(&mut v).and(self.value(b)).for_each(|x, &y| *x = f(*x, y));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.binary(y, x, f64::atan2, Op::Atan2(y, x))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let v = self.value(a) + &r.row(0);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let v = self.value(a) * &r.row(0);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    /// Adds a constant matrix; the gradient passes through unchanged.
    pub fn shift(&mut self, a: Var, offset: &Mat) -> Var {
        let v = self.value(a) + offset;
        let ng = self.ng(a);
        self.push(v, Op::Shift(a), ng)
    }

    pub fn shift_scalar(&mut self, a: Var, offset: f64) -> Var {
        let v = self.value(a) + offset;
        let ng = self.ng(a);
        self.push(v, Op::Shift(a), ng)
    }

    pub fn mul_const(&mut self, a: Var, k: Mat) -> Var {
        let v = self.value(a) * &k;
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, k), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    /// Arcsine with the argument clamped to [-1, 1].
    pub fn asin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.clamp(-1.0, 1.0).asin(), Op::Asin(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Copy of `base` with row `idx[j]` replaced by row `j` of `rows`.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Var {
        let mut v = self.value(base).clone();
        let r = self.value(rows);
        assert_eq!(r.nrows(), idx.len());
        for (j, &i) in idx.iter().enumerate() {
            v.row_mut(i).assign(&r.row(j));
        }
        let ng = self.ng(base) || self.ng(rows);
        self.push(v, Op::ScatterRows { base, rows, idx: idx.to_vec() }, ng)
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let r = self.value(a);
        assert_eq!(r.nrows(), 1);
        let v = r.broadcast((n, r.ncols())).expect("broadcast").to_owned();
        let ng = self.ng(a);
        self.push(v, Op::BroadcastRows(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("mean of empty matrix").insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Row `i` of the output is the mean of rows `0..=i` of `a`.
    pub fn cum_mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.dim());
        let mut acc = ndarray::Array1::<f64>::zeros(x.ncols());
        for i in 0..x.nrows() {
            acc += &x.row(i);
            v.row_mut(i).assign(&(&acc / (i + 1) as f64));
        }
        let ng = self.ng(a);
        self.push(v, Op::CumMeanRows(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalisation with a learned `1 x m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let m = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / m;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let v = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Patches of width `k` along rows with circular padding: `L x (k*C)`.
    ///
    /// Column block `j` of output row `t` holds input row `t + j - k/2 (mod L)`.
    pub fn im2col_1d_circular(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let (l, c) = xv.dim();
        let half = (k / 2) as isize;
        let mut v = Mat::zeros((l, k * c));
        for t in 0..l {
            for j in 0..k {
                let src = (t as isize + j as isize - half).rem_euclid(l as isize) as usize;
                v.slice_mut(s![t, j * c..(j + 1) * c]).assign(&xv.row(src));
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::Im2Col1d { x, k }, ng)
    }

    /// Zero-padded 3-D patches: `(out positions) x (kd*kh*kw*C)`.
    pub fn im2col_3d(&mut self, x: Var, geom: Conv3dGeom) -> Var {
        let xv = self.value(x);
        let [d, h, w] = geom.in_dims;
        assert_eq!(xv.dim(), (d * h * w, geom.channels), "im2col_3d input shape");
        let [od, oh, ow] = geom.out_dims().expect("kernel larger than padded input");
        let (ch, pl) = (geom.channels, geom.patch_len());
        let mut v = Mat::zeros((od * oh * ow, pl));
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let vs = v.as_slice_mut().expect("fresh array");
        for_each_patch_tap(&geom, |out_pos, col, in_pos, len| {
            let o = out_pos * pl + col;
            vs[o..o + len].copy_from_slice(&xs[in_pos * ch..in_pos * ch + len]);
        });
        let ng = self.ng(x);
        self.push(v, Op::Im2Col3d { x, geom }, ng)
    }

    /// Non-overlapping 3-D max-pool (window = stride, floor) per channel.
    pub fn max_pool_3d(&mut self, x: Var, in_dims: [usize; 3], kernel: [usize; 3]) -> Var {
        let xv = self.value(x);
        let c = xv.ncols();
        let [_, h, w] = in_dims;
        let [od, oh, ow] = pool3d_out_dims(in_dims, kernel);
        let mut v = Mat::zeros((od * oh * ow, c));
        let mut src = vec![0usize; od * oh * ow * c];
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = (z * oh + y) * ow + xx;
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for a in 0..kernel[0] {
                            for b in 0..kernel[1] {
                                for cc in 0..kernel[2] {
                                    let p = ((z * kernel[0] + a) * h + y * kernel[1] + b) * w
                                        + xx * kernel[2]
                                        + cc;
                                    let val = xs[p * c + ch];
                                    if val > best {
                                        best = val;
                                        arg = p;
                                    }
                                }
                            }
                        }
                        v[[o, ch]] = best;
                        src[o * c + ch] = arg;
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::Select { x, src }, ng)
    }

    /// 1-D max-pool over rows with the given window, stride and padding.
    pub fn max_pool_rows(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (l, c) = xv.dim();
        let out_len = (l + 2 * pad - kernel) / stride + 1;
        let mut v = Mat::zeros((out_len, c));
        let mut src = vec![0usize; out_len * c];
        for o in 0..out_len {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for j in 0..kernel {
                    let p = (o * stride + j) as isize - pad as isize;
                    if p < 0 || p >= l as isize {
                        continue;
                    }
                    let val = xv[[p as usize, ch]];
                    if val > best {
                        best = val;
                        arg = p as usize;
                    }
                }
                v[[o, ch]] = best;
                src[o * c + ch] = arg;
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::Select { x, src }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of the scalar `out` with respect to every upstream node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { node_grads: grads, param_vars: self.param_vars.clone() }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| -> &Mat { &self.nodes[v.0].value };
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        let out: &Mat = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(val(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, g / bv);
                if self.ng(*b) {
                    acc(*b, -(g * out) / bv);
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.ng(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                let rv = val(*r);
                acc(*a, g * &rv.row(0));
                if self.ng(*r) {
                    acc(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::MulConst(a, k) => acc(*a, g * k),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Sin(a) => acc(*a, g * &val(*a).mapv(f64::cos)),
            Op::Cos(a) => acc(*a, g * &val(*a).mapv(|x| -x.sin())),
            Op::Asin(a) => {
                let d = val(*a).mapv(|x| {
                    let x = x.clamp(-1.0, 1.0);
                    let r = (1.0 - x * x).sqrt();
                    if r > 0.0 {
                        1.0 / r
                    } else {
                        0.0
                    }
                });
                acc(*a, g * &d)
            }
            Op::Sqrt(a) => {
                let d = out.mapv(|y| if y > 0.0 { 0.5 / y } else { 0.0 });
                acc(*a, g * &d)
            }
            Op::Atan2(y, x) => {
                let (yv, xv) = (val(*y), val(*x));
                let r2 = yv * yv + xv * xv;
                if self.ng(*y) {
                    acc(*y, g * xv / &r2);
                }
                if self.ng(*x) {
                    acc(*x, -(g * yv) / &r2);
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(val(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if self.ng(p) {
                        acc(p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    if self.ng(p) {
                        acc(p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(val(*a).dim());
                for (j, &r) in idx.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row += &g.row(j);
                }
                acc(*a, d);
            }
            Op::ScatterRows { base, rows, idx } => {
                if self.ng(*rows) {
                    acc(*rows, g.select(Axis(0), idx));
                }
                if self.ng(*base) {
                    let mut d = g.clone();
                    for &r in idx {
                        d.row_mut(r).fill(0.0);
                    }
                    acc(*base, d);
                }
            }
            Op::BroadcastRows(a) => acc(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::MeanRows(a) => {
                let n = val(*a).nrows();
                let row = g.row(0).mapv(|x| x / n as f64);
                acc(*a, row.broadcast((n, g.ncols())).unwrap().to_owned());
            }
            Op::CumMeanRows(a) => {
                // d x_j = sum_{i >= j} g_i / (i + 1)
                let n = g.nrows();
                let mut d = Mat::zeros(g.dim());
                let mut run = ndarray::Array1::<f64>::zeros(g.ncols());
                for j in (0..n).rev() {
                    run += &(&g.row(j) / (j + 1) as f64);
                    d.row_mut(j).assign(&run);
                }
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * out;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv -= y * s);
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                if self.ng(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let gx = g * &val(*gamma).row(0);
                    let m = gx.ncols() as f64;
                    let mut d = Mat::zeros(gx.dim());
                    for r in 0..gx.nrows() {
                        let gr = gx.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / m;
                        let mean_gx = gr.dot(&xr) / m;
                        let is = inv_std[r];
                        Zip::from(d.row_mut(r)).and(&gr).and(&xr).for_each(|dv, &gv, &xh| {
                            *dv = is * (gv - mean_g - xh * mean_gx);
                        });
                    }
                    acc(*x, d);
                }
            }
            Op::Im2Col1d { x, k } => {
                let (l, c) = val(*x).dim();
                let half = (*k / 2) as isize;
                let mut d = Mat::zeros((l, c));
                for t in 0..l {
                    for j in 0..*k {
                        let src = (t as isize + j as isize - half).rem_euclid(l as isize) as usize;
                        let mut row = d.row_mut(src);
                        row += &g.slice(s![t, j * c..(j + 1) * c]);
                    }
                }
                acc(*x, d);
            }
            Op::Im2Col3d { x, geom } => {
                let (ch, pl) = (geom.channels, geom.patch_len());
                let mut d = Mat::zeros(val(*x).dim());
                let gs = g.as_standard_layout();
                let gs = gs.as_slice().expect("standard layout");
                let ds = d.as_slice_mut().expect("fresh array");
                for_each_patch_tap(geom, |out_pos, col, in_pos, len| {
                    let o = out_pos * pl + col;
                    for (t, &v) in ds[in_pos * ch..in_pos * ch + len].iter_mut().zip(&gs[o..o + len]) {
                        *t += v;
                    }
                });
                acc(*x, d);
            }
            Op::Select { x, src } => {
                let c = g.ncols();
                let mut d = Mat::zeros(val(*x).dim());
                for (k, &gv) in g.iter().enumerate() {
                    d[[src[k], k % c]] += gv;
                }
                acc(*x, d);
            }
            Op::Sum(a) => {
                let gv = g[[0, 0]];
                acc(*a, Mat::from_elem(val(*a).dim(), gv));
            }
        }
    }
}

/// Calls `f(out_position, patch_column, in_position)` for every in-bounds tap.
/// Calls `f(out_pos, col, in_pos, len)` for every contiguous run of taps:
/// `len` values starting at patch column `col` come from input position
/// `in_pos` onward (channels interleaved).
fn for_each_patch_tap(geom: &Conv3dGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [d, h, w] = geom.in_dims;
    let [od, oh, ow] = geom.out_dims().expect("kernel larger than padded input");
    let [kd, kh, kw] = geom.kernel;
    let [pd, ph, pw] = geom.pad.map(|p| p as isize);
    let ch = geom.channels;
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let out_pos = (z * oh + y) * ow + x;
                let c_lo = (pw - x as isize).max(0) as usize;
                let c_hi = ((w as isize + pw - x as isize).min(kw as isize)).max(0) as usize;
                if c_lo >= c_hi {
                    continue;
                }
                let ix = (x + c_lo) as isize - pw;
                for a in 0..kd {
                    let iz = z as isize + a as isize - pd;
                    if iz < 0 || iz >= d as isize {
                        continue;
                    }
                    for b in 0..kh {
                        let iy = y as isize + b as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_pos = ((iz as usize) * h + iy as usize) * w + ix as usize;
                        let col = ((a * kh + b) * kw + c_lo) * ch;
                        f(out_pos, col, in_pos, (c_hi - c_lo) * ch);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter gradient of `f`.
    pub(crate) fn check_gradients(
        store: &ParamStore,
        f: impl Fn(&mut Graph) -> Var,
        tol: f64,
    ) {
        let g_an = {
            let mut g = Graph::new(store);
            let out = f(&mut g);
            g.backward(out).into_params()
        };
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let out = f(&mut g);
            g.scalar(out)
        };
        let h = 1e-6;
        for pid in 0..store.len() {
            let shape = store.values()[pid].dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut plus = store.clone();
                    plus.values_mut()[pid][[r, c]] += h;
                    let mut minus = store.clone();
                    minus.values_mut()[pid][[r, c]] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = g_an[pid].as_ref().map_or(0.0, |m| m[[r, c]]);
                    let scale = fd.abs().max(an.abs()).max(1e-3);
                    assert!(
                        (fd - an).abs() / scale < tol,
                        "param {} [{r},{c}]: fd {fd} vs analytic {an}",
                        store.names()[pid]
                    );
                }
            }
        }
    }

    fn store_of(mats: Vec<Mat>) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = mats.into_iter().enumerate().map(|(i, m)| s.add(format!("p{i}"), m)).collect();
        (s, ids)
    }

    #[test]
    fn matmul_softmax_layernorm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, ids) = store_of(vec![
            random_mat(&mut rng, 4, 3),
            random_mat(&mut rng, 3, 5),
            random_mat(&mut rng, 1, 5),
            random_mat(&mut rng, 1, 5),
            random_mat(&mut rng, 4, 5),
        ]);
        check_gradients(
            &s,
            |g| {
                let a = g.param(ids[0]);
                let b = g.param(ids[1]);
                let w = g.param(ids[4]);
                let m = g.matmul(a, b);
                let sm = g.softmax_rows(m);
                let gamma = g.param(ids[2]);
                let beta = g.param(ids[3]);
                let ln = g.layer_norm(m, gamma, beta, 1e-5);
                let t = g.matmul_t(sm, ln);
                let q = g.mul(sm, w);
                let tt = g.sum(t);
                let qq = g.sum(q);
                g.add(tt, qq)
            },
            1e-5,
        );
    }

    #[test]
    fn elementwise_and_trig_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pos = Mat::from_shape_fn((2, 3), |_| rng.gen_range(0.2..0.9));
        let (s, ids) = store_of(vec![random_mat(&mut rng, 2, 3), pos, random_mat(&mut rng, 1, 3)]);
        check_gradients(
            &s,
            |g| {
                let a = g.param(ids[0]);
                let p = g.param(ids[1]);
                let r = g.param(ids[2]);
                let x1 = g.sin(a);
                let x2 = g.cos(p);
                let x3 = g.asin(p);
                let x4 = g.sqrt(p);
                let x5 = g.atan2(a, p);
                let x6 = g.div(x1, x4);
                let x7 = g.relu(a);
                let x8 = g.add_row(x7, r);
                let x9 = g.mul_row(x8, r);
                let y = g.concat_cols(&[x2, x3, x5, x6, x9]);
                let y = g.scale(y, 0.7);
                let y = g.shift_scalar(y, 3.0);
                let tr = g.transpose(y);
                let sq = g.mul(tr, tr);
                g.mean(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn row_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, ids) = store_of(vec![random_mat(&mut rng, 5, 3), random_mat(&mut rng, 2, 3)]);
        check_gradients(
            &s,
            |g| {
                let a = g.param(ids[0]);
                let b = g.param(ids[1]);
                let sel = g.gather_rows(a, &[4, 1]);
                let mix = g.mul(sel, b);
                let m = g.mean_rows(a);
                let base = g.broadcast_rows(m, 5);
                let cm = g.cum_mean_rows(a);
                let base = g.add(base, cm);
                let sc = g.scatter_rows(base, mix, &[0, 3]);
                let top = g.slice_rows(sc, 1, 3);
                let left = g.slice_cols(top, 0, 2);
                let stacked = g.concat_rows(&[left, left]);
                let sq = g.mul(stacked, stacked);
                g.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn conv_and_pool_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = Conv3dGeom { in_dims: [3, 4, 4], channels: 2, kernel: [2, 3, 3], pad: [1, 0, 1] };
        let [od, oh, ow] = geom.out_dims().unwrap();
        let (s, ids) = store_of(vec![
            random_mat(&mut rng, 3 * 4 * 4, 2),
            random_mat(&mut rng, geom.patch_len(), 3),
            random_mat(&mut rng, 6, 2),
            random_mat(&mut rng, 6, 4),
        ]);
        check_gradients(
            &s,
            |g| {
                let x = g.param(ids[0]);
                let w = g.param(ids[1]);
                let cols = g.im2col_3d(x, geom);
                let y = g.matmul(cols, w);
                let y = g.relu(y);
                let p = g.max_pool_3d(y, [od, oh, ow], [1, 2, 2]);
                let s1 = g.sum(p);
                let seq = g.param(ids[2]);
                let c1 = g.im2col_1d_circular(seq, 3);
                let k = g.param(ids[3]);
                let y1 = g.matmul(c1, k);
                let mp = g.max_pool_rows(y1, 3, 2, 1);
                let sq = g.mul(mp, mp);
                let s2 = g.sum(sq);
                g.add(s1, s2)
            },
            1e-4,
        );
    }

    #[test]
    fn param_node_is_shared() {
        let mut s = ParamStore::new();
        let id = s.add("w", Mat::from_elem((1, 1), 3.0));
        let mut g = Graph::new(&s);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y).into_params();
        assert_eq!(grads[0].as_ref().unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn im2col_circular_layout() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Mat::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap());
        let c = g.im2col_1d_circular(x, 3);
        let expect = Mat::from_shape_vec((3, 3), vec![3.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 1.0]).unwrap();
        assert_eq!(g.value(c), &expect);
    }

    #[test]
    fn pool_rows_shape() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Mat::from_shape_fn((72, 2), |(i, _)| i as f64));
        let p = g.max_pool_rows(x, 3, 2, 1);
        assert_eq!(g.shape(p), (36, 2));
        assert_eq!(g.value(p)[[0, 0]], 1.0);
    }
}
