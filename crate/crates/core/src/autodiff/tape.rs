use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// Second operand has the same shape or is a `[1, n]` row broadcast over rows.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    Transpose(Var),
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for one forward pass and differentiates it in
/// reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: std::collections::HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradients of every parameter used on the tape into the store.
    pub fn accumulate(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::Shape { op, detail: format!("{shapes:?}") }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Outer, axis and inner extents of a shape split at `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(e) => {
            for (a, b) in e.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.value(v).dims2().ok_or_else(|| shape_err(op, &[self.shape(v)]))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Places a parameter on the tape. Repeated calls return the same handle
    /// so that gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    fn broadcast_binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            let data = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
            return Tensor::new(sa.to_vec(), data);
        }
        let row_bcast = sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1];
        if !row_bcast {
            return Err(shape_err(name, &[sa, sb]));
        }
        let n = sa[1];
        let data = va.iter().enumerate().map(|(i, x)| f(*x, vb[i % n])).collect();
        Tensor::new(sa.to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product; the second operand may be a broadcast row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect()).expect("same shape");
        self.push(t, Op::Scale(a, s))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs.first().ok_or_else(|| shape_err("concat", &[]))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &[&base]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
                return Err(shape_err("concat", &shapes));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let w = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * w..(o + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec(), axis)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Shape { op: "slice", detail: format!("{shape:?} axis {axis} [{start}, {})", start + len) });
        }
        let (outer, a, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * a * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Slice { x, axis, start }))
    }

    /// Single row of a rank-2 value, as `[1, n]`.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        self.slice(x, 0, r, 1)
    }

    /// Mean along `axis`; the axis is kept with extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("mean", &[&shape]));
        }
        let (outer, a, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..a {
                for j in 0..inner {
                    data[o * inner + j] += src[(o * a + i) * inner + j];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= a as f64);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Mean { x, axis }))
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| f(*a)).collect()).expect("same shape")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.unary(x, f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary(x, |a| 1.0 / (1.0 + (-a).exp()));
        self.push(t, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |a| a.max(0.0));
        self.push(t, Op::Relu(x))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &[&shape]));
        }
        let (outer, a, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * a + i) * inner + j;
                let keep = |i: usize| mask.map_or(true, |m| m[idx(i)]);
                let mx = (0..a).filter(|&i| keep(i)).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return Err(TensorError::Shape { op: "masked_softmax", detail: "fully masked lane".into() });
                }
                let mut z = 0.0;
                for i in (0..a).filter(|&i| keep(i)) {
                    let e = (src[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..a {
                    out[idx(i)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax along the last axis where entries with `mask == false` get
    /// probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        if mask.len() != self.value(x).len() {
            return Err(TensorError::Shape { op: "masked_softmax", detail: format!("{:?} mask {}", self.shape(x), mask.len()) });
        }
        let axis = self.shape(x).len() - 1;
        self.softmax_impl(x, axis, Some(mask))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "transpose")?;
        let data = transpose_raw(self.value(x).data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Rows of `table` selected by `ids`, stacked as `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, dim) = self.dims2(table, "embedding")?;
        if ids.is_empty() || ids.iter().any(|&i| i >= rows) {
            return Err(TensorError::Shape { op: "embedding", detail: format!("table {rows}x{dim}, ids {ids:?}") });
        }
        let t = self.value(table);
        let data = ids.iter().flat_map(|&i| t.row_slice(i).iter().copied()).collect();
        Ok(self.push(Tensor::new(vec![ids.len(), dim], data)?, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Row-wise layer normalisation with learned `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [1, c] || self.shape(beta) != [1, c] {
            return Err(shape_err("layer_norm", &[self.shape(x), self.shape(gamma), self.shape(beta)]));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Inverted dropout. In evaluation mode or with `p == 0` this is the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout probability {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[batch, classes]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (b, k) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(TensorError::Shape { op: "cross_entropy", detail: format!("{b} rows, {} targets", targets.len()) });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::TargetOutOfRange { target: t, classes: k });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &src[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            loss -= row[targets[i]] - mx - z.ln();
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(t, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// 2-D convolution of a `[C_in, H, W]` input with `[C_out, C_in, k, k]`
    /// weights and a `[1, C_out]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = || shape_err("conv2d", &[&xs, &ws]);
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(bad());
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if self.shape(b) != [1, cout] {
            return Err(shape_err("conv2d", &[&xs, &ws, self.shape(b)]));
        }
        let (oh, ow) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(a), Some(c)) => (a, c),
            _ => return Err(bad()),
        };
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bv[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                s += xv[(ci * h + iy as usize) * wd + ix as usize] * wv[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![cout, oh, ow], out)?, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", &[self.shape(loss)]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|p| p.1 .0);
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked");
                let n = self.shape(*b)[1];
                let bt = transpose_raw(self.value(*b).data(), k, n);
                let mut ga = vec![0.0; m * k];
                matmul_raw(g, &bt, m, n, k, &mut ga);
                let at = transpose_raw(self.value(*a).data(), m, k);
                let mut gb = vec![0.0; k * n];
                matmul_raw(&at, g, k, m, n, &mut gb);
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(grads, *a, g);
                let gb = self.reduce_broadcast(*b, g.iter().map(|v| sign * v).collect());
                acc(grads, *b, &gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let nb = vb.len();
                let ga: Vec<f64> = g.iter().enumerate().map(|(j, gv)| gv * vb[j % nb]).collect();
                let gb_full: Vec<f64> = g.iter().zip(va).map(|(gv, av)| gv * av).collect();
                acc(grads, *a, &ga);
                let gb = self.reduce_broadcast(*b, gb_full);
                acc(grads, *b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                acc(grads, *a, &ga);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let ax = self.shape(x)[*axis];
                    let mut gx = Vec::with_capacity(self.value(x).len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + ax * inner]);
                    }
                    acc(grads, x, &gx);
                    offset += ax;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, a, inner) = split_at_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let base = o * a * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, *x, &gx);
            }
            Op::Mean { x, axis } => {
                let (outer, a, inner) = split_at_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    for k in 0..a {
                        for j in 0..inner {
                            gx[(o * a + k) * inner + j] = g[o * inner + j] / a as f64;
                        }
                    }
                }
                acc(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                acc(grads, *x, &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                acc(grads, *x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                acc(grads, *x, &gx);
            }
            Op::Relu(x) => {
                let gx: Vec<f64> = g.iter().zip(self.value(*x).data()).map(|(gv, a)| if *a > 0.0 { *gv } else { 0.0 }).collect();
                acc(grads, *x, &gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, a, inner) = split_at_axis(node.value.shape(), *axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * a + i) * inner + j;
                        let dot: f64 = (0..a).map(|i| g[idx(i)] * out[idx(i)]).sum();
                        for i in 0..a {
                            gx[idx(i)] = out[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                acc(grads, *x, &gx);
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("checked");
                acc(grads, *x, &transpose_raw(g, c, r));
            }
            Op::Reshape(x) => acc(grads, *x, g),
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                let mut gt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        gt[id * dim + j] += g[r * dim + j];
                    }
                }
                acc(grads, *table, &gt);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = self.value(*x).dims2().expect("checked");
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for i in 0..r {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let dy = g[i * c + j];
                        let dh = dy * gam[j];
                        gg[j] += dy * xhat[i * c + j];
                        gbeta[j] += dy;
                        s1 += dh;
                        s2 += dh * xhat[i * c + j];
                    }
                    for j in 0..c {
                        let dh = g[i * c + j] * gam[j];
                        gx[i * c + j] = inv_std[i] / c as f64 * (c as f64 * dh - s1 - xhat[i * c + j] * s2);
                    }
                }
                acc(grads, *x, &gx);
                acc(grads, *gamma, &gg);
                acc(grads, *beta, &gbeta);
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<f64> = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                acc(grads, *x, &gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                let k = probs.len() / b;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0] / b as f64).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * k + t] -= g[0] / b as f64;
                }
                acc(grads, *logits, &gx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let (oh, ow) = (os[1], os[2]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; cout];
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(co * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            gb[co] += go;
                            for ci in 0..cin {
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + iy as usize) * wd + ix as usize;
                                        let wi = ((co * cin + ci) * k + ky) * k + kx;
                                        gx[xi] += go * wv[wi];
                                        gw[wi] += go * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, &gx);
                acc(grads, *w, &gw);
                acc(grads, *b, &gb);
            }
        }
    }

    /// Sums a full-size gradient down to the shape of a broadcast operand.
    fn reduce_broadcast(&self, b: Var, full: Vec<f64>) -> Vec<f64> {
        let nb = self.value(b).len();
        if nb == full.len() {
            return full;
        }
        let mut out = vec![0.0; nb];
        for (j, v) in full.iter().enumerate() {
            out[j % nb] += v;
        }
        out
    }
}
