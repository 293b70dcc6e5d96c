use std::ops::Range;

use super::kernels::{self, ConvGeom};
use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Threshold below which [`Graph::l2_normalize`] refuses to divide.
pub const NORM_EPS: f64 = 1e-12;

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Wrong backward rules that can be switched on to prove gradient checks catch them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Sigmoid backward uses `s` instead of `s * (1 - s)`.
    SigmoidBackward,
    /// ReLU backward passes the gradient through negative inputs.
    ReluBackward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch moments observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<f64>,
    /// Number of elements per channel.
    pub count: usize,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Gap { x: Var, hw: usize },
    Crop { x: Var, rows: Range<usize>, cols: Range<usize> },
    Linear { x: Var, w: Var, b: Var, batch: usize },
    Mul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    ScaleChannels { x: Var, s: Var, hw: usize },
    ConcatChannels { parts: Vec<Var>, batch: usize },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    PairSqDist { e: Var, pairs: Vec<(usize, usize)> },
    Gather { x: Var, idx: Vec<usize> },
    AddBroadcast { v: Var, s: Var },
    Neg(Var),
    AddConst(Var),
    MulConst(Var, f64),
    Sum(Var),
    Concat(Vec<Var>),
    Log1pSumExp(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the node list is
/// already topologically sorted for the reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    fault: Option<Fault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a reverse sweep: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when `v` does not reach the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// `(name, gradient)` for every parameter registered in the graph.
    pub fn params(&self) -> impl Iterator<Item = (&str, Tensor)> + '_ {
        self.params.iter().map(|(n, v)| (n.as_str(), self.tensor(*v)))
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *dst = Some(delta),
    }
}

fn batch_of(shape: &[usize], spatial_rank: usize) -> Option<usize> {
    match shape.len() {
        n if n == spatial_rank => Some(1),
        n if n == spatial_rank + 1 => Some(shape[0]),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new(), fault: None }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph { fault: Some(fault), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; gradients are not propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a named parameter from `store`. Registering the same name twice
    /// returns the existing node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let t = store.value(name)?.clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    // ---- convolution & normalization ------------------------------------------------

    /// Cross-correlation over `[Cin,H,W]` or `[N,Cin,H,W]` with weight `[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let batch = batch_of(&xs, 3).ok_or_else(|| Error::shape("conv2d", format!("input {xs:?}")))?;
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight {ws:?}")));
        }
        let (cin, h, wd) = (xs[xs.len() - 3], xs[xs.len() - 2], xs[xs.len() - 1]);
        if ws[1] != cin {
            return Err(Error::shape("conv2d", format!("input channels {cin} vs weight {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        if h + 2 * pad < ws[2] || wd + 2 * pad < ws[3] {
            return Err(Error::shape("conv2d", format!("kernel {ws:?} exceeds padded input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom { cin, h, w: wd, cout: ws[0], kh: ws[2], kw: ws[3], stride, pad };
        let out = kernels::conv2d_forward(
            &geom,
            batch,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = vec![geom.cout, geom.out_h(), geom.out_w()];
        if xs.len() == 4 {
            shape.insert(0, batch);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, geom, batch }, rg))
    }

    /// Batch norm over `[N,C,H,W]`. Train mode normalizes with the batch moments and
    /// returns them; eval mode uses the supplied running statistics.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        mode: BnMode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batchnorm2d", format!("expected [N,C,H,W], got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.0.len() != c || running.1.len() != c {
            return Err(Error::shape("batchnorm2d", format!("{c} channels vs parameter lengths")));
        }
        let xv = self.value(x).data();
        let count = n * hw;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for i in 0..n {
                        q += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                (mean, var)
            }
            BnMode::Eval => (running.0.to_vec(), running.1.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for j in r {
                    let z = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = z;
                    out[j] = gv[ch] * z + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = mode == BnMode::Train;
        let moments = train.then_some(BatchMoments { mean, var, count });
        let v = self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            rg,
        );
        Ok((v, moments))
    }

    /// 2x2/stride-2 max pooling with ceil rounding over the last two axes.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape("maxpool2", format!("{xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = xs[..xs.len() - 2].iter().product();
        let (out, argmax) = kernels::maxpool2_forward(planes, h, w, self.value(x).data());
        let mut shape = xs.clone();
        let nd = shape.len();
        shape[nd - 2] = h.div_ceil(2);
        shape[nd - 1] = w.div_ceil(2);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    // ---- elementwise --------------------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::MulConst(x, c))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    /// Hadamard product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Multiplies channel `c` of `x` (`[C,H,W]` or `[N,C,H,W]`) by `s[c]` (`[C]` or `[N,C]`).
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        let ok = (xs.len() == 3 && ss == [xs[0]]) || (xs.len() == 4 && ss == [xs[0], xs[1]]);
        if !ok {
            return Err(Error::shape("scale_channels", format!("{xs:?} scaled by {ss:?}")));
        }
        let hw = xs[xs.len() - 2] * xs[xs.len() - 1];
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sv)
            .flat_map(|(plane, &m)| plane.iter().map(move |v| v * m))
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(xs, data)?, Op::ScaleChannels { x, s, hw }, rg))
    }

    /// Concatenates `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::shape("concat_channels", format!("{first:?}")));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut ctot = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape("concat_channels", format!("{first:?} vs {s:?}")));
            }
            ctot += s[1];
        }
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[i * len..(i + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![n, ctot, h, w], data)?,
            Op::ConcatChannels { parts: parts.to_vec(), batch: n },
            rg,
        ))
    }

    // ---- pooling, slicing, dense ----------------------------------------------------

    /// Global average pooling: `[C,H,W] -> [C]`, `[N,C,H,W] -> [N,C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 && xs.len() != 4 {
            return Err(Error::shape("gap", format!("{xs:?}")));
        }
        let hw = xs[xs.len() - 2] * xs[xs.len() - 1];
        let data: Vec<f64> = self.value(x).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let shape = xs[..xs.len() - 2].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gap { x, hw }, rg))
    }

    /// Spatial window `rows x cols` of a `[C,H,W]` or `[N,C,H,W]` tensor.
    pub fn crop(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape("crop", format!("{xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if rows.is_empty() || cols.is_empty() || rows.end > h || cols.end > w {
            return Err(Error::shape("crop", format!("window {rows:?}x{cols:?} outside {h}x{w}")));
        }
        let mut data = Vec::new();
        for plane in self.value(x).data().chunks(h * w) {
            for r in rows.clone() {
                data.extend_from_slice(&plane[r * w + cols.start..r * w + cols.end]);
            }
        }
        let mut shape = xs.clone();
        let nd = shape.len();
        shape[nd - 2] = rows.len();
        shape[nd - 1] = cols.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Crop { x, rows, cols }, rg))
    }

    /// `x W^T + b` for `x` of shape `[n]` or `[N,n]`, `W` `[m,n]`, `b` `[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let batch = batch_of(&xs, 1).ok_or_else(|| Error::shape("linear", format!("input {xs:?}")))?;
        if ws.len() != 2 || ws[1] != xs[xs.len() - 1] || self.shape(b) != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?}, W {ws:?}, b {:?}", self.shape(b)),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m);
        for i in 0..batch {
            let row = &xv[i * n..(i + 1) * n];
            for j in 0..m {
                let wr = &wv[j * n..(j + 1) * n];
                out.push(bv[j] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let shape = if xs.len() == 1 { vec![m] } else { vec![batch, m] };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b, batch }, rg))
    }

    /// Divides every row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().unwrap();
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) {
                return Err(Error::DegenerateVector { norm, threshold: NORM_EPS });
            }
            data.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(xs, data)?, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Squared Euclidean distances between rows of `e` (`[N,d]`) for each index pair.
    pub fn pair_sq_dist(&mut self, e: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let es = self.shape(e).to_vec();
        if es.len() != 2 || pairs.is_empty() {
            return Err(Error::shape("pair_sq_dist", format!("{es:?} with {} pairs", pairs.len())));
        }
        let (rows, d) = (es[0], es[1]);
        let ev = self.value(e).data();
        let mut out = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if a >= rows || b >= rows {
                return Err(Error::shape("pair_sq_dist", format!("pair ({a},{b}) outside {rows} rows")));
            }
            let (ra, rb) = (&ev[a * d..(a + 1) * d], &ev[b * d..(b + 1) * d]);
            out.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum());
        }
        let rg = self.rg(e);
        Ok(self.push(Tensor::from_vec(out), Op::PairSqDist { e, pairs: pairs.to_vec() }, rg))
    }

    /// Selects flat elements of `x` by index (repeats allowed).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let numel = self.value(x).numel();
        if idx.is_empty() || idx.iter().any(|&i| i >= numel) {
            return Err(Error::shape("gather", format!("indices {idx:?} for {numel} elements")));
        }
        let xv = self.value(x).data();
        let out = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(out), Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    /// `v + s` where `s` holds a single element.
    pub fn add_broadcast(&mut self, v: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item().ok_or_else(|| Error::shape("add_broadcast", "scalar operand"))?;
        let t = self.value(v);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + sv).collect())?;
        let rg = self.rg(v) || self.rg(s);
        Ok(self.push(out, Op::AddBroadcast { v, s }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Flat concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "nothing to concatenate"));
        }
        let data = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(data), Op::Concat(parts.to_vec()), rg))
    }

    /// `ln(1 + sum_i exp(x_i))`, evaluated stably.
    pub fn log1p_sum_exp(&mut self, x: Var) -> Var {
        let xv = self.value(x).data();
        let m = xv.iter().copied().fold(0.0_f64, f64::max);
        let s = (-m).exp() + xv.iter().map(|v| (v - m).exp()).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m + s.ln()), Op::Log1pSumExp(x), rg)
    }

    /// Hash of every non-smooth choice made by the forward pass: ReLU input signs,
    /// max-pool winners, gather indices and the op sequence itself. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            std::mem::discriminant(&node.op).hash(&mut h);
            match &node.op {
                Op::Relu(x) => {
                    for chunk in self.nodes[x.0].value.data().chunks(64) {
                        let bits = chunk.iter().enumerate().fold(0u64, |b, (i, v)| b | (((*v > 0.0) as u64) << i));
                        bits.hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                Op::Gather { idx, .. } => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    // ---- reverse sweep ------------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        grads.resize(self.nodes.len(), None);
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, g: Vec<f64>| {
            if self.rg(v) {
                add_into(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, batch } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = kernels::conv2d_backward(geom, *batch, val(*x), val(*w), dy, need);
                if let Some(dx) = cg.dx {
                    send(*x, dx);
                }
                if let Some(dw) = cg.dw {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    send(*b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = node.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gv = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                            dgamma[ch] += dy[j] * xhat[j];
                            dbeta[ch] += dy[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let m = (n * hw) as f64;
                    let mut dx = vec![0.0; dy.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch];
                            for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                                dx[j] = if *train {
                                    k * (dy[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    k * dy[j]
                                };
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (&i, &d) in argmax.iter().zip(dy) {
                    dx[i] += d;
                }
                send(*x, dx);
            }
            Op::Relu(x) => {
                let leak = self.fault == Some(Fault::ReluBackward);
                let dx = val(*x).iter().zip(dy).map(|(&v, &d)| if v > 0.0 || leak { d } else { 0.0 }).collect();
                send(*x, dx);
            }
            Op::Sigmoid(x) => {
                let wrong = self.fault == Some(Fault::SigmoidBackward);
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&s, &d)| if wrong { d * s } else { d * s * (1.0 - s) })
                    .collect();
                send(*x, dx);
            }
            Op::Exp(x) => {
                let dx = node.value.data().iter().zip(dy).map(|(e, d)| e * d).collect();
                send(*x, dx);
            }
            Op::Gap { x, hw } => {
                let dx = dy.iter().flat_map(|&d| std::iter::repeat_n(d / *hw as f64, *hw)).collect();
                send(*x, dx);
            }
            Op::Crop { x, rows, cols } => {
                let xs = self.nodes[x.0].value.shape();
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                let win = rows.len() * cols.len();
                for (p, dplane) in dy.chunks(win).enumerate() {
                    for (ri, r) in rows.clone().enumerate() {
                        let dst = &mut dx[p * h * w + r * w + cols.start..p * h * w + r * w + cols.end];
                        dst.copy_from_slice(&dplane[ri * cols.len()..(ri + 1) * cols.len()]);
                    }
                }
                send(*x, dx);
            }
            Op::Linear { x, w, b, batch } => {
                let ws = self.nodes[w.0].value.shape();
                let (m, n) = (ws[0], ws[1]);
                let (xv, wv) = (val(*x), val(*w));
                if self.rg(*x) {
                    let mut dx = vec![0.0; batch * n];
                    for i in 0..*batch {
                        for j in 0..m {
                            let d = dy[i * m + j];
                            for (a, &wk) in dx[i * n..(i + 1) * n].iter_mut().zip(&wv[j * n..(j + 1) * n]) {
                                *a += d * wk;
                            }
                        }
                    }
                    send(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; m * n];
                    for i in 0..*batch {
                        for j in 0..m {
                            let d = dy[i * m + j];
                            for (a, &xk) in dw[j * n..(j + 1) * n].iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                                *a += d * xk;
                            }
                        }
                    }
                    send(*w, dw);
                }
                let mut db = vec![0.0; m];
                for i in 0..*batch {
                    for j in 0..m {
                        db[j] += dy[i * m + j];
                    }
                }
                send(*b, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, dy.iter().zip(bv).map(|(d, y)| d * y).collect());
                send(*b, dy.iter().zip(av).map(|(d, x)| d * x).collect());
            }
            Op::Add(a, b) => {
                send(*a, dy.to_vec());
                send(*b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, dy.to_vec());
                send(*b, dy.iter().map(|d| -d).collect());
            }
            Op::ScaleChannels { x, s, hw } => {
                let (xv, sv) = (val(*x), val(*s));
                let dx = dy
                    .chunks(*hw)
                    .zip(sv)
                    .flat_map(|(plane, &m)| plane.iter().map(move |d| d * m))
                    .collect();
                let ds = dy
                    .chunks(*hw)
                    .zip(xv.chunks(*hw))
                    .map(|(dp, xp)| dp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                send(*x, dx);
                send(*s, ds);
            }
            Op::ConcatChannels { parts, batch } => {
                let per: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.numel() / batch).collect();
                let total: usize = per.iter().sum();
                for (k, &p) in parts.iter().enumerate() {
                    let off: usize = per[..k].iter().sum();
                    let mut dp = Vec::with_capacity(per[k] * batch);
                    for i in 0..*batch {
                        dp.extend_from_slice(&dy[i * total + off..i * total + off + per[k]]);
                    }
                    send(p, dp);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = y.len() / norms.len();
                let mut dx = Vec::with_capacity(y.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let (yr, dr) = (&y[r * n..(r + 1) * n], &dy[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(dr).map(|(&yy, &dd)| (dd - yy * dot) / norm));
                }
                send(*x, dx);
            }
            Op::PairSqDist { e, pairs } => {
                let ev = val(*e);
                let d = self.nodes[e.0].value.shape()[1];
                let mut de = vec![0.0; ev.len()];
                for (&(a, b), &g) in pairs.iter().zip(dy) {
                    for k in 0..d {
                        let diff = 2.0 * g * (ev[a * d + k] - ev[b * d + k]);
                        de[a * d + k] += diff;
                        de[b * d + k] -= diff;
                    }
                }
                send(*e, de);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (&i, &d) in idx.iter().zip(dy) {
                    dx[i] += d;
                }
                send(*x, dx);
            }
            Op::AddBroadcast { v, s } => {
                send(*v, dy.to_vec());
                send(*s, vec![dy.iter().sum()]);
            }
            Op::Neg(x) => send(*x, dy.iter().map(|d| -d).collect()),
            Op::AddConst(x) => send(*x, dy.to_vec()),
            Op::MulConst(x, c) => send(*x, dy.iter().map(|d| d * c).collect()),
            Op::Sum(x) => send(*x, vec![dy[0]; self.nodes[x.0].value.numel()]),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    send(p, dy[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Log1pSumExp(x) => {
                let y = node.value.data()[0];
                send(*x, val(*x).iter().map(|v| dy[0] * (v - y).exp()).collect());
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
