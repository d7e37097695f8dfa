//! Tape of executed tensor operations and its reverse sweep.

use std::sync::Arc;

use super::tensor::{Tensor, TensorError};
use crate::fourier::{irfft_into, n_modes, rfft_into};
use realfft::num_complex::Complex64;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Linear { w: Var, x: Var, b: Option<Var> },
    Relu(Var),
    Conv { x: Var, w: Var, b: Option<Var>, cols: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Rfft(Var),
    Irfft(Var),
    ModeMix { x: Var, r: Var, rs: Option<Var>, d: Option<Var> },
    IndexSelect { x: Var, idx: Vec<usize> },
    Reshape(Var),
    RelativeL2 { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; indices are a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one reverse sweep, indexed by the graph's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

/// `c (+)= op(a) * op(b)` for row-major operands; `ta`/`tb` transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    // a is stored as [m,k] (or [k,m] when transposed), b as [k,n] (or [n,k])
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the index ranges implied by the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: value.into(), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn real(&self, v: Var, op: &'static str) -> Result<&[f64], TensorError> {
        self.nodes[v.0].value.real_data(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a rank-2 tensor, got {s:?}"))),
        }
    }

    fn scalar_of(&self, v: Var, op: &'static str) -> Result<f64, TensorError> {
        let d = self.real(v, op)?;
        if d.len() != 1 {
            return Err(shape_err(op, format!("expected a single element, got {}", d.len())));
        }
        Ok(d[0])
    }

    fn zip_real(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64, node: Op) -> Result<Var, TensorError> {
        self.same_shape(a, b, op)?;
        let data = self.real(a, op)?.iter().zip(self.real(b, op)?).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data, None), node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_real(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_real(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_real(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let data = self.real(a, "scale")?.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data, None), Op::Scale(a, c), &[a]))
    }

    /// `x + s` with `s` a single-element tensor.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let c = self.scalar_of(s, "add_scalar")?;
        let data = self.real(x, "add_scalar")?.iter().map(|v| v + c).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data, None), Op::AddScalar(x, s), &[x, s]))
    }

    /// `x * s` with `s` a single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let c = self.scalar_of(s, "mul_scalar")?;
        let data = self.real(x, "mul_scalar")?.iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data, None), Op::MulScalar(x, s), &[x, s]))
    }

    /// Channel mixing `W x + b` for `W: [m, k]`, `x: [k, n]`, `b: [m]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(w, "linear")?;
        let (k2, n) = self.dims2(x, "linear")?;
        if k != k2 {
            return Err(shape_err("linear", format!("weight [{m}, {k}] against input [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.real(b, "linear")?;
            if bias.len() != m {
                return Err(shape_err("linear", format!("bias has {} entries, expected {m}", bias.len())));
            }
            for (row, bv) in out.chunks_mut(n).zip(bias) {
                row.fill(*bv);
            }
        }
        gemm(m, k, n, self.real(w, "linear")?, false, self.real(x, "linear")?, false, &mut out, if b.is_some() { 1.0 } else { 0.0 });
        let mut inputs = vec![w, x];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out, None), Op::Linear { w, x, b }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let data = self.real(x, "relu")?.iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data, None), Op::Relu(x), &[x]))
    }

    /// Stride-1 convolution with periodic wrap: `x: [c_in, n]`,
    /// `w: [c_out, c_in, width]` with odd `width`, `b: [c_out]`.
    pub fn conv1d_periodic(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (cin, n) = self.dims2(x, "conv1d")?;
        let (cout, cin2, width) = match self.value(w).shape() {
            [a, b, c] => (*a, *b, *c),
            s => return Err(shape_err("conv1d", format!("filter must be rank 3, got {s:?}"))),
        };
        if cin != cin2 || width % 2 == 0 {
            return Err(shape_err("conv1d", format!("input [{cin}, {n}] against odd-width filter [{cout}, {cin2}, {width}]")));
        }
        let half = (width / 2) as isize;
        let xd = self.real(x, "conv1d")?;
        let mut cols = vec![0.0; cin * width * n];
        for i in 0..cin {
            let row = &xd[i * n..(i + 1) * n];
            for t in 0..width {
                let dst = &mut cols[(i * width + t) * n..(i * width + t + 1) * n];
                let off = t as isize - half;
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = row[(j as isize + off).rem_euclid(n as isize) as usize];
                }
            }
        }
        let mut out = vec![0.0; cout * n];
        if let Some(b) = b {
            let bias = self.real(b, "conv1d")?;
            if bias.len() != cout {
                return Err(shape_err("conv1d", format!("bias has {} entries, expected {cout}", bias.len())));
            }
            for (row, bv) in out.chunks_mut(n).zip(bias) {
                row.fill(*bv);
            }
        }
        gemm(cout, cin * width, n, self.real(w, "conv1d")?, false, &cols, false, &mut out, if b.is_some() { 1.0 } else { 0.0 });
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(vec![cout, n], out, None), Op::Conv { x, w, b, cols }, &inputs))
    }

    /// Width-2, stride-2 max pooling along the last axis of `[c, n]`; ties
    /// go to the lower index.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, n) = self.dims2(x, "maxpool1d")?;
        if n % 2 != 0 {
            return Err(shape_err("maxpool1d", format!("length {n} is odd")));
        }
        let xd = self.real(x, "maxpool1d")?;
        let mut out = Vec::with_capacity(c * n / 2);
        let mut argmax = Vec::with_capacity(c * n / 2);
        for pair in xd.chunks_exact(2).enumerate() {
            let (p, v) = pair;
            let idx = if v[0] >= v[1] { 2 * p } else { 2 * p + 1 };
            argmax.push(idx);
            out.push(xd[idx]);
        }
        Ok(self.push(Tensor::from_parts(vec![c, n / 2], out, None), Op::MaxPool { x, argmax }, &[x]))
    }

    /// Nearest-neighbour upsampling by 2 along the last axis of `[c, n]`.
    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, n) = self.dims2(x, "upsample")?;
        let out = self.real(x, "upsample")?.iter().flat_map(|v| [*v, *v]).collect();
        Ok(self.push(Tensor::from_parts(vec![c, 2 * n], out, None), Op::Upsample(x), &[x]))
    }

    /// Concatenation along the channel axis of rank-2 tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let (_, n) = self.dims2(xs[0], "concat")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (c, n2) = self.dims2(x, "concat")?;
            if n2 != n {
                return Err(shape_err("concat", format!("lengths {n} and {n2} differ")));
            }
            rows += c;
            out.extend_from_slice(self.real(x, "concat")?);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, n], out, None), Op::Concat(xs.to_vec()), xs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.real(x, "sum")?.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let d = self.real(x, "mean")?;
        let s = d.iter().sum::<f64>() / d.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Row-wise real FFT of `[c, n]` into complex `[c, n/2 + 1]`.
    pub fn rfft(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, n) = self.dims2(x, "rfft")?;
        if n % 2 != 0 {
            return Err(shape_err("rfft", format!("length {n} is odd")));
        }
        let m = n_modes(n);
        let (mut re, mut im) = (vec![0.0; c * m], vec![0.0; c * m]);
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for (r, row) in self.real(x, "rfft")?.chunks_exact(n).enumerate() {
            rfft_into(row, &mut buf);
            for (k, z) in buf.iter().enumerate() {
                re[r * m + k] = z.re;
                im[r * m + k] = z.im;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, m], re, Some(im)), Op::Rfft(x), &[x]))
    }

    /// Row-wise inverse real FFT of complex `[c, m]` onto `[c, n]`;
    /// modes past `m` are zero.
    pub fn irfft(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        let (c, m) = self.dims2(x, "irfft")?;
        if n % 2 != 0 || m > n_modes(n) {
            return Err(shape_err("irfft", format!("{m} modes cannot map onto length {n}")));
        }
        let (re, im) = self.value(x).complex_data("irfft")?;
        let mut out = vec![0.0; c * n];
        let mut modes = vec![Complex64::new(0.0, 0.0); m];
        for (r, dst) in out.chunks_exact_mut(n).enumerate() {
            for (k, z) in modes.iter_mut().enumerate() {
                *z = Complex64::new(re[r * m + k], im[r * m + k]);
            }
            irfft_into(&modes, dst);
        }
        Ok(self.push(Tensor::from_parts(vec![c, n], out, None), Op::Irfft(x), &[x]))
    }

    /// Per-mode channel mixing of complex `x: [c, m]` by complex
    /// `r: [k, c, c]`, optionally plus `rs: [k, c, c]` scaled by real
    /// `d: [k]`. Modes `k..m` of the output are zero.
    pub fn complex_mode_mix(&mut self, x: Var, r: Var, rs: Option<Var>, d: Option<Var>) -> Result<Var, TensorError> {
        let (c, m) = self.dims2(x, "mode_mix")?;
        let kk = match self.value(r).shape() {
            [k, a, b] if *a == c && *b == c && *k <= m => *k,
            s => return Err(shape_err("mode_mix", format!("weights {s:?} against input [{c}, {m}]"))),
        };
        if rs.is_some() != d.is_some() {
            return Err(shape_err("mode_mix", "the secondary weights and their ratios come together"));
        }
        if let (Some(rs), Some(d)) = (rs, d) {
            if self.value(rs).shape() != self.value(r).shape() {
                return Err(shape_err("mode_mix", "secondary weights differ in shape"));
            }
            if self.value(d).shape() != [kk] {
                return Err(shape_err("mode_mix", format!("ratios {:?}, expected [{kk}]", self.value(d).shape())));
            }
        }
        let (xr, xi) = self.value(x).complex_data("mode_mix")?;
        let (rr, ri) = self.value(r).complex_data("mode_mix")?;
        let sec = match (rs, d) {
            (Some(rs), Some(d)) => {
                let (a, b) = self.value(rs).complex_data("mode_mix")?;
                Some((a, b, self.real(d, "mode_mix")?))
            }
            _ => None,
        };
        let mut or = vec![0.0; c * m];
        let mut oi = vec![0.0; c * m];
        for k in 0..kk {
            for i in 0..c {
                let (mut ar, mut ai) = (0.0, 0.0);
                let base = (k * c + i) * c;
                for j in 0..c {
                    let (mut wr, mut wi) = (rr[base + j], ri[base + j]);
                    if let Some((sr, si, dd)) = sec {
                        wr += sr[base + j] * dd[k];
                        wi += si[base + j] * dd[k];
                    }
                    let (vr, vi) = (xr[j * m + k], xi[j * m + k]);
                    ar += wr * vr - wi * vi;
                    ai += wr * vi + wi * vr;
                }
                or[i * m + k] = ar;
                oi[i * m + k] = ai;
            }
        }
        let mut inputs = vec![x, r];
        inputs.extend(rs);
        inputs.extend(d);
        Ok(self.push(Tensor::from_parts(vec![c, m], or, Some(oi)), Op::ModeMix { x, r, rs, d }, &inputs))
    }

    /// Gathers entries of a real tensor (flattened) by index.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let d = self.real(x, "index_select")?;
        if let Some(bad) = idx.iter().find(|&&i| i >= d.len()) {
            return Err(shape_err("index_select", format!("index {bad} out of range {}", d.len())));
        }
        let out = idx.iter().map(|&i| d[i]).collect();
        Ok(self.push(Tensor::from_parts(vec![idx.len()], out, None), Op::IndexSelect { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = (*self.nodes[x.0].value).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `||pred - target||_2 / ||target||_2` over all elements.
    pub fn relative_l2(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.same_shape(pred, target, "relative_l2")?;
        let (p, t) = (self.real(pred, "relative_l2")?, self.real(target, "relative_l2")?);
        let nd = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let nt = t.iter().map(|b| b * b).sum::<f64>().sqrt();
        Ok(self.push(Tensor::scalar(nd / nt), Op::RelativeL2 { pred, target }, &[pred, target]))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients, TensorError> {
        if self.value(out).len() != 1 || self.value(out).is_complex() {
            return Err(shape_err("backward", "the seedless sweep needs a real scalar output"));
        }
        self.backward_with(out, Tensor::from_parts(self.value(out).shape().to_vec(), vec![1.0], None))
    }

    /// Reverse sweep with an explicit cotangent for `out` (a vector-Jacobian
    /// product).
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients, TensorError> {
        if !self.nodes[out.0].requires_grad {
            return Err(TensorError::Detached);
        }
        if seed.shape() != self.value(out).shape() || seed.is_complex() != self.value(out).is_complex() {
            return Err(shape_err("backward", "seed does not match the output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.axpy(1.0, &g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &*self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(val(v).shape().to_vec(), data, None);
        let gd = g.re();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                let neg = like(*b, gd.iter().map(|v| -v).collect());
                self.acc(grads, *a, g);
                self.acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = gd.iter().zip(val(*b).re()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(val(*a).re()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, like(*b, d));
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|v| v * c).collect();
                self.acc(grads, *a, like(*a, d));
            }
            Op::AddScalar(x, s) => {
                if self.wants(*s) {
                    self.acc(grads, *s, like(*s, vec![gd.iter().sum()]));
                }
                self.acc(grads, *x, like(*x, gd.to_vec()));
            }
            Op::MulScalar(x, s) => {
                let c = val(*s).re()[0];
                if self.wants(*s) {
                    let d = gd.iter().zip(val(*x).re()).map(|(a, b)| a * b).sum();
                    self.acc(grads, *s, like(*s, vec![d]));
                }
                if self.wants(*x) {
                    self.acc(grads, *x, like(*x, gd.iter().map(|v| v * c).collect()));
                }
            }
            Op::Linear { w, x, b } => {
                let (m, k) = (val(*w).shape()[0], val(*w).shape()[1]);
                let n = val(*x).shape()[1];
                if self.wants(*w) {
                    let mut dw = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, val(*x).re(), true, &mut dw, 0.0);
                    self.acc(grads, *w, like(*w, dw));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; k * n];
                    gemm(k, m, n, val(*w).re(), true, gd, false, &mut dx, 0.0);
                    self.acc(grads, *x, like(*x, dx));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let db = gd.chunks_exact(n).map(|r| r.iter().sum()).collect();
                    self.acc(grads, b, like(b, db));
                }
            }
            Op::Relu(x) => {
                let d = gd.iter().zip(val(*x).re()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.acc(grads, *x, like(*x, d));
            }
            Op::Conv { x, w, b, cols } => {
                let (cin, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let (cout, width) = (val(*w).shape()[0], val(*w).shape()[2]);
                let ck = cin * width;
                if self.wants(*w) {
                    let mut dw = vec![0.0; cout * ck];
                    gemm(cout, n, ck, gd, false, cols, true, &mut dw, 0.0);
                    self.acc(grads, *w, like(*w, dw));
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; ck * n];
                    gemm(ck, cout, n, val(*w).re(), true, gd, false, &mut dcols, 0.0);
                    let half = (width / 2) as isize;
                    let mut dx = vec![0.0; cin * n];
                    for i in 0..cin {
                        for t in 0..width {
                            let src = &dcols[(i * width + t) * n..(i * width + t + 1) * n];
                            let off = t as isize - half;
                            for (j, s) in src.iter().enumerate() {
                                dx[i * n + (j as isize + off).rem_euclid(n as isize) as usize] += s;
                            }
                        }
                    }
                    self.acc(grads, *x, like(*x, dx));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let db = gd.chunks_exact(n).map(|r| r.iter().sum()).collect();
                    self.acc(grads, b, like(b, db));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (g, &i) in gd.iter().zip(argmax) {
                    dx[i] += g;
                }
                self.acc(grads, *x, like(*x, dx));
            }
            Op::Upsample(x) => {
                let dx = gd.chunks_exact(2).map(|p| p[0] + p[1]).collect();
                self.acc(grads, *x, like(*x, dx));
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    if self.wants(x) {
                        self.acc(grads, x, like(x, gd[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::Sum(x) => {
                let len = val(*x).len();
                self.acc(grads, *x, like(*x, vec![gd[0]; len]));
            }
            Op::Mean(x) => {
                let len = val(*x).len();
                self.acc(grads, *x, like(*x, vec![gd[0] / len as f64; len]));
            }
            Op::Rfft(x) => {
                let (c, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let m = n_modes(n);
                let gi = g.im().expect("complex cotangent");
                let mut dx = vec![0.0; c * n];
                let mut modes = vec![Complex64::new(0.0, 0.0); m];
                for (r, dst) in dx.chunks_exact_mut(n).enumerate() {
                    for (k, z) in modes.iter_mut().enumerate() {
                        let v = Complex64::new(gd[r * m + k], gi[r * m + k]);
                        *z = if k == 0 || k == n / 2 { v } else { v * 0.5 };
                    }
                    // the DC and Nyquist imaginary parts do not reach the signal
                    irfft_into(&modes, dst);
                    dst.iter_mut().for_each(|v| *v *= n as f64);
                }
                self.acc(grads, *x, like(*x, dx));
            }
            Op::Irfft(x) => {
                let (c, m) = (val(*x).shape()[0], val(*x).shape()[1]);
                let n = node.value.shape()[1];
                let (mut dr, mut di) = (Vec::with_capacity(c * m), Vec::with_capacity(c * m));
                let mut f = vec![Complex64::new(0.0, 0.0); n_modes(n)];
                for row in gd.chunks_exact(n) {
                    rfft_into(row, &mut f);
                    for (k, z) in f.iter().take(m).enumerate() {
                        if k == 0 || k == n / 2 {
                            dr.push(z.re / n as f64);
                            di.push(0.0);
                        } else {
                            dr.push(2.0 * z.re / n as f64);
                            di.push(2.0 * z.im / n as f64);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(vec![c, m], dr, Some(di)));
            }
            Op::ModeMix { x, r, rs, d } => self.mode_mix_backward(&g, *x, *r, *rs, *d, grads),
            Op::IndexSelect { x, idx } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (g, &i) in gd.iter().zip(idx) {
                    dx[i] += g;
                }
                self.acc(grads, *x, like(*x, dx));
            }
            Op::Reshape(x) => {
                let t = g.reshaped(val(*x).shape()).expect("element count preserved");
                self.acc(grads, *x, t);
            }
            Op::RelativeL2 { pred, target } => {
                let (p, t) = (val(*pred).re(), val(*target).re());
                let nd = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let nt = t.iter().map(|b| b * b).sum::<f64>().sqrt();
                let gs = gd[0];
                let inv = if nd > 0.0 { gs / (nd * nt) } else { 0.0 };
                if self.wants(*pred) {
                    let d = p.iter().zip(t).map(|(a, b)| inv * (a - b)).collect();
                    self.acc(grads, *pred, like(*pred, d));
                }
                if self.wants(*target) {
                    let c = gs * nd / (nt * nt * nt);
                    let d = p.iter().zip(t).map(|(a, b)| -inv * (a - b) - c * b).collect();
                    self.acc(grads, *target, like(*target, d));
                }
            }
        }
    }

    /// Gradient slot of `v`, created as zeros on first use.
    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        let t = self.value(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros_like(t))
    }

    fn mode_mix_backward(&self, g: &Tensor, x: Var, r: Var, rs: Option<Var>, d: Option<Var>, grads: &mut [Option<Tensor>]) {
        let xv = &*self.nodes[x.0].value;
        let (c, m) = (xv.shape()[0], xv.shape()[1]);
        let kk = self.value(r).shape()[0];
        let (xr, xi) = (xv.re(), xv.im().expect("complex input"));
        let (gr, gi) = (g.re(), g.im().expect("complex cotangent"));
        let (rr, ri) = (self.value(r).re(), self.value(r).im().expect("complex weights"));
        let sec = rs.zip(d).map(|(rs, d)| {
            let t = self.value(rs);
            (t.re(), t.im().expect("complex weights"), self.value(d).re())
        });
        let gk = |v: &[f64], k: usize| -> Vec<f64> { (0..c).map(|i| v[i * m + k]).collect() };

        // effective weights w = r + rs * d, and the outer products G conj(x)
        if self.wants(x) {
            let mut dxr = vec![0.0; c * m];
            let mut dxi = vec![0.0; c * m];
            for k in 0..kk {
                for i in 0..c {
                    let (g_r, g_i) = (gr[i * m + k], gi[i * m + k]);
                    if g_r == 0.0 && g_i == 0.0 {
                        continue;
                    }
                    let base = (k * c + i) * c;
                    for j in 0..c {
                        let (mut wr, mut wi) = (rr[base + j], ri[base + j]);
                        if let Some((sr, si, dv)) = sec {
                            wr += sr[base + j] * dv[k];
                            wi += si[base + j] * dv[k];
                        }
                        // conj(w) * G
                        dxr[j * m + k] += wr * g_r + wi * g_i;
                        dxi[j * m + k] += wr * g_i - wi * g_r;
                    }
                }
            }
            self.acc(grads, x, Tensor::from_parts(vec![c, m], dxr, Some(dxi)));
        }
        let want_r = self.wants(r);
        let want_rs = rs.is_some_and(|v| self.wants(v));
        let want_d = d.is_some_and(|v| self.wants(v));
        if !(want_r || want_rs || want_d) {
            return;
        }
        let mut pr = vec![0.0; kk * c * c];
        let mut pi = vec![0.0; kk * c * c];
        for k in 0..kk {
            let (gkr, gki, xkr, xki) = (gk(gr, k), gk(gi, k), gk(xr, k), gk(xi, k));
            for i in 0..c {
                let base = (k * c + i) * c;
                let (g_r, g_i) = (gkr[i], gki[i]);
                for j in 0..c {
                    // G * conj(x)
                    pr[base + j] = g_r * xkr[j] + g_i * xki[j];
                    pi[base + j] = g_i * xkr[j] - g_r * xki[j];
                }
            }
        }
        if want_r {
            let t = self.slot(grads, r);
            accumulate(t.re_mut(), 1.0, &pr);
            accumulate(t.im_mut().expect("complex weights"), 1.0, &pi);
        }
        if let Some((sr, si, dv)) = sec {
            if want_d {
                // Re(conj(G) * rs * x) summed over the mode's channel pairs
                let t = self.slot(grads, d.expect("ratios present"));
                let dd = t.re_mut();
                for k in 0..kk {
                    let span = k * c * c..(k + 1) * c * c;
                    dd[k] += pr[span.clone()].iter().zip(&sr[span.clone()]).map(|(a, b)| a * b).sum::<f64>()
                        + pi[span.clone()].iter().zip(&si[span]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if want_rs {
                let t = self.slot(grads, rs.expect("secondary weights present"));
                // each mode block scales by its ratio
                let tr = t.re_mut();
                for k in 0..kk {
                    let span = k * c * c..(k + 1) * c * c;
                    accumulate(&mut tr[span.clone()], dv[k], &pr[span]);
                }
                let ti = t.im_mut().expect("complex weights");
                for k in 0..kk {
                    let span = k * c * c..(k + 1) * c * c;
                    accumulate(&mut ti[span.clone()], dv[k], &pi[span]);
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += alpha * b;
    }
}

