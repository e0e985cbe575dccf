//! Dense row-major tensors and the plain (untaped) kernels the tape and the
//! recurrent decode path share. Every reduction sums in ascending index
//! order starting from zero, so a row computed here matches the same row of
//! a batched call bit for bit.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::scalar::{sigmoid, silu, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

/// How the right-hand operand of a binary op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Both operands share a shape.
    Same,
    /// Right operand holds a single value.
    Scalar,
    /// Right operand is one row, repeated over the leading dimension.
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Silu,
    Exp,
    Square,
}

impl UnaryOp {
    #[inline]
    pub fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            UnaryOp::Sigmoid => sigmoid(z),
            UnaryOp::Silu => silu(z),
            UnaryOp::Exp => z.exp(),
            UnaryOp::Square => z * z,
        }
    }

    /// Derivative expressed through the input `z` and output `y`.
    #[inline]
    pub fn derivative<F: Scalar>(self, z: F, y: F) -> F {
        match self {
            UnaryOp::Sigmoid => y * (F::one() - y),
            UnaryOp::Silu => {
                let s = sigmoid(z);
                s * (F::one() + z * (F::one() - s))
            }
            UnaryOp::Exp => y,
            UnaryOp::Square => F::lit(2.0) * z,
        }
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Build from nested rows of `f64` literals (tests and examples).
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|row| row.iter().map(|&v| F::lit(v))).collect();
        Self::new(vec![r, c], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::lit(rng.gen_range(-bound..=bound))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Rows of a rank-2 tensor (or 1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Extent of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn sum(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v)
    }

    pub fn sum_squares(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v * v)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: F) {
        for a in &mut self.data {
            *a = v;
        }
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(dim_err(op, format!("expected rank 2, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self [p×q] · other [q×r]`.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (p, q) = self.expect_matrix("matmul")?;
        let (q2, r) = other.expect_matrix("matmul")?;
        if q != q2 {
            return Err(dim_err(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![F::zero(); p * r];
        matmul_into(&self.data, &other.data, &mut out, p, q, r);
        Tensor::new(vec![p, r], out)
    }

    /// `self [p×q] · otherᵀ` where `other` is `[r×q]`.
    pub fn matmul_nt(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (p, q) = self.expect_matrix("matmul_nt")?;
        let (r, q2) = other.expect_matrix("matmul_nt")?;
        if q != q2 {
            return Err(dim_err(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape, other.shape),
            ));
        }
        let bt = other.transpose()?;
        let mut out = vec![F::zero(); p * r];
        matmul_into(&self.data, &bt.data, &mut out, p, q, r);
        Tensor::new(vec![p, r], out)
    }

    /// `selfᵀ · other` where `self` is `[q×p]` and `other` is `[q×r]`.
    pub fn matmul_tn(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (q, p) = self.expect_matrix("matmul_tn")?;
        let (q2, r) = other.expect_matrix("matmul_tn")?;
        if q != q2 {
            return Err(dim_err(
                "matmul_tn",
                format!("{:?}^T x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![F::zero(); p * r];
        for k in 0..q {
            let a_row = &self.data[k * p..(k + 1) * p];
            let b_row = &other.data[k * r..(k + 1) * r];
            for (i, &aki) in a_row.iter().enumerate() {
                let o = &mut out[i * r..(i + 1) * r];
                for (oj, &bkj) in o.iter_mut().zip(b_row) {
                    *oj += aki * bkj;
                }
            }
        }
        Tensor::new(vec![p, r], out)
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Resolve how `other` broadcasts against `self`.
    pub fn broadcast_kind(&self, other: &Tensor<F>, op: &'static str) -> Result<Broadcast> {
        if self.shape == other.shape {
            Ok(Broadcast::Same)
        } else if other.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if other.rank() == 1 && self.rank() >= 1 && self.cols() == other.len() {
            Ok(Broadcast::Row)
        } else {
            Err(dim_err(
                op,
                format!("cannot broadcast {:?} onto {:?}", other.shape, self.shape),
            ))
        }
    }

    pub fn binary(&self, op: BinaryOp, other: &Tensor<F>) -> Result<Tensor<F>> {
        let kind = self.broadcast_kind(other, "elementwise")?;
        let f = |a: F, b: F| match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        };
        let data = match kind {
            Broadcast::Same => self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            Broadcast::Scalar => {
                let b = other.data[0];
                self.data.iter().map(|&a| f(a, b)).collect()
            }
            Broadcast::Row => {
                let c = other.len();
                self.data
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| f(a, other.data[i % c]))
                    .collect()
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn unary(&self, op: UnaryOp) -> Tensor<F> {
        self.map(|z| op.apply(z))
    }

    /// Outer product of two vectors: `out[i][j] = u[i]·v[j]`.
    pub fn outer(u: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
        if u.rank() != 1 || v.rank() != 1 {
            return Err(dim_err(
                "outer",
                format!("expected two vectors, got {:?} and {:?}", u.shape, v.shape),
            ));
        }
        let (d, m) = (u.len(), v.len());
        let mut out = Vec::with_capacity(d * m);
        for &ui in &u.data {
            for &vj in &v.data {
                out.push(ui * vj);
            }
        }
        Tensor::new(vec![d, m], out)
    }

    /// RMS normalisation of every row (a vector is a single row).
    pub fn rmsnorm(&self, gain: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let d = self.cols();
        if gain.len() != d || d == 0 {
            return Err(dim_err(
                "rmsnorm",
                format!("gain {:?} vs input {:?}", gain.shape, self.shape),
            ));
        }
        let mut out = self.clone();
        for r in 0..self.rows() {
            rmsnorm_row(self.row(r), &gain.data, eps, out.row_mut(r));
        }
        Ok(out)
    }

    /// Depthwise causal convolution. `self` is `[T×d]`, `kernel` is `[w×d]`,
    /// tap `w−1` multiplies the current step.
    pub fn causal_conv1d(&self, kernel: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let (t_len, d) = self.expect_matrix("causal_conv1d")?;
        let (w, d2) = kernel.expect_matrix("causal_conv1d")?;
        if w < 1 {
            return Err(Error::InvalidArgument("conv width must be >= 1".into()));
        }
        if d2 != d || bias.len() != d {
            return Err(dim_err(
                "causal_conv1d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}",
                    self.shape, kernel.shape, bias.shape
                ),
            ));
        }
        let mut out = vec![F::zero(); t_len * d];
        for t in 0..t_len {
            let o = &mut out[t * d..(t + 1) * d];
            conv_row(
                |s| {
                    // tap s reads x[t - (w-1) + s]
                    let idx = t + s;
                    if idx + 1 >= w {
                        Some(self.row(idx + 1 - w))
                    } else {
                        None
                    }
                },
                kernel,
                &bias.data,
                o,
            );
        }
        Tensor::new(vec![t_len, d], out)
    }
}

/// `out += a[p×q] · b[q×r]`, i-k-j order.
pub(crate) fn matmul_into<F: Scalar>(a: &[F], b: &[F], out: &mut [F], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let o = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            let b_row = &b[k * r..(k + 1) * r];
            for (oj, &bkj) in o.iter_mut().zip(b_row) {
                *oj += aik * bkj;
            }
        }
    }
}

/// Row vector times matrix stored `[in×out]`.
pub fn vecmat<F: Scalar>(x: &[F], w: &Tensor<F>, out: &mut [F]) {
    let (q, r) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), q);
    out.iter_mut().for_each(|o| *o = F::zero());
    matmul_into(x, w.data(), out, 1, q, r);
}

/// Matrix stored `[out×in]` applied to a vector: `out[j] = Σᵢ w[j][i]·x[i]`.
pub fn matvec<F: Scalar>(w: &Tensor<F>, x: &[F], out: &mut [F]) {
    let cols = w.cols();
    debug_assert_eq!(x.len(), cols);
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w.data()[j * cols..(j + 1) * cols];
        let mut acc = F::zero();
        for (&wji, &xi) in row.iter().zip(x) {
            acc += xi * wji;
        }
        *o = acc;
    }
}

pub fn rmsnorm_row<F: Scalar>(x: &[F], gain: &[F], eps: F, out: &mut [F]) {
    let d = F::lit(x.len() as f64);
    let ms = x.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
    let inv = F::one() / (ms + eps).sqrt();
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xi * inv * g;
    }
}

/// One output row of the causal convolution. `tap(s)` yields the input row
/// seen by kernel tap `s`, or `None` inside the left zero padding.
pub fn conv_row<'a, F: Scalar>(
    tap: impl Fn(usize) -> Option<&'a [F]>,
    kernel: &Tensor<F>,
    bias: &[F],
    out: &mut [F],
) {
    let w = kernel.rows();
    out.iter_mut().for_each(|o| *o = F::zero());
    for s in 0..w {
        if let Some(x) = tap(s) {
            let k = kernel.row(s);
            for ((o, &ks), &xv) in out.iter_mut().zip(k).zip(x) {
                *o += ks * xv;
            }
        }
    }
    for (o, &b) in out.iter_mut().zip(bias) {
        *o += b;
    }
}

/// Masked mean token cross-entropy. Returns the loss and the row-wise
/// softmax used by the adjoint.
pub fn cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    mask: &[F],
) -> Result<(F, Vec<F>)> {
    if logits.rank() != 2 {
        return Err(dim_err("cross_entropy", "logits must be [T×V]"));
    }
    let (t_len, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != t_len || mask.len() != t_len {
        return Err(dim_err(
            "cross_entropy",
            format!("T={t_len}, targets {}, mask {}", targets.len(), mask.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::InvalidArgument(format!("target {bad} outside vocab {v}")));
    }
    let weight = mask.iter().fold(F::zero(), |a, &m| a + m);
    if weight <= F::zero() {
        return Err(Error::EmptyInput("cross_entropy mask"));
    }
    let mut probs = vec![F::zero(); t_len * v];
    let mut total = F::zero();
    for t in 0..t_len {
        let row = logits.row(t);
        let mx = row.iter().fold(F::neg_infinity(), |m, &z| m.max(z));
        let p = &mut probs[t * v..(t + 1) * v];
        let mut z_sum = F::zero();
        for (pi, &z) in p.iter_mut().zip(row) {
            *pi = (z - mx).exp();
            z_sum += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= z_sum;
        }
        if mask[t] != F::zero() {
            let nll = z_sum.ln() + mx - row[targets[t]];
            total += mask[t] * nll;
        }
    }
    Ok((total / weight, probs))
}
