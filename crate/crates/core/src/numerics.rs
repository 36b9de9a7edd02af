//! Dense 64-bit tensor engine.
//!
//! Everything is row-major with the batch as the leading dimension. Matrices
//! are rank-2 tensors; affine weights are stored `[out_dim, in_dim]` so that a
//! forward pass is a sequence of contiguous dot products.

use rand::Rng;

use crate::error::{Error, Result};

/// Inputs to [`sigmoid`] are clamped to this magnitude before exponentiation.
pub const SIGMOID_CLAMP: f64 = 500.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} must have positive extents")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {expected} values but buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "shape {shape:?} must have positive extents"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::dim(format!("row {i} has {} columns, expected {cols}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    /// Uniform samples in `[-limit, limit]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(-limit..=limit);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of scalars per leading index.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            debug_assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * n + i;
        }
        off
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::dim(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column-wise concatenation of matrices sharing the leading extent.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::dim("concatenating zero tensors"))?
            .rows();
        let mut total = 0;
        for p in parts {
            if p.rows() != rows {
                return Err(Error::dim(format!("concat rows {} vs {rows}", p.rows())));
            }
            total += p.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::matrix(rows, total, data)
    }

    /// Inverse of [`Tensor::concat_cols`].
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        if widths.iter().sum::<usize>() != self.cols() {
            return Err(Error::dim(format!(
                "split widths {widths:?} do not sum to {} columns",
                self.cols()
            )));
        }
        let rows = self.rows();
        let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
        for r in 0..rows {
            let mut row = self.row(r);
            for (w, buf) in widths.iter().zip(&mut out) {
                buf.extend_from_slice(&row[..*w]);
                row = &row[*w..];
            }
        }
        out.into_iter()
            .zip(widths)
            .map(|(d, &w)| Tensor::matrix(rows, w, d))
            .collect()
    }

    /// Rows `[start, start + n)` as a new matrix.
    pub fn slice_rows(&self, start: usize, n: usize) -> Tensor {
        let c = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = n;
        Tensor {
            shape,
            data: self.data[start * c..(start + n) * c].to_vec(),
        }
    }
}

/// Dot product with four independent partial sums. Summation order is fixed,
/// so results are reproducible bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (ca, cb) in a[..n].chunks_exact(4).zip(b[..n].chunks_exact(4)) {
        s0 += ca[0] * cb[0];
        s1 += ca[1] * cb[1];
        s2 += ca[2] * cb[2];
        s3 += ca[3] * cb[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (x, y) in a[n..].iter().zip(&b[n..]) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[r, o] += sum_i x[r, i] * w[o, i]`
pub fn matmul_nt_acc(x: &[f64], in_dim: usize, w: &[f64], out_dim: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    for (xr, or) in x.chunks_exact(in_dim).zip(out.chunks_exact_mut(out_dim)) {
        for (o, wr) in or.iter_mut().zip(w.chunks_exact(in_dim)) {
            *o += dot(xr, wr);
        }
    }
}

/// `gw[o, i] += sum_r g[r, o] * x[r, i]`
pub fn matmul_tn_acc(g: &[f64], out_dim: usize, x: &[f64], in_dim: usize, gw: &mut [f64]) {
    debug_assert_eq!(gw.len(), out_dim * in_dim);
    for (gr, xr) in g.chunks_exact(out_dim).zip(x.chunks_exact(in_dim)) {
        for (&go, gwr) in gr.iter().zip(gw.chunks_exact_mut(in_dim)) {
            if go != 0.0 {
                axpy(go, xr, gwr);
            }
        }
    }
}

/// `gx[r, i] += sum_o g[r, o] * w[o, i]`
pub fn matmul_nn_acc(g: &[f64], out_dim: usize, w: &[f64], in_dim: usize, gx: &mut [f64]) {
    for (gr, gxr) in g.chunks_exact(out_dim).zip(gx.chunks_exact_mut(in_dim)) {
        for (&go, wr) in gr.iter().zip(w.chunks_exact(in_dim)) {
            if go != 0.0 {
                axpy(go, wr, gxr);
            }
        }
    }
}

/// `acc[c] += sum_r g[r, c]`
pub fn col_sum_acc(g: &[f64], cols: usize, acc: &mut [f64]) {
    for gr in g.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(gr) {
            *a += v;
        }
    }
}

/// Weight matrix `[out_dim, in_dim]` and bias `[out_dim]` of one fully
/// connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.len() != weight.rows() {
            return Err(Error::dim(format!(
                "affine weight {:?} incompatible with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::glorot_scaled(in_dim, out_dim, 1.0, rng)
    }

    /// Glorot-uniform weights with the range multiplied by `gain`.
    pub fn glorot_scaled<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        let limit = gain * (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[out_dim, in_dim], limit, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }

    pub fn add_assign(&mut self, other: &AffineParams) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        self.bias.add_assign(&other.bias)
    }

    pub fn scale(&mut self, s: f64) {
        self.weight.scale(s);
        self.bias.scale(s);
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.in_dim() {
            return Err(Error::dim(format!(
                "input {:?} does not match affine weight {:?}",
                x.shape(),
                self.weight.shape()
            )));
        }
        Ok(())
    }
}

/// Gradients of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub grad_x: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

pub fn affine_forward(x: &Tensor, p: &AffineParams) -> Result<Tensor> {
    p.check_input(x)?;
    let (rows, out_dim) = (x.rows(), p.out_dim());
    let mut out = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        out.extend_from_slice(p.bias.data());
    }
    matmul_nt_acc(x.data(), p.in_dim(), p.weight.data(), out_dim, &mut out);
    Tensor::matrix(rows, out_dim, out)
}

pub fn affine_backward(x: &Tensor, p: &AffineParams, grad_out: &Tensor) -> Result<AffineGrads> {
    let mut acc = p.zeros_like();
    let grad_x = affine_backward_acc(x, p, grad_out, &mut acc, true)?
        .expect("grad_x requested");
    Ok(AffineGrads {
        grad_x,
        grad_w: acc.weight,
        grad_b: acc.bias,
    })
}

/// Accumulates parameter gradients into `acc` and optionally returns the
/// input gradient.
pub fn affine_backward_acc(
    x: &Tensor,
    p: &AffineParams,
    grad_out: &Tensor,
    acc: &mut AffineParams,
    want_grad_x: bool,
) -> Result<Option<Tensor>> {
    p.check_input(x)?;
    if grad_out.rank() != 2 || grad_out.rows() != x.rows() || grad_out.cols() != p.out_dim() {
        return Err(Error::dim(format!(
            "grad_out {:?} inconsistent with input {:?} and weight {:?}",
            grad_out.shape(),
            x.shape(),
            p.weight.shape()
        )));
    }
    if !acc.weight.same_shape(&p.weight) || !acc.bias.same_shape(&p.bias) {
        return Err(Error::dim("gradient accumulator does not match parameters"));
    }
    let (in_dim, out_dim) = (p.in_dim(), p.out_dim());
    matmul_tn_acc(grad_out.data(), out_dim, x.data(), in_dim, acc.weight.data_mut());
    col_sum_acc(grad_out.data(), out_dim, acc.bias.data_mut());
    if !want_grad_x {
        return Ok(None);
    }
    let mut gx = vec![0.0; x.rows() * in_dim];
    matmul_nn_acc(grad_out.data(), out_dim, p.weight.data(), in_dim, &mut gx);
    Ok(Some(Tensor::matrix(x.rows(), in_dim, gx)?))
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    sigmoid_in_place(&mut y);
    y
}

pub fn sigmoid_in_place(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = sigmoid_scalar(*v);
    }
}

/// Gradient through a sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if !y.same_shape(grad_out) {
        return Err(Error::dim(format!("{:?} vs {:?}", y.shape(), grad_out.shape())));
    }
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(y, g)| y * (1.0 - y) * g)
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Pooled values and the index of the winning element of every window.
/// Ties go to the earliest element.
pub fn max_pool_1d(x: &[f64], size: usize, stride: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = pooled_len(x.len(), size, stride)?;
    let mut pooled = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for j in 0..n {
        let start = j * stride;
        let mut best = start;
        for i in start + 1..start + size {
            if x[i] > x[best] {
                best = i;
            }
        }
        pooled.push(x[best]);
        argmax.push(best);
    }
    Ok((pooled, argmax))
}

/// Output length of a valid 1-D pooling; errors unless the windows tile the
/// input exactly.
pub fn pooled_len(n: usize, size: usize, stride: usize) -> Result<usize> {
    if size == 0 || stride == 0 || n < size || (n - size) % stride != 0 {
        return Err(Error::Geometry(format!(
            "cannot pool N={n} with size={size}, stride={stride}"
        )));
    }
    Ok((n - size) / stride + 1)
}

/// Routes pooled gradients back to the winning input positions.
pub fn max_pool_1d_backward(grad_pooled: &[f64], argmax: &[usize], n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n];
    for (&gp, &i) in grad_pooled.iter().zip(argmax) {
        g[i] += gp;
    }
    g
}

/// Central finite-difference gradient of `loss_fn` at `params`.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Numeric(format!("finite-difference step {eps} must be positive")));
    }
    let mut probe = params.clone();
    let mut grad = Tensor::zeros(params.shape());
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = loss_fn(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = loss_fn(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss while probing coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Gradients smaller than this are treated as zero when forming a relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Block relative error `max|a - n| / max(max|a|, max|n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0f64;
    let mut scale = REL_ERR_FLOOR;
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    diff / scale
}
