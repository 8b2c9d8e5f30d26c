//! Dense row-major `f64` tensors and the raw kernels shared by the eager
//! API and the autograd tape.

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds an `rows.len() × n` matrix. All rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::shape("Tensor::from_rows", &[n], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix (first dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a matrix (last dimension).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", &self.shape, &[]));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, &self.shape, &[]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        Tensor::new(&[m, n], mm(&self.data, &other.data, m, k, n))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.require_matrix("softmax_rows")?;
        if n == 0 {
            return Err(Error::shape("softmax_rows", &self.shape, &[m, 1]));
        }
        Tensor::new(&self.shape, softmax_rows(&self.data, n))
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.require_matrix("log_softmax_rows")?;
        if n == 0 {
            return Err(Error::shape("log_softmax_rows", &self.shape, &[m, 1]));
        }
        Tensor::new(&self.shape, log_softmax_rows(&self.data, n))
    }

    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (_, n) = self.require_matrix("l2_normalize_rows")?;
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::invalid(format!("eps must be positive, got {eps}")));
        }
        let (out, _) = l2_normalize_rows(&self.data, n, eps);
        Tensor::new(&self.shape, out)
    }
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Log-sum-exp with max shift.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let lse = logsumexp(row);
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Returns normalized rows together with the per-row divisor `max(‖x‖, eps)`.
pub(crate) fn l2_normalize_rows(x: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(x.len());
    let mut divisors = Vec::with_capacity(x.len() / n.max(1));
    for row in x.chunks(n) {
        let d = norm(row).max(eps);
        divisors.push(d);
        out.extend(row.iter().map(|v| v / d));
    }
    (out, divisors)
}
