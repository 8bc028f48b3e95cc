//! Dense row-major `f64` tensors.
//!
//! Storage is a flat `Vec<f64>` in row-major (C) order: the last axis varies
//! fastest. Every public constructor and operation rejects non-finite
//! results, so a NaN or infinity never leaves this module silently.
//!
//! Serialized form (`LSTN`): the 4 magic bytes `LSTN`, one `u8` rank, `rank`
//! little-endian `u32` extents, then the payload as little-endian `f64` in
//! row-major order.

use std::fmt;
use std::io::Write;

use crate::codec::ByteReader;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"LSTN";

/// Inputs to `exp` are clamped to this range before evaluation.
pub const EXP_CLAMP: f64 = 700.0;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    ArgMax,
}

/// `exp` with the input clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
#[inline]
pub fn clamped_exp(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        check_finite(&data, "Tensor::new")?;
        Ok(Tensor { shape, data })
    }

    /// Construct without validation. Callers guarantee the length invariant;
    /// finiteness is checked by the training loop on losses and gradients.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding a single value; broadcasts in binary ops.
    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Flat index of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * e + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul lhs")?;
        let (k2, n) = rhs.as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            [k as isize, 1],
            &rhs.data,
            [n as isize, 1],
            &mut out,
            0.0,
        );
        let out = Tensor::from_raw(vec![m, n], out);
        check_finite(&out.data, "matmul")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_raw(vec![c, r], out))
    }

    /// Binary elementwise op. `rhs` must share the shape of `self` or be a
    /// single-element tensor, which is broadcast.
    pub fn binary(&self, op: BinaryOp, rhs: &Tensor) -> Result<Tensor> {
        let f = match op {
            BinaryOp::Add => |a: f64, b: f64| a + b,
            BinaryOp::Sub => |a: f64, b: f64| a - b,
            BinaryOp::Mul => |a: f64, b: f64| a * b,
        };
        let data: Vec<f64> = if rhs.shape == self.shape {
            self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect()
        } else if rhs.data.len() == 1 {
            let b = rhs.data[0];
            self.data.iter().map(|&a| f(a, b)).collect()
        } else {
            return Err(Error::dim(format!(
                "{op:?}: shapes {:?} and {:?} are incompatible",
                self.shape, rhs.shape
            )));
        };
        check_finite(&data, &format!("{op:?}"))?;
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor> {
        let data: Vec<f64> = match op {
            UnaryOp::Exp => self.data.iter().map(|&a| clamped_exp(a)).collect(),
            UnaryOp::Scale(s) => self.data.iter().map(|&a| a * s).collect(),
        };
        check_finite(&data, &format!("{op:?}"))?;
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Exp)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary(UnaryOp::Scale(s))
    }

    /// Reduces along `axis`; the axis is removed from the output shape.
    /// `ArgMax` returns indices (as `f64`) and resolves ties to the lowest index.
    /// Sums are accumulated sequentially in index order.
    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Domain(format!(
                "axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let extent = self.shape[axis];
        if extent == 0 {
            return Err(Error::Domain("reduction over an empty axis".into()));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| self.data[(o * extent + j) * inner + i];
                let v = match op {
                    ReduceOp::Sum => (0..extent).fold(0.0, |acc, j| acc + at(j)),
                    ReduceOp::Max => (1..extent).fold(at(0), |acc, j| acc.max(at(j))),
                    ReduceOp::ArgMax => {
                        let mut best = 0;
                        for j in 1..extent {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        best as f64
                    }
                };
                out.push(v);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor::from_raw(shape, out))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.rank() + 8 * self.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let rank = u8::try_from(self.rank())
            .map_err(|_| Error::dim(format!("rank {} exceeds 255", self.rank())))?;
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[rank])?;
        for &e in &self.shape {
            let e = u32::try_from(e).map_err(|_| Error::dim(format!("extent {e} exceeds u32")))?;
            w.write_all(&e.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * self.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut r = ByteReader::new(bytes);
        let t = Self::read(&mut r)?;
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after tensor"));
        }
        Ok(t)
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Tensor> {
        r.expect_magic(TENSOR_MAGIC)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.offset();
            let e = r.u32_le()? as usize;
            if e == 0 {
                return Err(Error::format(at, "zero extent"));
            }
            shape.push(e);
        }
        let n: usize = shape.iter().product();
        let at = r.offset();
        let payload = r.take(n * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(at + 8 * i as u64, "non-finite payload value"));
        }
        Ok(Tensor { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// `c = a * b + beta * c` for row/column-strided operands.
///
/// `a` is `m x k` with strides `sa = [row, col]`, `b` is `k x n` with strides
/// `sb`, and `c` is a dense row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: [isize; 2],
    b: &[f64],
    sb: [isize; 2],
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n, "gemm: output too small");
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, s: [isize; 2]| {
        (rows.saturating_sub(1) as isize * s[0] + cols.saturating_sub(1) as isize * s[1]) as usize
    };
    if k > 0 {
        assert!(last(m, k, sa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, sb) < b.len(), "gemm: rhs out of bounds");
    }
    // SAFETY: all index ranges reachable through the given strides were
    // bounds-checked above; `c` is dense row-major with at least m*n slots.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa[0],
            sa[1],
            b.as_ptr(),
            sb[0],
            sb[1],
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
