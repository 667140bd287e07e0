//! Dense row-major tensors.
//!
//! The value type for latents, features, masks and attention maps. Tensors
//! are immutable after construction; every public operation validates shapes
//! and rejects non-finite outputs instead of letting NaN/Inf propagate.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, checking the shape/data contract and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    /// Internal constructor for data already known to be finite.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: S) -> Result<Self> {
        Tensor::from_vec(vec![1], vec![value])
    }

    /// Standard-normal fill; draws f64 and narrows, so the stream is the
    /// same regardless of the scalar type.
    pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::cast(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Uniform fill over [lo, hi).
    pub fn rand_uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| S::cast(rng.gen_range(lo..hi))).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The two dimensions of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(format!("expected rank-2, got {other:?}"))),
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("expected scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        let (_, c) = (self.shape[0], self.shape[1]);
        self.data[i * c + j]
    }

    fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    fn finalize(shape: Vec<usize>, data: Vec<S>, op: &str) -> Result<Self> {
        let t = Tensor { shape, data };
        t.check_finite(op)?;
        Ok(t)
    }

    fn same_shape(&self, rhs: &Self, op: &str) -> Result<()> {
        if self.shape == rhs.shape {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, rhs.shape
            )))
        }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "add")?;
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect();
        Tensor::finalize(self.shape.clone(), data, "add")
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "sub")?;
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect();
        Tensor::finalize(self.shape.clone(), data, "sub")
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "mul")?;
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a * b).collect();
        Tensor::finalize(self.shape.clone(), data, "mul")
    }

    pub fn div(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "div")?;
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a / b).collect();
        Tensor::finalize(self.shape.clone(), data, "div")
    }

    pub fn scale(&self, c: S) -> Result<Self> {
        let data = self.data.iter().map(|&a| a * c).collect();
        Tensor::finalize(self.shape.clone(), data, "scale")
    }

    pub fn add_scalar(&self, c: S) -> Result<Self> {
        let data = self.data.iter().map(|&a| a + c).collect();
        Tensor::finalize(self.shape.clone(), data, "add_scalar")
    }

    /// Applies `f` elementwise; the result is finiteness-checked.
    pub fn map(&self, op: &str, f: impl Fn(S) -> S) -> Result<Self> {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Tensor::finalize(self.shape.clone(), data, op)
    }

    /// Row-broadcast add: `[m×n] + [n]`.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if row.shape != [n] {
            return Err(Error::shape(format!(
                "add_row: expected row [{n}], got {:?}",
                row.shape
            )));
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += row.data[j];
            }
        }
        Tensor::finalize(self.shape.clone(), data, "add_row")
    }

    /// `[m×k] · [k×n]`, i-k-j loop order so the inner loop vectorizes.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dims {k} and {k2} differ ({:?} · {:?})",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                o_row.iter_mut().zip(b_row).for_each(|(o, &b)| *o += a * b);
            }
        }
        Tensor::finalize(vec![m, n], out, "matmul")
    }

    /// `self · rhsᵀ` for rank-2 operands.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        self.matmul(&rhs.transpose()?)
    }

    /// `selfᵀ · rhs` for rank-2 operands.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        self.transpose()?.matmul(rhs)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_vec_unchecked(vec![n, m], out))
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> S {
        self.sum() / S::cast(self.numel() as f64)
    }

    pub fn max_value(&self) -> S {
        self.data.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v))
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {shape:?} does not preserve element count",
                self.shape
            )));
        }
        Ok(Tensor::from_vec_unchecked(shape.to_vec(), self.data.clone()))
    }

    /// Contiguous sub-range along dimension 0 or 1 of a rank-2 tensor.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let bound = if dim == 0 { m } else { n };
        if dim > 1 || len == 0 || start + len > bound {
            return Err(Error::shape(format!(
                "narrow: dim {dim}, range {start}..{} out of bounds for {:?}",
                start + len,
                self.shape
            )));
        }
        let mut out = Vec::with_capacity(len * if dim == 0 { n } else { m });
        if dim == 0 {
            out.extend_from_slice(&self.data[start * n..(start + len) * n]);
            Ok(Tensor::from_vec_unchecked(vec![len, n], out))
        } else {
            for i in 0..m {
                out.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
            }
            Ok(Tensor::from_vec_unchecked(vec![m, len], out))
        }
    }

    /// Stacks rank-2 tensors with equal column counts along dimension 0.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::input("concat_rows: empty input"));
        }
        let (_, n) = parts[0].dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, n2) = p.dims2()?;
            if n2 != n {
                return Err(Error::shape(format!(
                    "concat_rows: column counts {n} and {n2} differ"
                )));
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_vec_unchecked(vec![rows, n], data))
    }

    /// Stacks rank-2 tensors with equal row counts along dimension 1.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::input("concat_cols: empty input"));
        }
        let (m, _) = parts[0].dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (m2, n) = p.dims2()?;
            if m2 != m {
                return Err(Error::shape(format!(
                    "concat_cols: row counts {m} and {m2} differ"
                )));
            }
            widths.push(n);
            total += n;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &n) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * n..(i + 1) * n]);
            }
        }
        Ok(Tensor::from_vec_unchecked(vec![m, total], data))
    }

    /// Selects rows of a rank-2 tensor by index (repetition allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::shape(format!("gather_rows: index {i} out of {m}")));
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Tensor::from_vec_unchecked(vec![indices.len(), n], data))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::from_vec(shape, data.iter().map(|&v| S::cast(v)).collect())
    }

    /// Little-endian f64 bytes of the contents, for hashing and checkpoints.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn shape_contract() {
        assert!(T::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(T::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(T::from_vec(vec![0], vec![]).is_err());
        assert!(T::from_vec(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = T::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = T::from_vec(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn matmul_transposed_variants() {
        let a = T::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = T::from_vec(vec![2, 3], vec![1., 0., 1., 0., 1., 0.]).unwrap();
        let nt = a.matmul_nt(&b).unwrap();
        assert_eq!(nt.shape(), &[2, 2]);
        assert_eq!(nt.data(), &[4., 2., 10., 5.]);
        let tn = a.matmul_tn(&a).unwrap();
        assert_eq!(tn.shape(), &[3, 3]);
        assert_eq!(tn.at2(0, 0), 17.0);
    }

    #[test]
    fn narrow_and_concat() {
        let a = T::from_vec(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let top = a.narrow(0, 0, 2).unwrap();
        assert_eq!(top.data(), &[1., 2., 3., 4.]);
        let col = a.narrow(1, 1, 1).unwrap();
        assert_eq!(col.data(), &[2., 4., 6.]);
        let back = T::concat_rows(&[&top, &a.narrow(0, 2, 1).unwrap()]).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn gather_rows_repeats() {
        let a = T::from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let g = a.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(g.data(), &[3., 4., 3., 4., 1., 2.]);
        assert!(a.gather_rows(&[2]).is_err());
    }

    #[test]
    fn nonfinite_is_rejected() {
        let a = T::from_vec(vec![1], vec![1e308]).unwrap();
        assert!(matches!(a.scale(10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn f32_instantiation() {
        let a: Tensor<f32> = Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = a.matmul(&a).unwrap();
        assert_eq!(b.data(), &[7., 10., 15., 22.]);
    }
}
