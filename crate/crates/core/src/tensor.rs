//! Dense row-major tensors.
//!
//! Storage is a flat `Vec` with an explicit shape; there are no views or
//! strides. Every operation allocates its result, so tensors behave as
//! immutable values and can be moved freely between workers.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can hold. Implemented for `f32` and `f64`.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// Little-endian bytes of the value, used for checksums.
    fn to_le_bytes_vec(self) -> Vec<u8>;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Element type")
    }
}

impl Element for f32 {
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Element for f64 {
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Pointwise operations supported by [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    ReluMask,
}

/// Second operand of [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
    None,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "a tensor needs at least one dimension".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "all dimensions must be >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("data length {} does not match", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// Builds a 2-d tensor from equally long rows of `f64` values.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::from_f64_lossy(v)))
            .collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
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

    /// Size of the leading (batch) dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of scalars per leading-dimension row.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::RankMismatch {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Matrix product `self · other`.
    ///
    /// The reduction index runs innermost in ascending order, so results are
    /// bit-identical across runs and threads.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.expect_rank2("matmul")?;
        let (k2, n) = other.expect_rank2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = T::zero();
                for (p, &a) in a_row.iter().enumerate() {
                    acc = acc + a * other.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        let (m, n) = self.expect_rank2("transpose2d")?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn elementwise(&self, op: ElementwiseOp, other: Operand<'_, T>) -> Result<Tensor<T>> {
        use ElementwiseOp::*;
        let data: Vec<T> = match (op, other) {
            (Add | Sub | Mul, Operand::Tensor(b)) => {
                if b.shape != self.shape {
                    return Err(Error::ShapeMismatch {
                        op: "elementwise",
                        left: self.shape.clone(),
                        right: b.shape.clone(),
                    });
                }
                let f: fn(T, T) -> T = match op {
                    Add => |x, y| x + y,
                    Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
            }
            (Add, Operand::Scalar(s)) => self.data.iter().map(|&x| x + s).collect(),
            (Sub, Operand::Scalar(s)) => self.data.iter().map(|&x| x - s).collect(),
            (Mul | Scale, Operand::Scalar(s)) => self.data.iter().map(|&x| x * s).collect(),
            (Relu, Operand::None) => self
                .data
                .iter()
                .map(|&x| if x > T::zero() { x } else { T::zero() })
                .collect(),
            (ReluMask, Operand::None) => self
                .data
                .iter()
                .map(|&x| if x > T::zero() { T::one() } else { T::zero() })
                .collect(),
            (op, _) => {
                return Err(Error::InvalidArgument(format!(
                    "elementwise {op:?} does not accept this operand"
                )))
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElementwiseOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElementwiseOp::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElementwiseOp::Mul, Operand::Tensor(other))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn relu(&self) -> Tensor<T> {
        self.elementwise(ElementwiseOp::Relu, Operand::None)
            .expect("relu is unary")
    }

    pub fn relu_mask(&self) -> Tensor<T> {
        self.elementwise(ElementwiseOp::ReluMask, Operand::None)
            .expect("relu-mask is unary")
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Sums the rows of a 2-d tensor in row order, producing a `[cols]` tensor.
    pub fn sum_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.expect_rank2("sum_rows")?;
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o = *o + v;
            }
        }
        Ok(Tensor {
            shape: vec![n],
            data: out,
        })
    }

    /// Rows `[start, end)` along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        if start >= end || end > self.rows() {
            return Err(Error::InvalidArgument(format!(
                "row range {start}..{end} invalid for shape {:?}",
                self.shape
            )));
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * w..end * w].to_vec(),
        })
    }
}

/// Concatenates tensors along the leading (batch) dimension, in list order.
pub fn concat_batch<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::EmptyConcat)?;
    let trailing = &first.shape[1..];
    let mut rows = 0;
    for p in parts {
        if &p.shape[1..] != trailing {
            return Err(Error::ShapeMismatch {
                op: "concat_batch",
                left: first.shape.clone(),
                right: p.shape.clone(),
            });
        }
        rows += p.shape[0];
    }
    let mut data = Vec::with_capacity(rows * first.row_len());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    let mut shape = first.shape.clone();
    shape[0] = rows;
    Ok(Tensor { shape, data })
}

/// Inverse of [`concat_batch`]: splits at the given leading-dimension sizes.
pub fn split_batch<T: Element>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if sizes.iter().sum::<usize>() != t.rows() || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "cannot split {:?} into row counts {sizes:?}",
            t.shape
        )));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let part = t.slice_rows(start, start + n);
            start += n;
            part
        })
        .collect()
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let i = Tensor::identity(2).unwrap();
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_by_hand() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let got = a.matmul(&b).unwrap();
        let (ad, bd) = (a.data(), b.data());
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += ad[i * 7 + p] * bd[p * 3 + j];
                }
                assert_eq!(got.data()[i * 3 + j], s);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn concat_preserves_order() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[5.0, 6.0, 7.0, 8.0]]).unwrap();
        let c = concat_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert_eq!(c.row(0), a.data());
        assert_eq!(c.row(1), b.data());
        assert_eq!(concat_batch(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn concat_errors() {
        assert!(matches!(concat_batch::<f64>(&[]), Err(Error::EmptyConcat)));
        let a = Tensor::<f64>::zeros(&[1, 4]).unwrap();
        let b = Tensor::<f64>::zeros(&[1, 3]).unwrap();
        assert!(matches!(
            concat_batch(&[a, b]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn elementwise_basics() {
        let x = Tensor::<f64>::from_rows(&[&[-1.0, 0.0, 2.0]]).unwrap();
        let z = Tensor::zeros(&[1, 3]).unwrap();
        assert_eq!(x.add(&z).unwrap(), x);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(x.relu_mask().data(), &[0.0, 0.0, 1.0]);
        let y = Tensor::<f64>::zeros(&[3, 1]).unwrap();
        assert!(x.add(&y).is_err());
    }

    #[test]
    fn mul_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 3], &mut rng);
        let b = random(&[3, 3], &mut rng);
        let got = a.mul(&b).unwrap();
        for i in 0..9 {
            assert_eq!(got.data()[i], a.data()[i] * b.data()[i]);
        }
    }

    #[test]
    fn transpose_cases() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let t = a.transpose2d().unwrap();
        assert_eq!(t.shape(), &[3, 1]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.transpose2d().unwrap(), a);
        assert!(Tensor::<f64>::zeros(&[2]).unwrap().transpose2d().is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 2], &mut rng);
        let lhs = a.matmul(&b).unwrap().transpose2d().unwrap();
        let rhs = b
            .transpose2d()
            .unwrap()
            .matmul(&a.transpose2d().unwrap())
            .unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::<f64>::zeros(&[0, 2]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
