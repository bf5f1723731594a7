//! Dense row-major n-dimensional arrays over `f32` or `f64`.
//!
//! Image tensors follow the `[batch, channels, height, width]` convention
//! with the last dimension fastest. Tensors are plain values: construction
//! validates the shape, after which the data is immutable except through
//! explicit optimizer updates.

use std::fmt;

use crate::error::{Error, Result};

use crate::rng::Rng;

/// Element precision of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Element types a [`Tensor`] can hold. Sealed to `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn maximum(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn minimum(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar byte width"))
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32);
impl_scalar!(f64, Dtype::F64);

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor shape must have at least one dimension".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows element count")))?;
    }
    Ok(n)
}

impl<T: Scalar> Tensor<T> {
    /// Tensor with every element equal to `fill`.
    pub fn filled(shape: &[usize], fill: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, T::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, T::ONE)
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} expects {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::from_vec`] but additionally rejects non-finite values.
    pub fn from_vec_checked(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.ensure_finite("from_vec_checked")?;
        Ok(t)
    }

    /// Elements 0, 1, 2, ... in flat order; pins down row-major indexing.
    pub fn ramp(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| T::from_f64(i as f64)).collect(),
        })
    }

    /// Normal samples with the given moments, deterministic per `rng` state.
    pub fn rand_normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        if std < 0.0 {
            return Err(Error::Parameter(format!("negative std {std}")));
        }
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| T::from_f64(rng.normal(mean, std))).collect(),
        })
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| T::from_f64(rng.uniform(lo, hi))).collect(),
        })
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

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Element at a multi-dimensional index; row-major, bounds-checked.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for dim {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({n})",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_assign on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().fold(self.data[0], |m, &v| m.minimum(v))
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(self.data[0], |m, &v| m.maximum(v))
    }

    /// Convert every element, e.g. between gradient-check and training precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack: mismatched shapes {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(&shape, data)
    }

    /// Split off the `i`-th slice along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor<T>> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(Error::Shape(format!(
                "index {i} invalid for shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Tensor::from_vec(&self.shape[1..], self.data[i * inner..(i + 1) * inner].to_vec())
    }
}

/// Integer class labels over a spatial grid, shape `[N, H, W]` or `[H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "label map shape {shape:?} expects {n} entries, got {}",
                data.len()
            )));
        }
        Ok(LabelMap {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], label: u8) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(LabelMap {
            shape: shape.to_vec(),
            data: vec![label; n],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn ensure_in_range(&self, classes: usize) -> Result<()> {
        if let Some(&bad) = self.data.iter().find(|&&l| (l as usize) >= classes) {
            return Err(Error::Label(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    /// Stack `[H, W]` maps into one `[N, H, W]` map.
    pub fn stack(maps: &[&LabelMap]) -> Result<LabelMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero label maps".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * maps.len());
        for m in maps {
            if m.shape != first.shape {
                return Err(Error::Shape("stacked label maps must share a shape".into()));
            }
            data.extend_from_slice(&m.data);
        }
        let mut shape = vec![maps.len()];
        shape.extend_from_slice(&first.shape);
        LabelMap::new(&shape, data)
    }
}

/// `out[m, n] = sum_k a[m, k] * b[k, n]`, all row-major. Serial with a
/// fixed accumulation order; batch-level parallelism happens in callers.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        out_row.fill(T::ZERO);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m, n] = sum_k a[m, k] * b[n, k]` (`b` used transposed).
pub fn matmul_abt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(out.len(), m * n);
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
}

/// `out[m, n] = sum_k a[k, m] * b[k, n]` (`a` used transposed).
pub fn matmul_atb<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    out.fill(T::ZERO);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filled_zero() {
        let t = Tensor::<f64>::filled(&[2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn filled_constant() {
        let t = Tensor::<f64>::filled(&[3], 1.5).unwrap();
        assert_eq!(t.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn filled_sum() {
        // 4 elements x 2.0
        let t = Tensor::<f64>::filled(&[1, 2, 2], 2.0).unwrap();
        assert_eq!(t.sum(), 8.0);
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(matches!(
            Tensor::<f32>::filled(&[], 0.0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::<f32>::filled(&[2, 0], 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn row_major_ramp_indexing() {
        // element (i, j) of an [R, C] tensor lives at flat index i*C + j
        let t = Tensor::<f64>::ramp(&[3, 4]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(t.at(&[i, j]), (i * 4 + j) as f64);
            }
        }
    }

    #[test]
    fn rand_normal_deterministic() {
        let mut r1 = Rng::new(7);
        let mut r2 = Rng::new(7);
        let a = Tensor::<f32>::rand_normal(&[10_000], 0.0, 1.0, &mut r1).unwrap();
        let b = Tensor::<f32>::rand_normal(&[10_000], 0.0, 1.0, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rand_normal_zero_std() {
        let mut rng = Rng::new(1);
        let t = Tensor::<f64>::rand_normal(&[10_000], 0.0, 0.0, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rand_normal_sample_mean() {
        let mut rng = Rng::new(1);
        let t = Tensor::<f64>::rand_normal(&[100_000], 3.0, 1.0, &mut rng).unwrap();
        let mean = t.mean();
        assert!((2.98..=3.02).contains(&mean), "sample mean {mean}");
    }

    #[test]
    fn rand_normal_negative_std_rejected() {
        let mut rng = Rng::new(1);
        assert!(matches!(
            Tensor::<f64>::rand_normal(&[4], 0.0, -1.0, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn checked_construction_rejects_nan() {
        assert!(matches!(
            Tensor::<f64>::from_vec_checked(&[2], vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Rng::new(9);
        let (m, k, n) = (5, 7, 6);
        let a = Tensor::<f64>::rand_normal(&[m, k], 0.0, 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::rand_normal(&[k, n], 0.0, 1.0, &mut rng).unwrap();
        let mut c = vec![0.0; m * n];
        matmul(a.data(), b.data(), m, k, n, &mut c);

        // b transposed to [n, k] then contracted back should agree
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b.data()[kk * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_abt(a.data(), &bt, m, k, n, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }

        // a transposed to [k, m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a.data()[i * k + kk];
            }
        }
        let mut c3 = vec![0.0; m * n];
        matmul_atb(&at, b.data(), m, k, n, &mut c3);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn label_map_range_check() {
        let m = LabelMap::new(&[2, 2], vec![0, 1, 2, 3]).unwrap();
        assert!(m.ensure_in_range(4).is_ok());
        assert!(matches!(m.ensure_in_range(3), Err(Error::Label(_))));
    }
}
