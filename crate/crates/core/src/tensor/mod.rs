//! Dense tensors with named axes and per-sequence valid lengths.
//!
//! Axes are kept in canonical order (see [`Axis`]), so two tensors that share
//! axis names always agree on their relative layout. `Feature` is always the
//! innermost axis, which lets every projection run as a plain row-major GEMM.

mod kernels;
mod scalar;

pub use kernels::*;
pub use scalar::Scalar;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Axis identity. The derive order is the canonical memory order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    Batch,
    Beam,
    /// Decoder output position (the recurrent loop's time).
    Step,
    /// Source/encoder time.
    Time,
    /// Row axis of weight matrices and embedding tables.
    Input,
    Feature,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::Batch => "B",
            Axis::Beam => "Beam",
            Axis::Step => "S",
            Axis::Time => "T",
            Axis::Input => "In",
            Axis::Feature => "F",
        };
        f.write_str(s)
    }
}

/// Ordered list of `(axis, extent)` pairs.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(Vec<(Axis, usize)>);

impl Shape {
    pub fn new(dims: &[(Axis, usize)]) -> Result<Self> {
        for w in dims.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Shape(format!(
                    "axes must be unique and in canonical order, got {}",
                    Shape(dims.to_vec())
                )));
            }
        }
        if let Some(&(axis, _)) = dims.iter().find(|d| d.1 == 0) {
            return Err(Error::Shape(format!("axis {axis} has zero extent")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[(Axis, usize)] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().map(|d| d.1).product()
    }

    pub fn position(&self, axis: Axis) -> Option<usize> {
        self.0.iter().position(|d| d.0 == axis)
    }

    pub fn has(&self, axis: Axis) -> bool {
        self.position(axis).is_some()
    }

    pub fn extent(&self, axis: Axis) -> Option<usize> {
        self.0.iter().find(|d| d.0 == axis).map(|d| d.1)
    }

    pub fn extents(&self) -> Vec<usize> {
        self.0.iter().map(|d| d.1).collect()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1].1;
        }
        s
    }

    pub fn without(&self, axis: Axis) -> Shape {
        Shape(self.0.iter().copied().filter(|d| d.0 != axis).collect())
    }

    /// Inserts `axis` at its canonical position. Fails if already present.
    pub fn with(&self, axis: Axis, extent: usize) -> Result<Shape> {
        if self.has(axis) {
            return Err(Error::Shape(format!("axis {axis} already present in {self}")));
        }
        let mut dims = self.0.clone();
        let pos = dims.iter().position(|d| d.0 > axis).unwrap_or(dims.len());
        dims.insert(pos, (axis, extent));
        Ok(Shape(dims))
    }

    pub fn with_extent(&self, axis: Axis, extent: usize) -> Shape {
        Shape(
            self.0
                .iter()
                .map(|&(a, e)| if a == axis { (a, extent) } else { (a, e) })
                .collect(),
        )
    }

    /// `(outer, extent, inner)` sizes around `axis`.
    pub fn split_at(&self, axis: Axis) -> Option<(usize, usize, usize)> {
        let p = self.position(axis)?;
        let outer = self.0[..p].iter().map(|d| d.1).product();
        let inner = self.0[p + 1..].iter().map(|d| d.1).product();
        Some((outer, self.0[p].1, inner))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, (a, e)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}:{e}")?;
        }
        f.write_str("]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Dense n-dimensional array. `seq_lens`, when present, gives the number of
/// valid `Time` positions of each batch entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    seq_lens: Option<Arc<Vec<usize>>>,
}

/// Integer token ids share the tensor layout.
pub type Ids = Tensor<u32>;

impl<T: Copy> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape} needs {} elements, buffer has {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data, seq_lens: None })
    }

    pub fn new(dims: &[(Axis, usize)], data: Vec<T>) -> Result<Self> {
        Self::from_vec(Shape::new(dims)?, data)
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![value; n], seq_lens: None }
    }

    pub fn shape(&self) -> &Shape {
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

    pub fn seq_lens(&self) -> Option<&[usize]> {
        self.seq_lens.as_deref().map(|v| v.as_slice())
    }

    pub(crate) fn seq_lens_arc(&self) -> Option<Arc<Vec<usize>>> {
        self.seq_lens.clone()
    }

    /// Attaches valid lengths along `Time`. Requires `Batch` and `Time` axes.
    pub fn with_seq_lens(mut self, lens: Vec<usize>) -> Result<Self> {
        let (b, t) = match (self.shape.extent(Axis::Batch), self.shape.extent(Axis::Time)) {
            (Some(b), Some(t)) => (b, t),
            _ => {
                return Err(Error::Shape(format!(
                    "seq_lens need Batch and Time axes, shape is {}",
                    self.shape
                )))
            }
        };
        if lens.len() != b {
            return Err(Error::Shape(format!("{} seq_lens for batch extent {b}", lens.len())));
        }
        if let Some(&bad) = lens.iter().find(|&&l| l == 0 || l > t) {
            return Err(Error::Shape(format!("seq_len {bad} outside 1..={t}")));
        }
        self.seq_lens = Some(Arc::new(lens));
        Ok(self)
    }

    pub(crate) fn set_seq_lens(&mut self, lens: Option<Arc<Vec<usize>>>) {
        self.seq_lens = if self.shape.has(Axis::Batch) && self.shape.has(Axis::Time) { lens } else { None };
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            seq_lens: self.seq_lens.clone(),
        }
    }

    /// Same data viewed under a shape with identical element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Self> {
        let mut t = Tensor::from_vec(shape, self.data.clone())?;
        t.set_seq_lens(self.seq_lens.clone());
        Ok(t)
    }

    /// Picks batch rows (with repetition allowed). Used to expand encoder
    /// states over beams and to follow surviving beam parents.
    pub fn gather_batch(&self, rows: &[usize]) -> Result<Self> {
        let (outer, b, inner) = self
            .shape
            .split_at(Axis::Batch)
            .ok_or_else(|| Error::Shape(format!("no Batch axis in {}", self.shape)))?;
        debug_assert_eq!(outer, 1);
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= b {
                return Err(Error::Index(format!("batch row {r} out of range {b}")));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let shape = self.shape.with_extent(Axis::Batch, rows.len());
        let mut t = Tensor { shape, data, seq_lens: None };
        if let Some(l) = &self.seq_lens {
            t.seq_lens = Some(Arc::new(rows.iter().map(|&r| l[r]).collect()));
        }
        Ok(t)
    }

    /// Removes `axis` by taking index `idx` along it.
    pub fn select(&self, axis: Axis, idx: usize) -> Result<Self> {
        let (outer, n, inner) = self
            .shape
            .split_at(axis)
            .ok_or_else(|| Error::Shape(format!("no {axis} axis in {}", self.shape)))?;
        if idx >= n {
            return Err(Error::Index(format!("index {idx} out of range {n} on {axis}")));
        }
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + idx) * inner;
            data.extend_from_slice(&self.data[base..base + inner]);
        }
        let mut t = Tensor { shape: self.shape.without(axis), data, seq_lens: None };
        t.set_seq_lens(self.seq_lens.clone());
        Ok(t)
    }

    /// Inserts `axis` by stacking equally shaped parts.
    pub fn stack(axis: Axis, parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Shape(format!("stack parts differ: {} vs {}", first.shape, p.shape)));
            }
        }
        let shape = first.shape.with(axis, parts.len())?;
        let (outer, n, inner) = shape.split_at(axis).expect("inserted");
        let mut data = Vec::with_capacity(shape.numel());
        for o in 0..outer {
            for p in parts.iter().take(n) {
                data.extend_from_slice(&p.data[o * inner..(o + 1) * inner]);
            }
        }
        let mut t = Tensor { shape, data, seq_lens: None };
        t.set_seq_lens(first.seq_lens.clone());
        Ok(t)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![v], seq_lens: None }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|x| U::from_f64(x.to_f64()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
