//! Dense 4-D tensors and labelled batches.

use rand::Rng;

use crate::error::{contract, Error, Result};

/// Dense real 4-D array in row-major `(planes_out, planes_in, rows, cols)`
/// order. Activation maps reuse the same layout as `(batch, channels, rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        contract!(
            data.len() == dims.iter().product::<usize>(),
            "data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        ((idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]) * self.dims[3] + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn at_mut(&mut self, idx: [usize; 4]) -> &mut f64 {
        let o = self.offset(idx);
        &mut self.data[o]
    }

    /// Number of scalars in one `[a, b, .., ..]` slice.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// The `rows × cols` slice at `(a, b)`.
    pub fn plane(&self, a: usize, b: usize) -> &[f64] {
        let start = (a * self.dims[1] + b) * self.plane_len();
        &self.data[start..start + self.plane_len()]
    }

    pub fn plane_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let len = self.plane_len();
        let start = (a * self.dims[1] + b) * len;
        &mut self.data[start..start + len]
    }

    /// Everything belonging to leading index `a`.
    pub fn item(&self, a: usize) -> &[f64] {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[a * len..(a + 1) * len]
    }

    pub fn item_mut(&mut self, a: usize) -> &mut [f64] {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        &mut self.data[a * len..(a + 1) * len]
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor4) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor4) -> Result<()> {
        contract!(self.dims == other.dims, "axpy dims {:?} vs {:?}", self.dims, other.dims);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += s * b);
        Ok(())
    }

    /// Selects leading entries (e.g. batch rows) by index.
    pub fn gather_items(&self, indices: &[usize]) -> Tensor4 {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Tensor4 {
            dims: [indices.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        }
    }
}

/// Images plus class labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor4, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.dims()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.dims()[0],
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} at index {i} is out of range for {num_classes} classes"
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            images: self.images.gather_items(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Glorot-style uniform draw in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, len: usize, rng: &mut R) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-s..=s)).collect()
}
