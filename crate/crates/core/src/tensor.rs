//! Dense row-major `f32` tensors.

use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Dimension `i`; panics if out of range.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    /// Interprets a rank-4 tensor as `(N, C, H, W)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(format!(
                "expected rank-4 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_inplace(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    /// Sum accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Copies sample `n` out of a batched tensor, keeping a leading dim of 1.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            first.expect_same_shape(p)?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors"))?;
        let (n, _, h, w) = first.dims4()?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err(format!(
                    "channel concat of {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        Ok(Self {
            shape: vec![n, total_c, h, w],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits into the given channel widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Self>> {
        let (n, c, h, w) = self.dims4()?;
        if widths.iter().sum::<usize>() != c {
            return Err(shape_err(format!("split {widths:?} of {c} channels")));
        }
        let plane = h * w;
        let mut out: Vec<Vec<f32>> = widths
            .iter()
            .map(|&wc| Vec::with_capacity(n * wc * plane))
            .collect();
        for s in 0..n {
            let mut off = s * c * plane;
            for (buf, &wc) in out.iter_mut().zip(widths) {
                buf.extend_from_slice(&self.data[off..off + wc * plane]);
                off += wc * plane;
            }
        }
        Ok(out
            .into_iter()
            .zip(widths)
            .map(|(data, &wc)| Self {
                shape: vec![n, wc, h, w],
                data,
            })
            .collect())
    }
}
