//! Dense optical flow fields and their `FLO0` file format.
//!
//! ```text
//! "FLO0" | u32 H | u32 W | H*W x (f32 u, f32 v)    (row-major, little-endian)
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLOW_MAGIC: &[u8; 4] = b"FLO0";

/// Per-pixel displacement `(u, v)` in pixels, stored as `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, height, width]),
        }
    }

    pub fn from_tensor(data: Tensor) -> Result<Self> {
        match *data.shape() {
            [2, _, _] => Ok(Self { data }),
            [1, 2, h, w] => Ok(Self {
                data: data.reshape(&[2, h, w])?,
            }),
            _ => Err(Error::ShapeMismatch(format!(
                "flow field needs [2, H, W], got {:?}",
                data.shape()
            ))),
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> (f32, f32),
    ) -> Self {
        let mut flow = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                flow.set(x, y, f(x, y));
            }
        }
        flow
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn u(&self) -> &[f32] {
        &self.data.data()[..self.height() * self.width()]
    }

    pub fn v(&self) -> &[f32] {
        &self.data.data()[self.height() * self.width()..]
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let plane = self.height() * self.width();
        let i = y * self.width() + x;
        (self.data.data()[i], self.data.data()[plane + i])
    }

    pub fn set(&mut self, x: usize, y: usize, (u, v): (f32, f32)) {
        let plane = self.height() * self.width();
        let i = y * self.width() + x;
        self.data.data_mut()[i] = u;
        self.data.data_mut()[plane + i] = v;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(12 + 8 * h * w);
        out.extend_from_slice(FLOW_MAGIC);
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        for y in 0..h {
            for x in 0..w {
                let (u, v) = self.get(x, y);
                out.extend_from_slice(&u.to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::MalformedRecord { line: 0, reason };
        if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
            return Err(bad("missing FLO0 header".into()));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 8 * h * w {
            return Err(bad(format!(
                "{h}x{w} flow needs {} payload bytes, found {}",
                8 * h * w,
                bytes.len() - 12
            )));
        }
        let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let mut flow = Self::zeros(h, w);
        for i in 0..h * w {
            flow.set(i % w, i / w, (f(12 + 8 * i), f(16 + 8 * i)));
        }
        Ok(flow)
    }
}
