//! Geometric augmentation applied consistently to events, frames and flow.
//!
//! Transforms are random crops, horizontal flips and rotations by multiples
//! of 90 degrees. Flow vectors are remapped by the linear part of the
//! transform, so the labels stay exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use crate::error::{Error, Result};
use crate::events::EventTensor;
use crate::flow::FlowField;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rotation: bool,
    pub crop_size: Option<usize>,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && !self.rotation && self.crop_size.is_none()
    }
}

/// A pixel map `[C, H, W] -> [C, H', W']` together with how it acts on
/// displacement vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    FlipHorizontal,
    /// Quarter turns counter-clockwise as seen on screen (y pointing down).
    Rotate(u8),
    Crop {
        x0: usize,
        y0: usize,
        size: usize,
    },
}

impl Transform {
    fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Self::Rotate(k) if k % 2 == 1 => (w, h),
            Self::Crop { size, .. } => (size, size),
            _ => (h, w),
        }
    }

    /// Source pixel for output pixel `(x, y)`.
    fn source(self, x: usize, y: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Self::FlipHorizontal => (w - 1 - x, y),
            Self::Rotate(k) => match k % 4 {
                0 => (x, y),
                // (sx, sy) -> (sy, w - 1 - sx)
                1 => (w - 1 - y, x),
                2 => (w - 1 - x, h - 1 - y),
                _ => (y, h - 1 - x),
            },
            Self::Crop { x0, y0, .. } => (x0 + x, y0 + y),
        }
    }

    /// Image of the displacement `(u, v)`.
    pub fn map_vector(self, (u, v): (f32, f32)) -> (f32, f32) {
        match self {
            Self::FlipHorizontal => (-u, v),
            Self::Rotate(k) => match k % 4 {
                0 => (u, v),
                1 => (v, -u),
                2 => (-u, -v),
                _ => (-v, u),
            },
            Self::Crop { .. } => (u, v),
        }
    }

    /// Remaps every channel plane of a `[.., H, W]` tensor.
    pub fn apply_planes(self, t: &Tensor) -> Result<Tensor> {
        let nd = t.ndim();
        let (h, w) = (t.dim(nd - 2), t.dim(nd - 1));
        if let Self::Crop { x0, y0, size } = self {
            if x0 + size > w || y0 + size > h {
                return Err(Error::CropTooLarge {
                    crop: size,
                    height: h,
                    width: w,
                });
            }
        }
        let (oh, ow) = self.out_dims(h, w);
        let planes = t.numel() / (h * w);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in t.data().chunks(h * w) {
            for y in 0..oh {
                for x in 0..ow {
                    let (sx, sy) = self.source(x, y, h, w);
                    out.push(p[sy * w + sx]);
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        Tensor::new(&shape, out)
    }

    pub fn apply_flow(self, flow: &FlowField) -> Result<FlowField> {
        let moved = self.apply_planes(flow.tensor())?;
        let mut out = FlowField::from_tensor(moved)?;
        for y in 0..out.height() {
            for x in 0..out.width() {
                let uv = out.get(x, y);
                out.set(x, y, self.map_vector(uv));
            }
        }
        Ok(out)
    }

    pub fn apply(self, s: &Sample) -> Result<Sample> {
        Ok(Sample {
            events: EventTensor {
                data: self.apply_planes(&s.events.data)?,
            },
            flow: self.apply_flow(&s.flow)?,
            frames: match &s.frames {
                Some((a, b)) => Some((self.apply_planes(a)?, self.apply_planes(b)?)),
                None => None,
            },
        })
    }
}

/// Draws the random transform sequence for one sample.
pub fn draw_transforms<R: Rng + ?Sized>(
    cfg: &AugmentConfig,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<Vec<Transform>> {
    let mut out = Vec::new();
    if let Some(size) = cfg.crop_size {
        if size == 0 || size > h || size > w {
            return Err(Error::CropTooLarge {
                crop: size,
                height: h,
                width: w,
            });
        }
        let x0 = rng.random_range(0..=w - size);
        let y0 = rng.random_range(0..=h - size);
        out.push(Transform::Crop { x0, y0, size });
    }
    if cfg.flip && rng.random::<bool>() {
        out.push(Transform::FlipHorizontal);
    }
    if cfg.rotation {
        let (ch, cw) = cfg.crop_size.map_or((h, w), |s| (s, s));
        // odd quarter turns change the shape unless the sample is square
        let k = if ch == cw {
            rng.random_range(0..4u8)
        } else {
            2 * rng.random_range(0..2u8)
        };
        if k != 0 {
            out.push(Transform::Rotate(k));
        }
    }
    Ok(out)
}

pub fn augment<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Sample> {
    let transforms = draw_transforms(cfg, sample.height(), sample.width(), rng)?;
    let mut s = sample.clone();
    for t in transforms {
        s = t.apply(&s)?;
    }
    Ok(s)
}
