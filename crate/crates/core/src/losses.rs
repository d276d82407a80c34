//! Flow losses and the average endpoint error.
//!
//! Every loss returns its value together with the gradient with respect to
//! the predicted flow, so the trainer can seed the network's backward pass.
//! Sums are normalized by the number of contributing terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub eta: f32,
    pub r: f32,
    pub lambda_smooth: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            r: 0.45,
            lambda_smooth: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.r > 0.0 && self.r < 1.0) || !(self.lambda_smooth >= 0.0) {
            return Err(Error::InvalidConfig(format!("loss config {self:?}")));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the flow, shaped `[2, H, W]`.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f32,
    pub grad: Tensor,
}

pub fn charbonnier_scalar(x: f32, eta: f32, r: f32) -> f32 {
    ((x as f64).powi(2) + (eta as f64).powi(2)).powf(r as f64) as f32
}

fn charbonnier_deriv(x: f32, eta: f32, r: f32) -> f64 {
    let x = x as f64;
    2.0 * r as f64 * x * (x * x + (eta as f64).powi(2)).powf(r as f64 - 1.0)
}

pub fn charbonnier(x: &Tensor, eta: f32, r: f32) -> Tensor {
    x.map(|v| charbonnier_scalar(v, eta, r))
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::ShapeMismatch(format!(
            "image must be [H, W], got {:?}",
            image.shape()
        ))),
    }
}

fn check_same_size(image: &Tensor, flow: &FlowField) -> Result<(usize, usize)> {
    let (h, w) = image_dims(image)?;
    if (h, w) != (flow.height(), flow.width()) {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} vs flow {}x{}",
            flow.height(),
            flow.width()
        )));
    }
    Ok((h, w))
}

/// Bilinear sample with its partial derivatives along x and y.
/// Returns `None` outside `[0, w-1] x [0, h-1]`.
fn sample(img: &[f32], h: usize, w: usize, sx: f32, sy: f32) -> Option<(f32, f32, f32)> {
    if !(sx >= 0.0 && sx <= (w - 1) as f32 && sy >= 0.0 && sy <= (h - 1) as f32) {
        return None;
    }
    let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f32;
    let fy = sy - y0 as f32;
    let at = |x: usize, y: usize| img[y * w + x];
    let (a, b, c, d) = (at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1));
    let val = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d);
    let dx = (1.0 - fy) * (b - a) + fy * (d - c);
    let dy = (1.0 - fx) * (c - a) + fx * (d - b);
    Some((val, dx, dy))
}

#[derive(Clone, Debug)]
pub struct Warped {
    pub image: Tensor,
    pub valid: Vec<bool>,
}

/// Inverse warp: `warped(x, y) = image(x + u, y + v)` sampled bilinearly.
/// Samples that leave the image are zero and marked invalid.
pub fn warp(image: &Tensor, flow: &FlowField) -> Result<Warped> {
    let (h, w) = check_same_size(image, flow)?;
    let (u, v) = (flow.u(), flow.v());
    let mut out = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if let Some((val, _, _)) = sample(image.data(), h, w, x as f32 + u[i], y as f32 + v[i])
            {
                out[i] = val;
                valid[i] = true;
            }
        }
    }
    Ok(Warped {
        image: Tensor::new(&[h, w], out)?,
        valid,
    })
}

/// Mean Charbonnier penalty of `I_t - warp(I_tdt, flow)` over valid pixels.
pub fn photometric_loss(
    i_t: &Tensor,
    i_tdt: &Tensor,
    flow: &FlowField,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let (h, w) = check_same_size(i_t, flow)?;
    check_same_size(i_tdt, flow)?;
    let (u, v) = (flow.u(), flow.v());
    let plane = h * w;
    let mut grad = vec![0.0f64; 2 * plane];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some((val, dx, dy)) = sample(i_tdt.data(), h, w, x as f32 + u[i], y as f32 + v[i])
            else {
                continue;
            };
            let diff = i_t.data()[i] - val;
            total += charbonnier_scalar(diff, cfg.eta, cfg.r) as f64;
            let g = -charbonnier_deriv(diff, cfg.eta, cfg.r);
            grad[i] = g * dx as f64;
            grad[plane + i] = g * dy as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    let n = count as f64;
    Ok(LossValue {
        value: (total / n) as f32,
        grad: Tensor::new(
            &[2, h, w],
            grad.into_iter().map(|g| (g / n) as f32).collect(),
        )?,
    })
}

/// Mean absolute difference between 4-connected neighbours, one term per
/// unordered pair.
pub fn smoothness_loss(flow: &FlowField) -> LossValue {
    let (h, w) = (flow.height(), flow.width());
    let plane = h * w;
    let data = flow.tensor().data();
    let mut grad = vec![0.0f64; 2 * plane];
    let mut total = 0.0f64;
    let mut terms = 0usize;
    let mut pair = |a: usize, b: usize, grad: &mut [f64]| {
        for c in 0..2 {
            let d = (data[c * plane + a] - data[c * plane + b]) as f64;
            total += d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[c * plane + a] += s;
            grad[c * plane + b] -= s;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                pair(i, i + 1, &mut grad);
                terms += 1;
            }
            if y + 1 < h {
                pair(i, i + w, &mut grad);
                terms += 1;
            }
        }
    }
    let n = terms.max(1) as f64;
    LossValue {
        value: (total / n) as f32,
        grad: Tensor::new(
            &[2, h, w],
            grad.into_iter().map(|g| (g / n) as f32).collect(),
        )
        .expect("flow shape"),
    }
}

pub fn total_selfsup_loss(
    i_t: &Tensor,
    i_tdt: &Tensor,
    flow: &FlowField,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let mut photo = photometric_loss(i_t, i_tdt, flow, cfg)?;
    if cfg.lambda_smooth > 0.0 {
        let smooth = smoothness_loss(flow);
        photo.value += cfg.lambda_smooth * smooth.value;
        photo
            .grad
            .data_mut()
            .iter_mut()
            .zip(smooth.grad.data())
            .for_each(|(g, s)| *g += cfg.lambda_smooth * s);
    }
    Ok(photo)
}

fn check_flows(pred: &FlowField, gt: &FlowField) -> Result<()> {
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.tensor().shape(),
            gt.tensor().shape()
        )));
    }
    Ok(())
}

/// Squared endpoint error averaged over pixels with non-zero ground truth.
pub fn supervised_loss(pred: &FlowField, gt: &FlowField) -> Result<LossValue> {
    check_flows(pred, gt)?;
    let plane = pred.height() * pred.width();
    let (pu, pv, gu, gv) = (pred.u(), pred.v(), gt.u(), gt.v());
    let labeled: Vec<usize> = (0..plane)
        .filter(|&i| gu[i] != 0.0 || gv[i] != 0.0)
        .collect();
    if labeled.is_empty() {
        return Err(Error::NoLabeledPixels);
    }
    let k = labeled.len() as f64;
    let mut grad = Tensor::zeros(pred.tensor().shape());
    let mut total = 0.0f64;
    for &i in &labeled {
        let (du, dv) = ((pu[i] - gu[i]) as f64, (pv[i] - gv[i]) as f64);
        total += du * du + dv * dv;
        grad.data_mut()[i] = (2.0 * du / k) as f32;
        grad.data_mut()[plane + i] = (2.0 * dv / k) as f32;
    }
    Ok(LossValue {
        value: (total / k) as f32,
        grad,
    })
}

/// Average endpoint error over pixels selected by `mask`.
pub fn aee(pred: &FlowField, gt: &FlowField, mask: &[bool]) -> Result<f32> {
    check_flows(pred, gt)?;
    let plane = pred.height() * pred.width();
    if mask.len() != plane {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} entries for {plane} pixels",
            mask.len()
        )));
    }
    let (pu, pv, gu, gv) = (pred.u(), pred.v(), gt.u(), gt.v());
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in (0..plane).filter(|&i| mask[i]) {
        total += ((pu[i] - gu[i]) as f64).hypot((pv[i] - gv[i]) as f64);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((total / count as f64) as f32)
}
