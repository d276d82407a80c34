//! Time-stepped activation cells: LIF (with surrogate gradient) and ConvRNN.
//!
//! These are the stand-alone, fused forms of the cells. Networks compose the
//! same arithmetic on a [`Tape`](crate::autodiff::Tape) so gradients flow
//! through the unrolled time graph; both paths share [`Surrogate`] and the
//! reparameterizations below.

use crate::autodiff::conv::{conv2d, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound added to the softplus threshold so it never reaches zero.
pub const THRESHOLD_FLOOR: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResetMode {
    #[default]
    Hard,
    Soft,
}

/// Triangular surrogate for the derivative of the Heaviside spike function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surrogate {
    pub width: f32,
}

impl Default for Surrogate {
    fn default() -> Self {
        Self { width: 1.0 }
    }
}

impl Surrogate {
    /// `max(0, 1 - |z|/width) / width`
    pub fn derivative(&self, z: f32) -> f32 {
        (1.0 - z.abs() / self.width).max(0.0) / self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub v_th: f32,
    pub leak: f32,
    pub reset: ResetMode,
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0) {
            return Err(Error::NonPositiveThreshold(self.v_th));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Maps unconstrained trainables to `(v_th, leak)`: `v_th = softplus(raw_v) + floor`,
/// `leak = sigmoid(raw_leak)`.
pub fn reparam_threshold_leak(raw_v: f32, raw_leak: f32) -> (f32, f32) {
    (softplus(raw_v) + THRESHOLD_FLOOR, sigmoid(raw_leak))
}

/// Derivatives of [`reparam_threshold_leak`] wrt the raw values.
pub fn reparam_derivatives(raw_v: f32, raw_leak: f32) -> (f32, f32) {
    let s = sigmoid(raw_leak);
    (sigmoid(raw_v), s * (1.0 - s))
}

/// Inverse of [`reparam_threshold_leak`], used to initialize raw trainables.
pub fn raw_from_threshold_leak(v_th: f32, leak: f32) -> (f32, f32) {
    let y = (v_th - THRESHOLD_FLOOR).max(1e-6);
    let raw_v = if y > 20.0 { y } else { y.exp_m1().ln() };
    let l = leak.clamp(1e-6, 1.0 - 1e-6);
    (raw_v, (l / (1.0 - l)).ln())
}

/// Membrane potential carried between steps and the spikes of the last step.
#[derive(Clone, Debug, PartialEq)]
pub struct MembraneState {
    pub u: Tensor,
    pub o_prev: Tensor,
}

impl MembraneState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            u: Tensor::zeros(shape),
            o_prev: Tensor::zeros(shape),
        }
    }
}

/// Forward values needed by [`lif_backward`].
#[derive(Clone, Debug)]
pub struct LifCache {
    pub carried_prev: Tensor,
    pub potential: Tensor,
    pub z: Tensor,
    pub spikes: Tensor,
    pub params: LifParams,
}

/// One LIF update. The reset of the previous step is already folded into
/// `state.u`, so `u_t = leak * u_carried + input`, a spike fires where
/// `u_t / v_th - 1 > 0`, and the carried potential is zeroed (hard) or
/// reduced by `v_th` (soft) where it fired.
pub fn lif_step(
    state: &MembraneState,
    input: &Tensor,
    params: &LifParams,
) -> Result<(MembraneState, Tensor, LifCache)> {
    params.validate()?;
    state.u.expect_same_shape(input)?;
    let potential = state.u.zip_map(input, |c, x| params.leak * c + x)?;
    let z = potential.map(|u| u / params.v_th - 1.0);
    let spikes = z.map(|z| if z > 0.0 { 1.0 } else { 0.0 });
    let carried = potential.zip_map(&spikes, |u, o| match params.reset {
        ResetMode::Hard => u * (1.0 - o),
        ResetMode::Soft => u - params.v_th * o,
    })?;
    carried.check_finite("lif_step")?;
    let cache = LifCache {
        carried_prev: state.u.clone(),
        potential,
        z,
        spikes: spikes.clone(),
        params: *params,
    };
    Ok((
        MembraneState {
            u: carried,
            o_prev: spikes.clone(),
        },
        spikes,
        cache,
    ))
}

#[derive(Clone, Debug)]
pub struct LifGrads {
    pub input: Tensor,
    pub carried_prev: Tensor,
    pub leak: f32,
    pub v_th: f32,
}

/// Reverse of [`lif_step`]. `grad_spikes` and `grad_carried` are the upstream
/// gradients of the step's two outputs (either may be `None` for zero).
pub fn lif_backward(
    cache: Option<&LifCache>,
    grad_spikes: Option<&Tensor>,
    grad_carried: Option<&Tensor>,
    surrogate: Surrogate,
) -> Result<LifGrads> {
    let cache = cache.ok_or(Error::MissingForwardState)?;
    let p = cache.params;
    let n = cache.potential.numel();
    for g in [grad_spikes, grad_carried].into_iter().flatten() {
        g.expect_same_shape(&cache.potential)?;
    }
    let gs = |i: usize| grad_spikes.map_or(0.0, |g| g.data()[i]);
    let gc = |i: usize| grad_carried.map_or(0.0, |g| g.data()[i]);
    let mut d_in = vec![0.0f32; n];
    let mut d_prev = vec![0.0f32; n];
    let (mut d_leak, mut d_vth) = (0.0f32, 0.0f32);
    for i in 0..n {
        let u = cache.potential.data()[i];
        let o = cache.spikes.data()[i];
        let (dc_du, dc_do) = match p.reset {
            ResetMode::Hard => (1.0 - o, -u),
            ResetMode::Soft => (1.0, -p.v_th),
        };
        let go = gs(i) + gc(i) * dc_do;
        let dz = go * surrogate.derivative(cache.z.data()[i]);
        let du = gc(i) * dc_du + dz / p.v_th;
        d_vth += -dz * u / (p.v_th * p.v_th);
        if p.reset == ResetMode::Soft {
            d_vth -= gc(i) * o;
        }
        d_in[i] = du;
        d_prev[i] = du * p.leak;
        d_leak += du * cache.carried_prev.data()[i];
    }
    let shape = cache.potential.shape();
    Ok(LifGrads {
        input: Tensor::new(shape, d_in)?,
        carried_prev: Tensor::new(shape, d_prev)?,
        leak: d_leak,
        v_th: d_vth,
    })
}

/// Weights of a convolutional RNN cell: `h_t = tanh(conv_x(x) + conv_h(h_prev))`,
/// `out = conv_o(h_t)`.
#[derive(Clone, Debug)]
pub struct ConvRnnWeights {
    pub wx: Tensor,
    pub bx: Tensor,
    pub geom_x: ConvGeom,
    pub wh: Tensor,
    pub bh: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

pub fn convrnn_step(x: &Tensor, h_prev: &Tensor, w: &ConvRnnWeights) -> Result<(Tensor, Tensor)> {
    let same = ConvGeom::new(w.wh.dim(2), 1, w.wh.dim(2) / 2);
    let from_x = conv2d(x, &w.wx, Some(&w.bx), w.geom_x)?;
    let from_h = conv2d(h_prev, &w.wh, Some(&w.bh), same)?;
    let h = from_x.zip_map(&from_h, |a, b| (a + b).tanh())?;
    let out = conv2d(
        &h,
        &w.wo,
        Some(&w.bo),
        ConvGeom::new(w.wo.dim(2), 1, w.wo.dim(2) / 2),
    )?;
    out.check_finite("convrnn_step")?;
    Ok((h, out))
}
