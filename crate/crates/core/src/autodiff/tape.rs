//! Reverse-mode tape over dense tensor kernels.
//!
//! Every kernel application appends one node holding its output value and
//! whatever it needs for backward. [`Tape::backward`] visits nodes in exact
//! reverse recording order and accumulates gradients additively, so values
//! reused across timesteps (recurrent state, shared weights) receive the sum
//! of their branch gradients.

use std::collections::BTreeMap;

use super::bntt::{bntt_backward, bntt_forward, BnCache, Mode, RunningStats};
use super::conv::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvGeom};
use super::params::ParamId;
use crate::error::{shape_err, Error, Result};
use crate::neuron::{sigmoid, softplus, Surrogate};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Bntt {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddConst(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Spike {
        u: Var,
        v_th: Var,
        surrogate: Surrogate,
    },
    HardReset {
        u: Var,
        spikes: Var,
    },
    Concat(Vec<Var>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient wrt a recorded value; `None` when no path reaches the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shape"),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, what: &'static str) -> Result<Var> {
        value.check_finite(what)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient is reported for it as a parameter).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        self.push(y, Op::Conv { x, w, b, geom }, "conv2d")
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let y = conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        self.push(y, Op::ConvT { x, w, b, geom }, "conv_transpose2d")
    }

    pub fn bntt(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        t: usize,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let (y, cache) = bntt_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            t,
            stats,
            mode,
        )?;
        self.push(
            y,
            Op::Bntt {
                x,
                gamma,
                beta,
                cache,
            },
            "bntt",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let y = self.value(a).map(|x| x * s);
        self.push(y, Op::Scale(a, s), "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f32) -> Result<Var> {
        let y = self.value(a).map(|x| x + c);
        self.push(y, Op::AddConst(a), "add_const")
    }

    /// Multiplies a tensor by a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(shape_err(format!(
                "scalar factor has shape {:?}",
                sv.shape()
            )));
        }
        let k = sv.item();
        let y = self.value(a).map(|x| x * k);
        self.push(y, Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|x| x.max(0.0));
        self.push(y, Op::Relu(a), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(f32::tanh);
        self.push(y, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(sigmoid);
        self.push(y, Op::Sigmoid(a), "sigmoid")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(softplus);
        self.push(y, Op::Softplus(a), "softplus")
    }

    /// Binary spikes `u / v_th - 1 > 0`; backward uses the surrogate derivative.
    pub fn spike(&mut self, u: Var, v_th: Var, surrogate: Surrogate) -> Result<Var> {
        let v = self.value(v_th);
        if v.numel() != 1 {
            return Err(shape_err(format!("threshold has shape {:?}", v.shape())));
        }
        let v = v.item();
        if !(v > 0.0) {
            return Err(Error::NonPositiveThreshold(v));
        }
        let y = self
            .value(u)
            .map(|x| if x / v - 1.0 > 0.0 { 1.0 } else { 0.0 });
        self.push(y, Op::Spike { u, v_th, surrogate }, "spike")
    }

    /// `u * (1 - spikes)`.
    pub fn hard_reset(&mut self, u: Var, spikes: Var) -> Result<Var> {
        let y = self
            .value(u)
            .zip_map(self.value(spikes), |x, o| x * (1.0 - o))?;
        self.push(y, Op::HardReset { u, spikes }, "hard_reset")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&vals)?;
        self.push(y, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a), "sum")
    }

    /// Backpropagates the given seed gradients through the whole tape.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            self.value(*v).expect_same_shape(g)?;
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let mut slot = params.remove(id);
                    accumulate(&mut slot, g.clone());
                    params.insert(*id, slot.expect("just accumulated"));
                }
                Op::Conv { x, w, b, geom } => {
                    let r =
                        conv2d_backward(self.value(*x), self.value(*w), b.is_some(), *geom, &g)?;
                    accumulate(&mut grads[x.0], r.input);
                    accumulate(&mut grads[w.0], r.weight);
                    if let (Some(b), Some(gb)) = (b, r.bias) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::ConvT { x, w, b, geom } => {
                    let r = conv_transpose2d_backward(
                        self.value(*x),
                        self.value(*w),
                        b.is_some(),
                        *geom,
                        &g,
                    )?;
                    accumulate(&mut grads[x.0], r.input);
                    accumulate(&mut grads[w.0], r.weight);
                    if let (Some(b), Some(gb)) = (b, r.bias) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Bntt {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let r = bntt_backward(cache, self.value(*gamma), &g)?;
                    accumulate(&mut grads[x.0], r.input);
                    accumulate(&mut grads[gamma.0], r.gamma);
                    accumulate(&mut grads[beta.0], r.beta);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |d, y| d * y)?;
                    let gb = g.zip_map(self.value(*a), |d, x| d * x)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.map(|v| v * s)),
                Op::AddConst(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::MulScalar(a, s) => {
                    let k = self.value(*s).item();
                    // scalar reductions accumulate in f64
                    let gs = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&d, &x)| d as f64 * x as f64)
                        .sum::<f64>() as f32;
                    accumulate(&mut grads[a.0], g.map(|v| v * k));
                    accumulate(
                        &mut grads[s.0],
                        Tensor::new(self.value(*s).shape(), vec![gs])?,
                    );
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(_) | Op::Sigmoid(_) => {
                    let a = match node.op {
                        Op::Tanh(a) | Op::Sigmoid(a) => a,
                        _ => unreachable!(),
                    };
                    let is_tanh = matches!(node.op, Op::Tanh(_));
                    let ga = g.zip_map(&node.value, |d, y| {
                        if is_tanh {
                            d * (1.0 - y * y)
                        } else {
                            d * y * (1.0 - y)
                        }
                    })?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |d, x| d * sigmoid(x))?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Spike { u, v_th, surrogate } => {
                    let v = self.value(*v_th).item();
                    let uv = self.value(*u);
                    let mut gv = 0.0f64;
                    let mut gu = g.clone();
                    for ((d, &x), out) in g.data().iter().zip(uv.data()).zip(gu.data_mut()) {
                        let dz = d * surrogate.derivative(x / v - 1.0);
                        *out = dz / v;
                        gv -= (dz * x) as f64 / (v as f64 * v as f64);
                    }
                    let gv = gv as f32;
                    accumulate(&mut grads[u.0], gu);
                    accumulate(
                        &mut grads[v_th.0],
                        Tensor::new(self.value(*v_th).shape(), vec![gv])?,
                    );
                }
                Op::HardReset { u, spikes } => {
                    let gu = g.zip_map(self.value(*spikes), |d, o| d * (1.0 - o))?;
                    let go = g.zip_map(self.value(*u), |d, x| -d * x)?;
                    accumulate(&mut grads[u.0], gu);
                    accumulate(&mut grads[spikes.0], go);
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).dim(1)).collect();
                    for (p, gp) in parts.iter().zip(g.split_channels(&widths)?) {
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::Sum(a) => {
                    let d = g.item();
                    accumulate(&mut grads[a.0], Tensor::full(self.value(*a).shape(), d));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}
