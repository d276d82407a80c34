//! Independent f64 reference for a two-layer spiking toy network.
//!
//! Layer 1: 3x3 conv (no bias) -> per-timestep batch norm (train mode) ->
//! activation site (ReLU or LIF). Layer 2: 3x3 conv with bias on the site
//! output. The scalar objective is `<R, sum_t y_t> + <Q, c_T>` where `c_T`
//! is the membrane carried out of the last step (zero for ReLU sites).
//!
//! Written from the model equations alone, without calling the library.

#![allow(dead_code)]

pub const B: usize = 2;
pub const CI: usize = 2;
pub const CH: usize = 3;
pub const CO: usize = 2;
pub const H: usize = 8;
pub const W: usize = 8;
pub const T: usize = 3;
pub const K: usize = 3;
pub const BN_EPS: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reset {
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Site {
    Relu,
    Lif { reset: Reset, width: f64 },
}

/// Trainable values, flattened in a fixed group order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub w1: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub raw_v: f64,
    pub raw_l: f64,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub const GROUPS: [&str; 7] = ["w1", "gamma", "beta", "raw_v", "raw_l", "w2", "b2"];

impl Params {
    pub fn groups(&self) -> Vec<Vec<f64>> {
        vec![
            self.w1.clone(),
            self.gamma.concat(),
            self.beta.concat(),
            vec![self.raw_v],
            vec![self.raw_l],
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.groups().concat()
    }

    pub fn from_flat(v: &[f64]) -> Self {
        let mut it = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let w1 = take(CH * CI * K * K);
        let gamma = (0..T).map(|_| take(CH)).collect();
        let beta = (0..T).map(|_| take(CH)).collect();
        let raw_v = take(1)[0];
        let raw_l = take(1)[0];
        let w2 = take(CO * CH * K * K);
        let b2 = take(CO);
        Self {
            w1,
            gamma,
            beta,
            raw_v,
            raw_l,
            w2,
            b2,
        }
    }
}

pub struct Inputs {
    /// Per timestep, `[B, CI, H, W]`.
    pub x: Vec<Vec<f64>>,
    /// Weight on the accumulated output, `[B, CO, H, W]`.
    pub r: Vec<f64>,
    /// Weight on the final membrane, `[B, CH, H, W]`.
    pub q: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn threshold(raw_v: f64) -> f64 {
    softplus(raw_v) + FLOOR
}

pub fn leak(raw_l: f64) -> f64 {
    sigmoid(raw_l)
}

fn tri(z: f64, width: f64) -> f64 {
    (1.0 - z.abs() / width).max(0.0) / width
}

/// Same-padded 3x3 convolution, `[B, ci, H, W] -> [B, co, H, W]`.
fn conv(x: &[f64], ci: usize, co: usize, w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; B * co * H * W];
    for n in 0..B {
        for o in 0..co {
            for i in 0..H {
                for j in 0..W {
                    let mut s = bias.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for ki in 0..K {
                            for kj in 0..K {
                                let (yi, xj) =
                                    (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if yi < 0 || xj < 0 || yi >= H as isize || xj >= W as isize {
                                    continue;
                                }
                                let xv = x[((n * ci + c) * H + yi as usize) * W + xj as usize];
                                s += w[((o * ci + c) * K + ki) * K + kj] * xv;
                            }
                        }
                    }
                    y[((n * co + o) * H + i) * W + j] = s;
                }
            }
        }
    }
    y
}

/// Reverse of [`conv`]: accumulates into `dx`, `dw` and `db`.
fn conv_back(
    x: &[f64],
    ci: usize,
    co: usize,
    w: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    for n in 0..B {
        for o in 0..co {
            for i in 0..H {
                for j in 0..W {
                    let g = dy[((n * co + o) * H + i) * W + j];
                    for c in 0..ci {
                        for ki in 0..K {
                            for kj in 0..K {
                                let (yi, xj) =
                                    (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if yi < 0 || xj < 0 || yi >= H as isize || xj >= W as isize {
                                    continue;
                                }
                                let xi = ((n * ci + c) * H + yi as usize) * W + xj as usize;
                                let wi = ((o * ci + c) * K + ki) * K + kj;
                                dw[wi] += g * x[xi];
                                dx[xi] += g * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for n in 0..B {
            for o in 0..co {
                db[o] += dy[(n * co + o) * H * W..(n * co + o + 1) * H * W]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
}

struct Bn {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn bn(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Bn) {
    let m = (B * H * W) as f64;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; CH];
    for c in 0..CH {
        let idx = || (0..B).flat_map(move |n| ((n * CH + c) * H * W)..((n * CH + c + 1) * H * W));
        let mean = idx().map(|i| x[i]).sum::<f64>() / m;
        let var = idx().map(|i| (x[i] - mean).powi(2)).sum::<f64>() / m;
        inv_std[c] = 1.0 / (var + BN_EPS).sqrt();
        for i in idx() {
            xhat[i] = (x[i] - mean) * inv_std[c];
            y[i] = gamma[c] * xhat[i] + beta[c];
        }
    }
    (y, Bn { xhat, inv_std })
}

fn bn_back(
    cache: &Bn,
    gamma: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let m = (B * H * W) as f64;
    for c in 0..CH {
        let idx = || (0..B).flat_map(move |n| ((n * CH + c) * H * W)..((n * CH + c + 1) * H * W));
        let sum_dy: f64 = idx().map(|i| dy[i]).sum();
        let sum_dy_xhat: f64 = idx().map(|i| dy[i] * cache.xhat[i]).sum();
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        for i in idx() {
            let dxhat = dy[i] * gamma[c];
            dx[i] += cache.inv_std[c] / m
                * (m * dxhat - gamma[c] * sum_dy - cache.xhat[i] * gamma[c] * sum_dy_xhat);
        }
    }
}

/// Forward values kept for the adjoint pass.
pub struct Run {
    pub loss: f64,
    /// Spike (or ReLU) outputs per step.
    pub site_out: Vec<Vec<f64>>,
    /// Batch-norm outputs per step.
    pre: Vec<Vec<f64>>,
    bn: Vec<Bn>,
    u: Vec<Vec<f64>>,
    carried_in: Vec<Vec<f64>>,
}

impl Run {
    /// `z = u / v_th - 1` for every neuron and step (LIF sites only).
    pub fn z(&self, p: &Params) -> Vec<Vec<f64>> {
        let v = threshold(p.raw_v);
        self.u
            .iter()
            .map(|u| u.iter().map(|x| x / v - 1.0).collect())
            .collect()
    }
}

pub fn forward(p: &Params, inp: &Inputs, site: Site) -> Run {
    let n1 = B * CH * H * W;
    let (v, lam) = (threshold(p.raw_v), leak(p.raw_l));
    let mut carried = vec![0.0; n1];
    let mut acc = vec![0.0; B * CO * H * W];
    let mut run = Run {
        loss: 0.0,
        site_out: vec![],
        pre: vec![],
        bn: vec![],
        u: vec![],
        carried_in: vec![],
    };
    for t in 0..T {
        let c1 = conv(&inp.x[t], CI, CH, &p.w1, None);
        let (pre, cache) = bn(&c1, &p.gamma[t], &p.beta[t]);
        let out: Vec<f64> = match site {
            Site::Relu => pre.iter().map(|&a| a.max(0.0)).collect(),
            Site::Lif { reset, .. } => {
                let u: Vec<f64> = carried.iter().zip(&pre).map(|(c, a)| lam * c + a).collect();
                let o: Vec<f64> = u
                    .iter()
                    .map(|&x| if x / v - 1.0 > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                run.carried_in.push(carried.clone());
                carried = u
                    .iter()
                    .zip(&o)
                    .map(|(&x, &s)| match reset {
                        Reset::Hard => x * (1.0 - s),
                        Reset::Soft => x - v * s,
                    })
                    .collect();
                run.u.push(u);
                o
            }
        };
        let y = conv(&out, CH, CO, &p.w2, Some(&p.b2));
        for (a, b) in acc.iter_mut().zip(&y) {
            *a += b;
        }
        run.pre.push(pre);
        run.bn.push(cache);
        run.site_out.push(out);
    }
    let mut loss: f64 = acc.iter().zip(&inp.r).map(|(a, r)| a * r).sum();
    if matches!(site, Site::Lif { .. }) {
        loss += carried.iter().zip(&inp.q).map(|(c, q)| c * q).sum::<f64>();
    }
    run.loss = loss;
    run
}

/// Hand-unrolled backpropagation through time for [`forward`].
///
/// The spike derivative is the triangular surrogate of the site's width and
/// gradient flows through the reset term. Also returns the sum of absolute
/// per-neuron terms of the leak gradient, which measures its cancellation.
pub fn adjoint(p: &Params, inp: &Inputs, site: Site, run: &Run) -> (Params, f64) {
    let n1 = B * CH * H * W;
    let (v, lam) = (threshold(p.raw_v), leak(p.raw_l));
    let mut g = Params {
        w1: vec![0.0; p.w1.len()],
        gamma: vec![vec![0.0; CH]; T],
        beta: vec![vec![0.0; CH]; T],
        raw_v: 0.0,
        raw_l: 0.0,
        w2: vec![0.0; p.w2.len()],
        b2: vec![0.0; CO],
    };
    let (mut dv, mut dlam, mut dlam_abs) = (0.0, 0.0, 0.0);
    // gradient arriving at the membrane carried out of step t
    let mut d_carried = match site {
        Site::Lif { .. } => inp.q.clone(),
        Site::Relu => vec![0.0; n1],
    };
    for t in (0..T).rev() {
        let mut d_out = vec![0.0; n1];
        conv_back(
            &run.site_out[t],
            CH,
            CO,
            &p.w2,
            &inp.r,
            &mut d_out,
            &mut g.w2,
            Some(&mut g.b2),
        );
        let mut d_pre = vec![0.0; n1];
        match site {
            Site::Relu => {
                for i in 0..n1 {
                    d_pre[i] = if run.pre[t][i] > 0.0 { d_out[i] } else { 0.0 };
                }
            }
            Site::Lif { reset, width } => {
                let mut d_prev = vec![0.0; n1];
                for i in 0..n1 {
                    let u = run.u[t][i];
                    let o = run.site_out[t][i];
                    let z = u / v - 1.0;
                    let gc = d_carried[i];
                    // carried = u (1 - o)  or  u - v o
                    let (dc_du, dc_do) = match reset {
                        Reset::Hard => (1.0 - o, -u),
                        Reset::Soft => (1.0, -v),
                    };
                    if reset == Reset::Soft {
                        dv += gc * -o;
                    }
                    let d_o = d_out[i] + gc * dc_do;
                    let d_z = d_o * tri(z, width);
                    let d_u = gc * dc_du + d_z / v;
                    dv += d_z * -u / (v * v);
                    dlam += d_u * run.carried_in[t][i];
                    dlam_abs += (d_u * run.carried_in[t][i]).abs();
                    d_prev[i] = d_u * lam;
                    d_pre[i] = d_u;
                }
                d_carried = d_prev;
            }
        }
        let mut d_c1 = vec![0.0; n1];
        bn_back(
            &run.bn[t],
            &p.gamma[t],
            &d_pre,
            &mut d_c1,
            &mut g.gamma[t],
            &mut g.beta[t],
        );
        let mut d_x = vec![0.0; B * CI * H * W];
        conv_back(&inp.x[t], CI, CH, &p.w1, &d_c1, &mut d_x, &mut g.w1, None);
    }
    g.raw_v = dv * sigmoid(p.raw_v);
    g.raw_l = dlam * lam * (1.0 - lam);
    (g, dlam_abs * lam * (1.0 - lam))
}

/// Central differences of [`forward`]'s objective for every trainable.
/// Returns `None` if a perturbation flips any spike, which would put the
/// difference across a discontinuity.
pub fn finite_diff(p: &Params, inp: &Inputs, site: Site, eps: f64) -> Option<Params> {
    let base = forward(p, inp, site);
    let flat = p.flat();
    let mut grad = vec![0.0; flat.len()];
    for k in 0..flat.len() {
        let mut lo = flat.clone();
        let mut hi = flat.clone();
        lo[k] -= eps;
        hi[k] += eps;
        let (rl, rh) = (
            forward(&Params::from_flat(&lo), inp, site),
            forward(&Params::from_flat(&hi), inp, site),
        );
        if matches!(site, Site::Lif { .. })
            && (rl.site_out != base.site_out || rh.site_out != base.site_out)
        {
            return None;
        }
        grad[k] = (rh.loss - rl.loss) / (2.0 * eps);
    }
    Some(Params::from_flat(&grad))
}

/// `||a - b|| / ||b||`, with an absolute fallback when `b` vanishes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm < 1e-12 {
        diff
    } else {
        diff / norm
    }
}
