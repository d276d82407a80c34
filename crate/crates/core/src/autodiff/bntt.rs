//! Batch normalization through time: an independent normalizer per timestep.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics, one `(mean, var)` pair per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Vec<f32>>,
    pub var: Vec<Vec<f32>>,
}

impl RunningStats {
    pub fn new(channels: usize, steps: usize) -> Self {
        Self {
            mean: vec![vec![0.0; channels]; steps],
            var: vec![vec![1.0; channels]; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.mean.len()
    }

    pub fn channels(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    fn update(&mut self, t: usize, batch_mean: &[f32], batch_var_unbiased: &[f32]) {
        for (r, &b) in self.mean[t].iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.var[t].iter_mut().zip(batch_var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Values saved by the forward pass for backward.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub mode: Mode,
}

fn check_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let (_, c, _, _) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(format!(
            "affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

/// Per-channel mean and biased variance over `(N, H, W)`, accumulated in f64.
fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims4().expect("rank-4");
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for smp in 0..n {
            let off = (smp * c + ch) * plane;
            s += x.data()[off..off + plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0f64;
        for smp in 0..n {
            let off = (smp * c + ch) * plane;
            q += x.data()[off..off + plane]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / m;
    }
    (mean, var)
}

/// Normalizes `x` (`[N, C, H, W]`) for timestep `t`.
///
/// Train mode uses the batch statistics of this timestep and folds them into
/// `stats` slot `t`; eval mode reads slot `t` only.
pub fn bntt_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    t: usize,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<(Tensor, BnCache)> {
    let c = check_affine(x, gamma, beta)?;
    stats.check_t(t)?;
    if stats.channels() != c {
        return Err(shape_err(format!(
            "running stats for {} channels, input has {c}",
            stats.channels()
        )));
    }
    let (n, _, h, w) = x.dims4()?;
    let plane = h * w;
    let (mean, inv_std): (Vec<f32>, Vec<f32>) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::DegenerateBatch(n));
            }
            let (mu, var) = channel_moments(x);
            let m = (n * plane) as f64;
            let unbiased: Vec<f32> = var.iter().map(|&v| (v * m / (m - 1.0)) as f32).collect();
            let mu32: Vec<f32> = mu.iter().map(|&v| v as f32).collect();
            stats.update(t, &mu32, &unbiased);
            let inv = var
                .iter()
                .map(|&v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32)
                .collect();
            (mu32, inv)
        }
        Mode::Eval => (
            stats.mean[t].clone(),
            stats.var[t]
                .iter()
                .map(|&v| 1.0 / (v + BN_EPS).sqrt())
                .collect(),
        ),
    };
    let mut xhat = x.clone();
    let mut y = x.clone();
    for smp in 0..n {
        for ch in 0..c {
            let off = (smp * c + ch) * plane;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mode,
        },
    ))
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn bntt_backward(cache: &BnCache, gamma: &Tensor, dy: &Tensor) -> Result<BnGrads> {
    cache.xhat.expect_same_shape(dy)?;
    let (n, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for smp in 0..n {
        for ch in 0..c {
            let off = (smp * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy.data()[i] * cache.xhat.data()[i];
                dbeta[ch] += dy.data()[i];
            }
        }
    }
    let mut dx = dy.clone();
    for smp in 0..n {
        for ch in 0..c {
            let off = (smp * c + ch) * plane;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            for i in off..off + plane {
                dx.data_mut()[i] = match cache.mode {
                    Mode::Train => {
                        scale / m
                            * (m * dy.data()[i] - dbeta[ch] - cache.xhat.data()[i] * dgamma[ch])
                    }
                    Mode::Eval => scale * dy.data()[i],
                };
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

/// Self-contained BNTT layer: affine parameters and running statistics per timestep.
#[derive(Clone, Debug)]
pub struct BnttState {
    pub gamma: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub stats: RunningStats,
}

impl BnttState {
    pub fn new(channels: usize, steps: usize) -> Self {
        Self {
            gamma: vec![Tensor::full(&[channels], 1.0); steps],
            beta: vec![Tensor::zeros(&[channels]); steps],
            stats: RunningStats::new(channels, steps),
        }
    }

    pub fn forward(&mut self, x: &Tensor, t: usize, mode: Mode) -> Result<Tensor> {
        self.stats.check_t(t)?;
        bntt_forward(x, &self.gamma[t], &self.beta[t], t, &mut self.stats, mode).map(|(y, _)| y)
    }
}
