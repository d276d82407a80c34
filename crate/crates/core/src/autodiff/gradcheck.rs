//! Finite-difference checks of every kernel's analytic backward.
//!
//! The oracle side re-implements each forward in `f64` with direct loops, so
//! central differences (step 1e-3) are free of `f32` rounding noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bntt::{Mode, RunningStats, BN_EPS};
use super::conv::ConvGeom;
use super::params::ParamId;
use super::tape::Tape;
use crate::error::Error;
use crate::tensor::Tensor;

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;

type Shape4 = [usize; 4];

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn ref_conv(
    x: &[f64],
    xs: Shape4,
    w: &[f64],
    ws: Shape4,
    b: Option<&[f64]>,
    g: ConvGeom,
) -> (Vec<f64>, Shape4) {
    let [n, c, h, wd] = xs;
    let [o, _, k, _] = ws;
    let ho = (h + 2 * g.padding - k) / g.stride + 1;
    let wo = (wd + 2 * g.padding - k) / g.stride + 1;
    let mut y = vec![0.0; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    y[((s * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (y, [n, o, ho, wo])
}

fn ref_conv_t(
    x: &[f64],
    xs: Shape4,
    w: &[f64],
    ws: Shape4,
    b: Option<&[f64]>,
    g: ConvGeom,
) -> (Vec<f64>, Shape4) {
    let [n, ci, h, wd] = xs;
    let [_, co, k, _] = ws;
    let ho = (h - 1) * g.stride + k - 2 * g.padding;
    let wo = (wd - 1) * g.stride + k - 2 * g.padding;
    let mut y = vec![0.0; n * co * ho * wo];
    for s in 0..n {
        for oc in 0..co {
            let bv = b.map_or(0.0, |b| b[oc]);
            for v in &mut y[(s * co + oc) * ho * wo..(s * co + oc + 1) * ho * wo] {
                *v = bv;
            }
        }
        for ic in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x[((s * ci + ic) * h + iy) * wd + ix];
                    for oc in 0..co {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oy = (iy * g.stride + ki) as isize - g.padding as isize;
                                let ox = (ix * g.stride + kj) as isize - g.padding as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                y[((s * co + oc) * ho + oy as usize) * wo + ox as usize] +=
                                    xv * w[((ic * co + oc) * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (y, [n, co, ho, wo])
}

fn ref_bn_train(x: &[f64], xs: Shape4, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |s| ((s * c + ch) * plane)..((s * c + ch + 1) * plane));
        let mu = idx().map(|i| x[i]).sum::<f64>() / m;
        let var = idx().map(|i| (x[i] - mu).powi(2)).sum::<f64>() / m;
        let inv = 1.0 / (var + BN_EPS as f64).sqrt();
        for i in idx() {
            y[i] = gamma[ch] * (x[i] - mu) * inv + beta[ch];
        }
    }
    y
}

fn dot(a: &[f64], r: &[f64]) -> f64 {
    a.iter().zip(r).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` wrt every element of `inputs[which]`.
fn numeric_grad(inputs: &[Vec<f64>], which: usize, f: &dyn Fn(&[Vec<f64>]) -> f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].len())
        .map(|i| {
            let orig = work[which][i];
            work[which][i] = orig + STEP;
            let up = f(&work);
            work[which][i] = orig - STEP;
            let down = f(&work);
            work[which][i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn rel_err(analytic: &Tensor, numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(&a, n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Runs a tape closure producing one output, seeds it with `r`, and checks
/// every input's gradient against differences of the `f64` oracle.
fn check(
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Tape, &[super::Var]) -> super::Var,
    oracle: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    rng: &mut ChaCha8Rng,
) {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(ParamId(i), t.clone()))
        .collect();
    let out = build(&mut tape, &vars);
    let r = rand_t(tape.value(out).shape(), rng);
    let r64 = to64(&r);
    let grads = tape.backward(&[(out, r)]).unwrap();
    let in64: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    let loss = |v: &[Vec<f64>]| dot(&oracle(v), &r64);
    for i in 0..inputs.len() {
        let num = numeric_grad(&in64, i, &loss);
        let err = rel_err(grads.param(ParamId(i)).unwrap(), &num);
        assert!(err < REL_TOL, "input {i}: relative error {err:e}");
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for g in [ConvGeom::new(3, 1, 1), ConvGeom::new(3, 2, 1)] {
        let x = rand_t(&[2, 3, 8, 8], &mut rng);
        let w = rand_t(&[4, 3, 3, 3], &mut rng);
        let b = rand_t(&[4], &mut rng);
        check(
            vec![x, w, b],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), g).unwrap(),
            |v| ref_conv(&v[0], [2, 3, 8, 8], &v[1], [4, 3, 3, 3], Some(&v[2]), g).0,
            &mut rng,
        );
    }
}

#[test]
fn conv_transpose2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = ConvGeom::new(4, 2, 1);
    let x = rand_t(&[2, 3, 4, 4], &mut rng);
    let w = rand_t(&[3, 2, 4, 4], &mut rng);
    let b = rand_t(&[2], &mut rng);
    check(
        vec![x, w, b],
        |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), g).unwrap(),
        |v| ref_conv_t(&v[0], [2, 3, 4, 4], &v[1], [3, 2, 4, 4], Some(&v[2]), g).0,
        &mut rng,
    );
}

#[test]
fn conv_transpose_forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = ConvGeom::new(4, 2, 1);
    let x = rand_t(&[1, 3, 3, 5], &mut rng);
    let w = rand_t(&[3, 2, 4, 4], &mut rng);
    let y = super::conv::conv_transpose2d(&x, &w, None, g).unwrap();
    let (r, shape) = ref_conv_t(&to64(&x), [1, 3, 3, 5], &to64(&w), [3, 2, 4, 4], None, g);
    assert_eq!(y.shape(), &shape);
    for (a, b) in y.data().iter().zip(&r) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn bntt_train_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_t(&[3, 2, 3, 3], &mut rng);
    let gamma = rand_t(&[2], &mut rng);
    let beta = rand_t(&[2], &mut rng);
    check(
        vec![x, gamma, beta],
        |t, v| {
            let mut stats = RunningStats::new(2, 1);
            t.bntt(v[0], v[1], v[2], 0, &mut stats, Mode::Train)
                .unwrap()
        },
        |v| ref_bn_train(&v[0], [3, 2, 3, 3], &v[1], &v[2]),
        &mut rng,
    );
}

#[test]
fn composite_elementwise_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // keep relu inputs away from the kink
    let a = rand_t(&[2, 1, 3, 3], &mut rng).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let b = rand_t(&[2, 1, 3, 3], &mut rng);
    let s = Tensor::scalar(0.4);
    check(
        vec![a, b, s],
        |t, v| {
            let r = t.relu(v[0]).unwrap();
            let m = t.mul(r, v[1]).unwrap();
            let sp = t.softplus(v[2]).unwrap();
            let k = t.mul_scalar(m, sp).unwrap();
            let th = t.tanh(k).unwrap();
            let sg = t.sigmoid(v[1]).unwrap();
            let d = t.sub(th, sg).unwrap();
            let sc = t.scale(d, 1.7).unwrap();
            let e = t.add_const(sc, 0.2).unwrap();
            // fan-out: `a` reaches the output through two branches
            t.add(e, v[0]).unwrap()
        },
        |v| {
            let sp = (1.0 + v[2][0].exp()).ln();
            (0..v[0].len())
                .map(|i| {
                    let th = (v[0][i].max(0.0) * v[1][i] * sp).tanh();
                    let sg = 1.0 / (1.0 + (-v[1][i]).exp());
                    (th - sg) * 1.7 + 0.2 + v[0][i]
                })
                .collect()
        },
        &mut rng,
    );
}

#[test]
fn concat_routes_gradients_to_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = rand_t(&[2, 1, 2, 2], &mut rng);
    let b = rand_t(&[2, 3, 2, 2], &mut rng);
    check(
        vec![a, b],
        |t, v| t.concat(&[v[0], v[1]]).unwrap(),
        |v| {
            let mut out = Vec::new();
            for s in 0..2 {
                out.extend_from_slice(&v[0][s * 4..(s + 1) * 4]);
                out.extend_from_slice(&v[1][s * 12..(s + 1) * 12]);
            }
            out
        },
        &mut rng,
    );
}

#[test]
fn relu_and_tanh_definitions() {
    let mut tape = Tape::new();
    let x = tape.param(ParamId(0), Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let g = tape.backward(&[(y, Tensor::full(&[3], 1.0))]).unwrap();
    assert_eq!(g.param(ParamId(0)).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::new();
    let z = tape.param(ParamId(0), Tensor::scalar(0.0));
    let th = tape.tanh(z).unwrap();
    let g = tape.backward(&[(th, Tensor::scalar(1.0))]).unwrap();
    assert_eq!(g.param(ParamId(0)).unwrap().item(), 1.0);
}

#[test]
fn empty_tape_is_an_error() {
    assert!(matches!(Tape::new().backward(&[]), Err(Error::EmptyTape)));
}

#[test]
fn linear_layer_weight_gradient_is_summed_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_t(&[3, 2, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let w = tape.param(ParamId(0), rand_t(&[1, 2, 1, 1], &mut rng));
    let y = tape.conv2d(xv, w, None, ConvGeom::new(1, 1, 0)).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(&[(l, Tensor::scalar(1.0))]).unwrap();
    let gw = g.param(ParamId(0)).unwrap();
    for c in 0..2 {
        let expect: f64 = (0..3)
            .flat_map(|s| x.data()[(s * 2 + c) * 16..(s * 2 + c + 1) * 16].iter())
            .map(|&v| v as f64)
            .sum();
        assert!((gw.data()[c] as f64 - expect).abs() < 1e-5);
    }
}

#[test]
fn scalar_recurrence_leak_gradient() {
    // u_t = lam * u_{t-1} + x_t with u_0 given, loss = u_2.
    let (lam, u0, x1, x2) = (0.7f32, 0.4f32, 1.3f32, -0.2f32);
    let mut tape = Tape::new();
    let l = tape.param(ParamId(0), Tensor::scalar(lam));
    let mut u = tape.input(Tensor::scalar(u0));
    let mut u1 = None;
    for x in [x1, x2] {
        let decayed = tape.mul_scalar(u, l).unwrap();
        let xv = tape.input(Tensor::scalar(x));
        u = tape.add(decayed, xv).unwrap();
        u1.get_or_insert(u);
    }
    let u1v = tape.value(u1.unwrap()).item();
    let g = tape.backward(&[(u, Tensor::scalar(1.0))]).unwrap();
    let expect = u1v + lam * u0;
    assert!((g.param(ParamId(0)).unwrap().item() - expect).abs() < 1e-6);
}

#[test]
fn fan_out_gradient_is_branch_sum() {
    let mut tape = Tape::new();
    let a = tape.param(ParamId(0), Tensor::scalar(1.5));
    let b = tape.scale(a, 3.0).unwrap();
    let c = tape.tanh(a).unwrap();
    let d = tape.add(b, c).unwrap();
    let g = tape.backward(&[(d, Tensor::scalar(1.0))]).unwrap();
    let expect = 3.0 + (1.0 - 1.5f32.tanh().powi(2));
    assert!((g.param(ParamId(0)).unwrap().item() - expect).abs() < 1e-6);
}

#[test]
fn cleared_tape_replays_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_t(&[2, 2, 5, 5], &mut rng);
    let w = rand_t(&[3, 2, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let run = |tape: &mut Tape| {
        tape.clear();
        let xv = tape.input(x.clone());
        let wv = tape.param(ParamId(0), w.clone());
        let y = tape.conv2d(xv, wv, None, ConvGeom::new(3, 1, 1)).unwrap();
        let y = tape.relu(y).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(&[(l, Tensor::scalar(1.0))])
            .unwrap()
            .param(ParamId(0))
            .unwrap()
            .clone()
    };
    let g1 = run(&mut tape);
    let g2 = run(&mut tape);
    assert_eq!(g1, g2);
}
