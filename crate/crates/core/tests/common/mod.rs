//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use lpcl::autodiff::{grad_check, RunningStats, Tape, Var, DEFAULT_EPS};
use lpcl::model::{
    fuse, gru_step, longitudinal_pool, ArchConfig, Forward, GruVars, Mode, ModelParams, Variant,
};
use lpcl::objectives::{
    batch_objective, l2_penalty_tape, sequence_violation_tape, weighted_bce_tape, CohortRole,
    LossWeights, SubjectPreds,
};
use lpcl::training::{forward_batch, Inputs};
use lpcl::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Values at least 0.05 apart, shuffled, so max pooling has no near-ties.
pub fn separated(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Uniform values with magnitude in `[0.05, scale)`, away from kinks at 0.
pub fn off_zero(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    signed(rng, shape, 0.05, scale)
}

/// Uniform magnitudes in `[lo, hi)` with random signs.
pub fn signed(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random weighted sum with zero-mean weights: a smooth scalar readout of
/// any node.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    weighted_readout(tape, y, seed, 0.0)
}

/// Like [`probe`] with weights of mean 0.5, so sums over many outputs (bias
/// and scale gradients) do not cancel toward zero.
pub fn probe_biased(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    weighted_readout(tape, y, seed, 0.5)
}

fn weighted_readout(tape: &mut Tape, y: Var, seed: u64, mean: f32) -> Result<Var> {
    let mut r = rng(seed);
    let n = tape.value(y).len() as f32;
    let w = Tensor::from_fn(tape.shape(y).to_vec(), |_| {
        (mean + r.gen_range(-1.0..1.0f32)) / n.sqrt()
    });
    let w = tape.leaf(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Direct six-loop same-padded 3x3x3 convolution of `[C, D, H, W]`, in f64.
pub fn naive_conv3d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Vec<f64> {
    let s = input.shape();
    let (c_in, d, h, w) = (s[0], s[1], s[2], s[3]);
    let c_out = kernels.shape()[0];
    let at = |c: usize, z: isize, y: isize, x: isize| -> f64 {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return 0.0;
        }
        input.data()[((c * d + z as usize) * h + y as usize) * w + x as usize] as f64
    };
    let mut out = vec![0.0; c_out * d * h * w];
    for o in 0..c_out {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.data()[o] as f64;
                    for c in 0..c_in {
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let k = kernels.data()
                                        [(((o * c_in + c) * 3 + kz) * 3 + ky) * 3 + kx]
                                        as f64;
                                    acc += k * at(
                                        c,
                                        z as isize + kz as isize - 1,
                                        y as isize + ky as isize - 1,
                                        x as isize + kx as isize - 1,
                                    );
                                }
                            }
                        }
                    }
                    out[((o * d + z) * h + y) * w + x] = acc;
                }
            }
        }
    }
    out
}

/// AUC by comparing every positive with every negative; ties count half.
pub fn auc_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn binom(n: u64, k: u64) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Two-sided Fisher p by enumerating every table with the observed margins
/// and summing, in integers, the weights no larger than the observed one.
/// Exact whenever the total `C(n, c1)` fits in 53 bits (n <= 50).
pub fn fisher_enumerate(t: [[u64; 2]; 2]) -> f64 {
    let r1 = t[0][0] + t[0][1];
    let r2 = t[1][0] + t[1][1];
    let c1 = t[0][0] + t[1][0];
    let weight = |a: u64| binom(r1, a) * binom(r2, c1 - a);
    let observed = weight(t[0][0]);
    let lo = c1.saturating_sub(r2);
    let hi = c1.min(r1);
    let tail: u128 = (lo..=hi).map(weight).filter(|&w| w <= observed).sum();
    let total = binom(r1 + r2, c1);
    assert!(
        total < 1 << 53,
        "oracle limited to exactly representable totals"
    );
    tail as f64 / total as f64
}

/// Paired bootstrap test of `AUC(a) - AUC(b)`: resample subjects with
/// replacement inside each class, then `p = 2 (1 - Phi(|diff| / sd))`.
pub fn bootstrap_auc_p(a: &[f64], b: &[f64], labels: &[bool], resamples: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let diff = auc_brute(a, labels) - auc_brute(b, labels);
    let mut idx = Vec::with_capacity(labels.len());
    let (mut s, mut s2) = (0.0f64, 0.0f64);
    let mut sa = Vec::with_capacity(labels.len());
    let mut sb = Vec::with_capacity(labels.len());
    let mut sl = Vec::with_capacity(labels.len());
    for _ in 0..resamples {
        idx.clear();
        idx.extend((0..pos.len()).map(|_| pos[r.gen_range(0..pos.len())]));
        idx.extend((0..neg.len()).map(|_| neg[r.gen_range(0..neg.len())]));
        sa.clear();
        sb.clear();
        sl.clear();
        for &i in &idx {
            sa.push(a[i]);
            sb.push(b[i]);
            sl.push(labels[i]);
        }
        let d = auc_brute(&sa, &sl) - auc_brute(&sb, &sl);
        s += d;
        s2 += d * d;
    }
    let n = resamples as f64;
    let sd = ((s2 - s * s / n) / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return if diff == 0.0 { 1.0 } else { 0.0 };
    }
    let z = diff.abs() / sd;
    2.0 * (1.0 - normal_cdf(z))
}

/// Two classifiers on one sample with correlated scores.
pub fn correlated_instance(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n_pos = r.gen_range(n / 3..=2 * n / 3);
    let labels: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
    let sep_a = r.gen_range(0.0..1.5);
    let sep_b = r.gen_range(0.0..1.5);
    let rho: f64 = r.gen_range(0.0..0.9);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for &l in &labels {
        let (z1, z2) = (gauss(r), gauss(r));
        let shared = z1;
        let own = rho * z1 + (1.0 - rho * rho).sqrt() * z2;
        a.push(shared + if l { sep_a } else { 0.0 });
        b.push(own + if l { sep_b } else { 0.0 });
    }
    (a, b, labels)
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = r.gen_range(f64::EPSILON..1.0);
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error below 1.5e-7), independent of the library's statrs path.
pub fn normal_cdf(z: f64) -> f64 {
    let x = z.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-x * x).exp();
    if z >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

/// Three-block network for 8^3 inputs, small enough for finite differences.
pub fn toy_arch() -> ArchConfig {
    ArchConfig {
        input_extent: 8,
        channels: vec![2, 3, 3],
        fc_hidden: 5,
        feature_width: 4,
        dropout: 0.1,
        ap_include_current: false,
    }
}

pub fn toy_volumes(rng: &mut impl Rng, visits: usize, extent: usize) -> Vec<Tensor> {
    (0..visits)
        .map(|_| rand_tensor(rng, &[1, extent, extent, extent], 1.0))
        .collect()
}

/// Batch objective of `subjects` with parameter `idx` replaced by the node
/// `x`; dropout masks come from a fixed stream so repeated calls agree.
pub fn model_loss(
    tape: &mut Tape,
    params: &ModelParams,
    idx: usize,
    x: Var,
    subjects: &[(Vec<Tensor>, CohortRole)],
    w: &LossWeights,
) -> Result<Var> {
    let vars: Vec<Var> = params
        .tensors
        .iter()
        .enumerate()
        .map(|(j, t)| if j == idx { x } else { tape.leaf(t.clone()) })
        .collect();
    let mut r = rng(99);
    let mut fwd = Forward::with_vars(params, vars, Mode::Train(&mut r))?;
    let inputs: Vec<Inputs> = subjects.iter().map(|(v, _)| Inputs::Volumes(v)).collect();
    let preds = forward_batch(tape, &mut fwd, &inputs)?;
    let penalty = l2_penalty_tape(tape, params, fwd.param_vars())?;
    let sp: Vec<SubjectPreds> = preds
        .into_iter()
        .zip(subjects)
        .map(|(preds, (_, role))| SubjectPreds { preds, role: *role })
        .collect();
    Ok(batch_objective(tape, &sp, penalty, w)?.total)
}

/// Parameter tensors the model-loss case rotates through. Conv biases are
/// left out: the batch norm that follows removes them, so their exact
/// gradient is zero and any relative error is pure rounding.
pub fn checked_tensors(params: &ModelParams) -> Vec<usize> {
    (0..params.tensors.len())
        .filter(|&i| {
            let name = &params.layout.entries[i].name;
            !(name.starts_with("encoder.block") && name.ends_with(".bias"))
        })
        .collect()
}

/// Grad-check outcome of one case over its random instances.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub passed: usize,
    pub instances: usize,
}

impl SuiteRow {
    pub fn ok(&self) -> bool {
        self.passed == self.instances
    }
}

type Case = fn(&mut ChaCha8Rng, usize) -> f64;

/// Step for the primitive cases. Their instances are smooth or stay at
/// least 0.05 from a kink, so a wider step than the default only trims f32
/// rounding; truncation stays below 1e-4 relative.
pub const PRIMITIVE_EPS: f32 = 3e-3;

fn check<F: Fn(&mut Tape, Var) -> Result<Var>>(f: F, x: &Tensor) -> f64 {
    grad_check(f, x, PRIMITIVE_EPS).unwrap()
}

fn dims(r: &mut ChaCha8Rng) -> [usize; 3] {
    [r.gen_range(2..=4), r.gen_range(2..=4), r.gen_range(2..=4)]
}

fn even_dims(r: &mut ChaCha8Rng) -> [usize; 3] {
    [
        2 * r.gen_range(1..=2),
        2 * r.gen_range(1..=2),
        2 * r.gen_range(1..=2),
    ]
}

fn conv_input(r: &mut ChaCha8Rng) -> Tensor {
    let [d, h, w] = dims(r);
    let c = r.gen_range(1..=2);
    if r.gen_bool(0.5) {
        rand_tensor(r, &[c, d, h, w], 1.0)
    } else {
        rand_tensor(r, &[2, c, d, h, w], 1.0)
    }
}

/// Batch-norm scales with magnitude in `[0.5, 1.5]`; near-zero scales push
/// the input gradient below the f32 rounding of the shifted output.
fn gain(r: &mut ChaCha8Rng, c: usize) -> Tensor {
    Tensor::from_fn(vec![c], |_| {
        r.gen_range(0.5..1.5f32) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }
    })
}

fn channels_of(x: &Tensor) -> usize {
    let s = x.shape();
    s[s.len() - 4]
}

const CASES: &[(&str, f64, Case)] = &[
    ("conv3d/input", 1e-3, |r, s| {
        let x = conv_input(r);
        let co = r.gen_range(1..=3);
        let k = rand_tensor(r, &[co, channels_of(&x), 3, 3, 3], 0.5);
        let b = rand_tensor(r, &[co], 0.5);
        check(
            |t, v| {
                let (k, b) = (t.leaf(k.clone()), t.leaf(b.clone()));
                let y = t.conv3d(v, k, b)?;
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("conv3d/kernels", 1e-3, |r, s| {
        let x = conv_input(r);
        let co = r.gen_range(1..=3);
        let k = rand_tensor(r, &[co, channels_of(&x), 3, 3, 3], 0.5);
        let b = rand_tensor(r, &[co], 0.5);
        check(
            |t, v| {
                let (x, b) = (t.leaf(x.clone()), t.leaf(b.clone()));
                let y = t.conv3d(x, v, b)?;
                probe(t, y, s as u64)
            },
            &k,
        )
    }),
    ("conv3d/bias", 1e-3, |r, s| {
        let x = conv_input(r);
        let co = r.gen_range(1..=3);
        let k = rand_tensor(r, &[co, channels_of(&x), 3, 3, 3], 0.5);
        let b = rand_tensor(r, &[co], 0.5);
        check(
            |t, v| {
                let (x, k) = (t.leaf(x.clone()), t.leaf(k.clone()));
                let y = t.conv3d(x, k, v)?;
                probe_biased(t, y, s as u64)
            },
            &b,
        )
    }),
    ("maxpool3d", 1e-3, |r, s| {
        let [d, h, w] = even_dims(r);
        let c = r.gen_range(1..=2);
        let x = separated(r, &[c, d, h, w]);
        check(
            |t, v| {
                let y = t.maxpool3d(v)?;
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("dense/x", 1e-3, |r, s| {
        let (n, m) = (r.gen_range(1..=6), r.gen_range(1..=5));
        let x = if r.gen_bool(0.5) {
            signed(r, &[n], 0.3, 1.5)
        } else {
            signed(r, &[3, n], 0.3, 1.5)
        };
        let (w, b) = (rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[m], 1.0));
        check(
            |t, v| {
                let (w, b) = (t.leaf(w.clone()), t.leaf(b.clone()));
                let y = t.dense(v, w, b)?;
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("dense/w", 1e-3, |r, s| {
        let (n, m) = (r.gen_range(1..=6), r.gen_range(1..=5));
        let x = signed(r, &[3, n], 0.3, 1.5);
        let (w, b) = (rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[m], 1.0));
        check(
            |t, v| {
                let (x, b) = (t.leaf(x.clone()), t.leaf(b.clone()));
                let y = t.dense(x, v, b)?;
                probe(t, y, s as u64)
            },
            &w,
        )
    }),
    ("dense/b", 1e-3, |r, s| {
        let (n, m) = (r.gen_range(1..=6), r.gen_range(1..=5));
        let x = signed(r, &[n], 0.3, 1.5);
        let (w, b) = (rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[m], 1.0));
        check(
            |t, v| {
                let (x, w) = (t.leaf(x.clone()), t.leaf(w.clone()));
                let y = t.dense(x, w, v)?;
                probe(t, y, s as u64)
            },
            &b,
        )
    }),
    ("linear", 1e-3, |r, s| {
        let (n, m) = (r.gen_range(1..=6), r.gen_range(1..=5));
        let x = signed(r, &[n], 0.3, 1.5);
        let w = rand_tensor(r, &[m, n], 1.0);
        check(
            |t, v| {
                let w = t.leaf(w.clone());
                let y = t.linear(v, w)?;
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("relu", 1e-3, |r, s| {
        let x = {
            let n = r.gen_range(1..=12);
            off_zero(r, &[n], 2.0)
        };
        check(
            |t, v| {
                let y = t.relu(v);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("tanh", 1e-3, |r, s| {
        let x = {
            let n = r.gen_range(1..=12);
            rand_tensor(r, &[n], 2.0)
        };
        check(
            |t, v| {
                let y = t.tanh(v);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("sigmoid", 1e-3, |r, s| {
        let x = {
            let n = r.gen_range(1..=12);
            rand_tensor(r, &[n], 3.0)
        };
        check(
            |t, v| {
                let y = t.sigmoid(v);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("hinge_pos", 1e-3, |r, s| {
        let x = {
            let n = r.gen_range(1..=12);
            off_zero(r, &[n], 2.0)
        };
        check(
            |t, v| {
                let y = t.hinge_pos(v);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("ln", 1e-3, |r, s| {
        let x = Tensor::from_fn(vec![r.gen_range(1..=12)], |_| r.gen_range(0.2..3.0));
        check(
            |t, v| {
                let y = t.ln(v);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("affine", 1e-3, |r, s| {
        let x = {
            let n = r.gen_range(1..=12);
            rand_tensor(r, &[n], 2.0)
        };
        let (a, b) = (
            r.gen_range(0.5..2.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 },
            r.gen_range(-1.0..1.0),
        );
        check(
            |t, v| {
                let y = t.affine(v, a, b);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("add/sub/mul", 1e-3, |r, s| {
        let n = r.gen_range(1..=12);
        let x = rand_tensor(r, &[n], 2.0);
        let o = rand_tensor(r, &[n], 2.0);
        check(
            |t, v| {
                let o = t.leaf(o.clone());
                let a = t.add(v, o)?;
                let b = t.sub(o, v)?;
                let c = t.mul(a, b)?;
                let d = t.mul(v, o)?;
                let e = t.add(c, d)?;
                probe(t, e, s as u64)
            },
            &x,
        )
    }),
    ("clamp", 1e-3, |r, s| {
        let x = Tensor::from_fn(vec![r.gen_range(1..=12)], |_| match r.gen_range(0..3) {
            0 => r.gen_range(-2.0..-0.1),
            1 => r.gen_range(0.1..0.9),
            _ => r.gen_range(1.1..2.0),
        });
        check(
            |t, v| {
                let y = t.clamp(v, 0.0, 1.0);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("batchnorm_train/input", 1e-3, |r, s| {
        let c = r.gen_range(1..=3);
        let [d, h, w] = dims(r);
        let x = rand_tensor(r, &[2, c, d, h, w], 2.0);
        let (g, b) = (gain(r, c), rand_tensor(r, &[c], 1.0));
        check(
            |t, v| {
                let (g, b) = (t.leaf(g.clone()), t.leaf(b.clone()));
                let (y, _) = t.batchnorm_train(v, g, b)?;
                let y = t.tanh(y);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("batchnorm_train/gamma", 1e-3, |r, s| {
        let c = r.gen_range(1..=3);
        let x = rand_tensor(r, &[2, c, 2, 2, 2], 2.0);
        let (g, b) = (gain(r, c), rand_tensor(r, &[c], 1.0));
        check(
            |t, v| {
                let (x, b) = (t.leaf(x.clone()), t.leaf(b.clone()));
                let (y, _) = t.batchnorm_train(x, v, b)?;
                let q = t.sum_squares(y);
                let p = probe(t, y, s as u64)?;
                t.add(q, p)
            },
            &g,
        )
    }),
    ("batchnorm_train/beta", 1e-3, |r, s| {
        let c = r.gen_range(1..=3);
        let x = rand_tensor(r, &[2, c, 2, 2, 2], 2.0);
        let (g, b) = (gain(r, c), rand_tensor(r, &[c], 1.0));
        check(
            |t, v| {
                let (x, g) = (t.leaf(x.clone()), t.leaf(g.clone()));
                let (y, _) = t.batchnorm_train(x, g, v)?;
                let y = t.tanh(y);
                probe_biased(t, y, s as u64)
            },
            &b,
        )
    }),
    ("batchnorm_eval", 1e-3, |r, s| {
        let c = r.gen_range(1..=3);
        let x = rand_tensor(r, &[c, 2, 3, 2], 2.0);
        let (g, b) = (gain(r, c), rand_tensor(r, &[c], 1.0));
        let stats = RunningStats {
            mean: (0..c).map(|_| r.gen_range(-1.0..1.0)).collect(),
            var: (0..c).map(|_| r.gen_range(0.5..2.0)).collect(),
        };
        check(
            |t, v| {
                let (g, b) = (t.leaf(g.clone()), t.leaf(b.clone()));
                let y = t.batchnorm_eval(v, g, b, &stats)?;
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("concat", 1e-3, |r, s| {
        let (a, b) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let axis = r.gen_range(0..2);
        let (xs, os) = if axis == 0 {
            ([a, 3], [b, 3])
        } else {
            ([3, a], [3, b])
        };
        let x = rand_tensor(r, &xs, 1.0);
        let o = rand_tensor(r, &os, 1.0);
        check(
            |t, v| {
                let o = t.leaf(o.clone());
                let y = t.concat(&[o, v, v], axis)?;
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("mean_of_set", 1e-3, |r, s| {
        let n = r.gen_range(1..=6);
        let x = rand_tensor(r, &[n], 1.0);
        let o = rand_tensor(r, &[n], 1.0);
        check(
            |t, v| {
                let o = t.leaf(o.clone());
                let y = t.mean_of_set(&[v, o, v])?;
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("reshape/flatten", 1e-3, |r, s| {
        let x = {
            let n = r.gen_range(1..=3);
            rand_tensor(r, &[2, 3, n], 1.0)
        };
        check(
            |t, v| {
                let f = t.flatten(v)?;
                let n = t.value(f).len();
                let y = t.reshape(f, &[n / 2, 2])?;
                let y = t.tanh(y);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("slice/select", 1e-3, |r, s| {
        let rows = r.gen_range(2..=5);
        let x = rand_tensor(r, &[rows, 3], 1.0);
        let start = r.gen_range(0..rows - 1);
        check(
            |t, v| {
                let a = t.slice(v, start, rows - start)?;
                let b = t.select(v, rows - 1)?;
                let a = t.sum_squares(a);
                let b = probe(t, b, s as u64)?;
                t.add(a, b)
            },
            &x,
        )
    }),
    ("sum/sum_squares", 1e-3, |r, _| {
        let x = {
            let n = r.gen_range(1..=12);
            rand_tensor(r, &[n], 2.0)
        };
        check(
            |t, v| {
                let a = t.sum(v);
                let b = t.sum_squares(v);
                t.add(a, b)
            },
            &x,
        )
    }),
    ("dropout", 1e-3, |r, s| {
        let x = {
            let n = r.gen_range(4..=16);
            rand_tensor(r, &[n], 2.0)
        };
        check(
            |t, v| {
                let mut m = rng(s as u64);
                let y = t.dropout(v, 0.3, Some(&mut m))?;
                let y = t.tanh(y);
                probe(t, y, s as u64)
            },
            &x,
        )
    }),
    ("longitudinal_pool", 1e-3, |r, s| {
        let m = r.gen_range(1..=5);
        let x = rand_tensor(r, &[m, 4], 1.0);
        check(
            |t, v| {
                let rows: Vec<Var> = (0..m).map(|i| t.select(v, i)).collect::<Result<_>>()?;
                let g = longitudinal_pool(t, &rows)?;
                let all = t.concat(&g, 0)?;
                probe(t, all, s as u64)
            },
            &x,
        )
    }),
    ("fuse", 1e-3, |r, s| {
        let f = r.gen_range(1..=5);
        let x = rand_tensor(r, &[2 * f], 1.0);
        let (w, b) = (rand_tensor(r, &[f, 2 * f], 1.0), rand_tensor(r, &[f], 0.5));
        check(
            |t, v| {
                let c = t.slice(v, 0, f)?;
                let g = t.slice(v, f, f)?;
                let (w, b) = (t.leaf(w.clone()), t.leaf(b.clone()));
                let h = fuse(t, c, g, w, b)?;
                probe(t, h, s as u64)
            },
            &x,
        )
    }),
    ("gru_step", 1e-3, |r, s| {
        let n = r.gen_range(1..=4);
        // six weight matrices, input and previous state packed in one vector
        let x = rand_tensor(r, &[6 * n * n + 2 * n], 1.0);
        check(
            |t, v| {
                let mut at = 0;
                let mut take = |t: &mut Tape, len: usize, shape: &[usize]| -> Result<Var> {
                    let p = t.slice(v, at, len)?;
                    at += len;
                    t.reshape(p, shape)
                };
                let mut w = Vec::new();
                for _ in 0..6 {
                    w.push(take(t, n * n, &[n, n])?);
                }
                let input = take(t, n, &[n])?;
                let prev = take(t, n, &[n])?;
                let p = GruVars {
                    w_z: w[0],
                    w_r: w[1],
                    w_h: w[2],
                    u_z: w[3],
                    u_r: w[4],
                    u_h: w[5],
                };
                let h = gru_step(t, input, prev, &p)?;
                probe(t, h, s as u64)
            },
            &x,
        )
    }),
    ("weighted_bce", 1e-3, |r, _| {
        let m = r.gen_range(1..=5);
        let x = rand_tensor(r, &[m], 3.0);
        let y: Vec<bool> = (0..m).map(|_| r.gen_bool(0.5)).collect();
        let w = r.gen_range(0.5..3.0);
        check(
            |t, v| {
                let p = t.sigmoid(v);
                let preds: Vec<Var> = (0..m).map(|i| t.slice(p, i, 1)).collect::<Result<_>>()?;
                weighted_bce_tape(t, &preds, &y, w)
            },
            &x,
        )
    }),
    ("sequence_violation", 1e-3, |r, _| {
        let m = r.gen_range(2..=5);
        let x = separated(r, &[m]);
        check(
            |t, v| {
                let preds: Vec<Var> = (0..m).map(|i| t.slice(v, i, 1)).collect::<Result<_>>()?;
                let l = sequence_violation_tape(t, &preds)?;
                let q = t.sum_squares(v);
                t.add(l, q)
            },
            &x,
        )
    }),
    ("l2_penalty", 1e-3, |r, _| {
        let params = ModelParams::init(Variant::CnnRnnLp, &toy_arch(), r.gen()).unwrap();
        let idx = (0..params.tensors.len())
            .filter(|&i| params.group(i).is_penalized())
            .nth(r.gen_range(0..4))
            .unwrap();
        let x = params.tensors[idx].clone();
        check(
            |t, v| {
                let vars: Vec<Var> = params
                    .tensors
                    .iter()
                    .enumerate()
                    .map(|(j, p)| if j == idx { v } else { t.leaf(p.clone()) })
                    .collect();
                l2_penalty_tape(t, &params, &vars)
            },
            &x,
        )
    }),
    ("model_loss", 5e-3, |r, s| {
        let variant = Variant::ALL[s % 4];
        let params = ModelParams::init(variant, &toy_arch(), r.gen()).unwrap();
        let idx = checked_tensors(&params)[s % checked_tensors(&params).len()];
        let role = if s % 3 == 0 {
            CohortRole::Control
        } else {
            CohortRole::Positive
        };
        let subjects = vec![(toy_volumes(r, 2, 8), role)];
        let w = LossWeights {
            lambda_cons: 2.0,
            lambda_reg: 0.02,
            w_pos: 1.5,
        };
        let x = params.tensors[idx].clone();
        grad_check(
            |t, v| model_loss(t, &params, idx, v, &subjects, &w),
            &x,
            DEFAULT_EPS,
        )
        .unwrap()
    }),
];

/// Runs every case `instances` times with fresh random shapes and values.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<SuiteRow> {
    CASES
        .iter()
        .enumerate()
        .map(|(c, &(name, tol, case))| {
            let mut r = rng(seed ^ (c as u64) << 32);
            let errs: Vec<f64> = (0..instances).map(|s| case(&mut r, s)).collect();
            let worst = errs.iter().copied().fold(0.0, f64::max);
            let passed = errs.iter().filter(|&&e| e <= tol).count();
            SuiteRow {
                name,
                worst,
                tol,
                passed,
                instances,
            }
        })
        .collect()
}

/// Minutes-free end-to-end configuration: 16^3, a dozen subjects, two folds.
pub fn tiny_experiment(seed: u64) -> lpcl::experiment::ExperimentConfig {
    use lpcl::experiment::{ExperimentConfig, Method, SplitConfig};
    let mut cfg = ExperimentConfig {
        seed,
        methods: vec![Method::Cnn, Method::LpCl],
        ..Default::default()
    };
    cfg.data.n_control = 8;
    cfg.data.n_positive = 8;
    cfg.data.max_visits = 3;
    cfg.data.seed = seed;
    cfg.arch.channels = vec![2, 2, 2, 2];
    cfg.arch.fc_hidden = 8;
    cfg.arch.feature_width = 4;
    cfg.train.pretrain_epochs = 1;
    cfg.train.pretrain_batch = 8;
    cfg.train.joint_epochs = 2;
    cfg.augment.factor = 2;
    cfg.split = SplitConfig {
        folds: 2,
        val_frac: 0.25,
    };
    cfg
}

/// The desk-scale profile used for the Table I and Fig. 4 analogues.
pub fn acceptance_experiment(seed: u64) -> lpcl::experiment::ExperimentConfig {
    use lpcl::experiment::{ExperimentConfig, Method};
    let mut cfg = ExperimentConfig {
        seed,
        methods: vec![Method::Cnn, Method::Lp, Method::LpCl],
        ..Default::default()
    };
    cfg.data.seed = seed;
    cfg.arch.channels = vec![4, 8, 16, 32];
    cfg.train.freeze_conv = true;
    cfg.train.pretrain_epochs = 1;
    cfg.train.pretrain_batch = 8;
    cfg.train.joint_epochs = 60;
    cfg.train.patience = 20;
    cfg.augment.factor = 3;
    cfg
}
