#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sponge_core::energy::{skipped_macs, worst_case_macs};
use sponge_core::model::LayerSpec;
use sponge_core::objective::{energy_objective_node, training_objective_node, EnergyNormalization};
use sponge_core::{build_toy_mobile_net, ops, Graph, NodeId, ObjectiveScope, SkipRule, Tensor};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const CASES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Normal entries pushed at least `gap` away from zero.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Scalar root: the output itself if scalar, otherwise its inner product with
/// a fixed random projection.
fn evaluate(inputs: &[Tensor], build: &Build, projection: &Tensor) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().enumerate().map(|(i, t)| g.param(format!("x{i}"), t.clone())).collect();
    let out = build(&mut g, &ids);
    let root = if g.value(out).is_scalar() {
        out
    } else {
        let p = g.constant(projection.clone());
        let prod = g.mul(out, p).unwrap();
        g.sum(prod).unwrap()
    };
    (g, root)
}

/// Largest norm-wise relative error between reverse-mode and central
/// difference gradients over all inputs.
pub fn grad_check(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut probe = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = build(&mut probe, &ids);
    let out_shape = probe.value(out).shape().to_vec();
    let projection = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng(seed ^ 0x9e37));

    let (g, root) = evaluate(inputs, build, &projection);
    let grads = g.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        // Inputs the root does not depend on have no entry.
        let analytic = grads.get(&format!("x{i}")).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let shifted = |delta: f64| {
                let mut data = input.data().to_vec();
                data[j] += delta;
                let mut moved = inputs.to_vec();
                moved[i] = Tensor::new(input.shape().to_vec(), data).unwrap();
                let (g, r) = evaluate(&moved, build, &projection);
                g.value(r).data()[0]
            };
            *slot = (shifted(FD_EPS) - shifted(-FD_EPS)) / (2.0 * FD_EPS);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

pub struct GradReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

fn run_cases(op: &'static str, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) -> GradReport {
    let mut r = rng(seed);
    let mut max_rel_error: f64 = 0.0;
    for c in 0..CASES {
        let (inputs, build) = case(&mut r);
        max_rel_error = max_rel_error.max(grad_check(&inputs, build.as_ref(), seed * 1000 + c as u64));
    }
    GradReport { op, cases: CASES, max_rel_error }
}

/// Finite-difference checks for every differentiable op and objective.
pub fn gradient_suite() -> Vec<GradReport> {
    vec![
        run_cases("matmul", 1, |r| {
            let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            (vec![randn(&[m, k], r), randn(&[k, n], r)], Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()))
        }),
        run_cases("add_bias", 2, |r| {
            let (n, c) = (r.gen_range(1..4), r.gen_range(1..4));
            let shape = if r.gen_bool(0.5) { vec![n, c] } else { vec![n, c, r.gen_range(1..4), r.gen_range(1..4)] };
            (vec![randn(&shape, r), randn(&[c], r)], Box::new(|g, x| g.add_bias(x[0], x[1]).unwrap()))
        }),
        run_cases("conv2d", 3, |r| {
            let (n, c, f, k) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..4));
            let (stride, padding) = (r.gen_range(1..3), r.gen_range(0..2));
            let h = r.gen_range(k.max(2)..6);
            let w = r.gen_range(k.max(2)..6);
            (
                vec![randn(&[n, c, h, w], r), randn(&[f, c, k, k], r)],
                Box::new(move |g, x| g.conv2d(x[0], x[1], stride, padding).unwrap()),
            )
        }),
        run_cases("depthwise_conv2d", 4, |r| {
            let (n, c, k) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
            let (stride, padding) = (r.gen_range(1..3), r.gen_range(0..2));
            let h = r.gen_range(k.max(2)..6);
            let w = r.gen_range(k.max(2)..6);
            (
                vec![randn(&[n, c, h, w], r), randn(&[c, k, k], r)],
                Box::new(move |g, x| g.depthwise_conv2d(x[0], x[1], stride, padding).unwrap()),
            )
        }),
        run_cases("relu", 5, |r| {
            let shape = [r.gen_range(1..4), r.gen_range(1..6)];
            (vec![away_from_zero(&shape, 0.05, r)], Box::new(|g, x| g.relu(x[0])))
        }),
        run_cases("global_avg_pool", 6, |r| {
            let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
            (vec![randn(&shape, r)], Box::new(|g, x| g.global_avg_pool(x[0]).unwrap()))
        }),
        run_cases("softmax_cross_entropy", 7, |r| {
            let (n, k) = (r.gen_range(1..5), r.gen_range(2..6));
            let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            (
                vec![randn(&[n, k], r).map(|v| 3.0 * v)],
                Box::new(move |g, x| g.softmax_cross_entropy(x[0], &labels).unwrap()),
            )
        }),
        run_cases("sum", 8, |r| {
            let shape = [r.gen_range(1..4), r.gen_range(1..4)];
            (vec![randn(&shape, r)], Box::new(|g, x| g.sum(x[0]).unwrap()))
        }),
        run_cases("add", 9, |r| {
            let shape = [r.gen_range(1..4), r.gen_range(1..4)];
            (vec![randn(&shape, r), randn(&shape, r)], Box::new(|g, x| g.add(x[0], x[1]).unwrap()))
        }),
        run_cases("mul", 10, |r| {
            let shape = [r.gen_range(1..4), r.gen_range(1..4)];
            (vec![randn(&shape, r), randn(&shape, r)], Box::new(|g, x| g.mul(x[0], x[1]).unwrap()))
        }),
        run_cases("scale", 11, |r| {
            let shape = [r.gen_range(1..4), r.gen_range(1..4)];
            let factor = r.gen_range(-3.0..3.0);
            (vec![randn(&shape, r)], Box::new(move |g, x| g.scale(x[0], factor).unwrap()))
        }),
        run_cases("l0_hat", 12, |r| {
            let shape = [r.gen_range(1..4), r.gen_range(1..6)];
            let sigma = 10f64.powf(r.gen_range(-1.5..0.5));
            (vec![randn(&shape, r)], Box::new(move |g, x| g.l0_hat(x[0], sigma).unwrap()))
        }),
        run_cases("energy_objective", 13, |r| {
            let layers = r.gen_range(1..4);
            let inputs: Vec<Tensor> = (0..layers).map(|_| randn(&[r.gen_range(1..3), r.gen_range(1..5)], r)).collect();
            let sigma = 10f64.powf(r.gen_range(-1.5..0.5));
            (inputs, Box::new(move |g, x| energy_objective_node(g, x, sigma).unwrap()))
        }),
        run_cases("training_objective", 14, |r| {
            let sigma = 10f64.powf(r.gen_range(-1.5..0.5));
            let norm = if r.gen_bool(0.5) { EnergyNormalization::Sum } else { EnergyNormalization::LayerMean };
            let scope = if r.gen_bool(0.5) { ObjectiveScope::AllLayers } else { ObjectiveScope::PostRelu };
            let model = build_toy_mobile_net(&[1, 7, 7], 3, 0.25, r.gen()).unwrap();
            let batch = Tensor::uniform(&[2, 1, 7, 7], 0.0, 1.0, r);
            let names: Vec<String> = model.params().keys().cloned().collect();
            // Random biases keep pre-activations off the ReLU kink.
            let inputs: Vec<Tensor> = names
                .iter()
                .map(|n| {
                    let p = model.param(n).unwrap();
                    if n.ends_with("bias") { Tensor::randn(p.shape(), 0.1, r) } else { p.clone() }
                })
                .collect();
            let build = move |g: &mut Graph, x: &[NodeId]| {
                let (_, outputs) = forward_with_params(&model, g, &batch, x, &names);
                let recorded: Vec<NodeId> =
                    outputs.iter().filter(|(k, _)| scope.includes(*k)).map(|&(_, id)| id).collect();
                training_objective_node(g, &recorded, sigma, norm).unwrap()
            };
            (inputs, Box::new(build))
        }),
    ]
}

/// Forward pass of the default layer algebra wired to caller-supplied
/// parameter nodes so gradients flow to them.
fn forward_with_params(
    model: &sponge_core::Model,
    g: &mut Graph,
    batch: &Tensor,
    params: &[NodeId],
    names: &[String],
) -> (NodeId, Vec<(sponge_core::LayerKind, NodeId)>) {
    let node = |name: String| params[names.iter().position(|n| *n == name).unwrap()];
    let mut x = g.constant(batch.clone());
    let mut outputs = Vec::new();
    for (k, layer) in model.layers().iter().enumerate() {
        let w = || node(sponge_core::model::weight_name(k));
        let b = || node(sponge_core::model::bias_name(k));
        x = match layer {
            LayerSpec::Conv { stride, padding, .. } => {
                let y = g.conv2d(x, w(), *stride, *padding).unwrap();
                g.add_bias(y, b()).unwrap()
            }
            LayerSpec::DepthwiseConv { stride, padding, .. } => {
                let y = g.depthwise_conv2d(x, w(), *stride, *padding).unwrap();
                g.add_bias(y, b()).unwrap()
            }
            LayerSpec::Dense { .. } => {
                let y = g.matmul(x, w()).unwrap();
                g.add_bias(y, b()).unwrap()
            }
            LayerSpec::Relu => g.relu(x),
            LayerSpec::GlobalAvgPool => g.global_avg_pool(x).unwrap(),
        };
        outputs.push((layer.kind(), x));
    }
    (x, outputs)
}

// Brute-force oracles -------------------------------------------------------

fn at4(t: &Tensor, i: [usize; 4]) -> f64 {
    let s = t.shape();
    t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
}

/// Input value read by tap (ky, kx) of output (oy, ox), or `None` in padding.
fn tap(x: &Tensor, n: usize, c: usize, oy: usize, ox: usize, ky: usize, kx: usize, stride: usize, pad: usize) -> Option<f64> {
    let (h, w) = (x.shape()[2] as isize, x.shape()[3] as isize);
    let iy = (oy * stride + ky) as isize - pad as isize;
    let ix = (ox * stride + kx) as isize - pad as isize;
    (iy >= 0 && ix >= 0 && iy < h && ix < w).then(|| at4(x, [n, c, iy as usize, ix as usize]))
}

fn out_extent(i: usize, k: usize, s: usize, p: usize) -> usize {
    (i + 2 * p - k) / s + 1
}

pub fn conv2d_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh) = (k.shape()[0], k.shape()[2]);
    let (oh, ow) = (out_extent(h, kh, stride, pad), out_extent(w, kh, stride, pad));
    let mut out = Vec::new();
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kh {
                                if let Some(v) = tap(x, ni, ci, oy, ox, ky, kx, stride, pad) {
                                    acc += v * at4(k, [fi, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn depthwise_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let kh = k.shape()[1];
    let kk = |ci: usize, ky: usize, kx: usize| k.data()[(ci * kh + ky) * kh + kx];
    let (oh, ow) = (out_extent(h, kh, stride, pad), out_extent(w, kh, stride, pad));
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kh {
                            if let Some(v) = tap(x, ni, ci, oy, ox, ky, kx, stride, pad) {
                                acc += v * kk(ci, ky, kx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

/// Every multiply of the layer as `(activation, weight)`; `None` activation
/// marks a padded tap.
pub fn enumerate_macs(layer: &LayerSpec, x: &Tensor, weights: &Tensor) -> Vec<(Option<f64>, f64)> {
    let mut macs = Vec::new();
    match *layer {
        LayerSpec::Dense { units } => {
            let (n, k) = (x.shape()[0], x.shape()[1]);
            for s in 0..n {
                for u in 0..units {
                    for i in 0..k {
                        macs.push((Some(x.data()[s * k + i]), weights.data()[i * units + u]));
                    }
                }
            }
        }
        LayerSpec::Conv { out_channels, kernel, stride, padding } => {
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            for s in 0..n {
                for f in 0..out_channels {
                    for oy in 0..out_extent(h, kernel, stride, padding) {
                        for ox in 0..out_extent(w, kernel, stride, padding) {
                            for ci in 0..c {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let a = tap(x, s, ci, oy, ox, ky, kx, stride, padding);
                                        macs.push((a, at4(weights, [f, ci, ky, kx])));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerSpec::DepthwiseConv { kernel, stride, padding } => {
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            for s in 0..n {
                for ci in 0..c {
                    for oy in 0..out_extent(h, kernel, stride, padding) {
                        for ox in 0..out_extent(w, kernel, stride, padding) {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let a = tap(x, s, ci, oy, ox, ky, kx, stride, padding);
                                    macs.push((a, weights.data()[(ci * kernel + ky) * kernel + kx]));
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
    }
    macs
}

pub fn skipped_oracle(macs: &[(Option<f64>, f64)], rule: SkipRule) -> u64 {
    macs.iter()
        .filter(|(a, w)| {
            let a_zero = a.map_or(true, |v| v == 0.0);
            match rule {
                SkipRule::SkipOnZeroActivation => a_zero,
                SkipRule::SkipOnZeroWeight => *w == 0.0,
                SkipRule::SkipOnEither => a_zero || *w == 0.0,
            }
        })
        .count() as u64
}

/// Entries zeroed with probability `p`, the rest normal.
pub fn sparse(shape: &[usize], p: f64, r: &mut ChaCha8Rng) -> Tensor {
    let t = randn(shape, r);
    let mask: Vec<bool> = (0..t.len()).map(|_| r.gen_bool(p)).collect();
    Tensor::new(shape.to_vec(), t.data().iter().zip(mask).map(|(&v, z)| if z { 0.0 } else { v }).collect()).unwrap()
}

pub struct OracleReport {
    pub what: &'static str,
    pub cases: usize,
    pub mismatches: usize,
    pub max_abs_error: f64,
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_layer(r: &mut ChaCha8Rng) -> (LayerSpec, Tensor, Tensor) {
    let n = r.gen_range(1..3);
    match r.gen_range(0..3) {
        0 => {
            let (k, units) = (r.gen_range(1..6), r.gen_range(1..5));
            (LayerSpec::Dense { units }, sparse(&[n, k], 0.4, r), sparse(&[k, units], 0.3, r))
        }
        1 => {
            let (c, f, kernel) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
            let (stride, padding) = (r.gen_range(1..3), r.gen_range(0..2));
            let (h, w) = (r.gen_range(kernel..7), r.gen_range(kernel..7));
            (
                LayerSpec::Conv { out_channels: f, kernel, stride, padding },
                sparse(&[n, c, h, w], 0.4, r),
                sparse(&[f, c, kernel, kernel], 0.3, r),
            )
        }
        _ => {
            let (c, kernel) = (r.gen_range(1..4), r.gen_range(1..4));
            let (stride, padding) = (r.gen_range(1..3), r.gen_range(0..2));
            let (h, w) = (r.gen_range(kernel..7), r.gen_range(kernel..7));
            (
                LayerSpec::DepthwiseConv { kernel, stride, padding },
                sparse(&[n, c, h, w], 0.4, r),
                sparse(&[c, kernel, kernel], 0.3, r),
            )
        }
    }
}

pub fn oracle_suite(cases: usize) -> Vec<OracleReport> {
    let mut r = rng(77);
    let mut conv = OracleReport { what: "conv2d", cases, mismatches: 0, max_abs_error: 0.0 };
    let mut dw = OracleReport { what: "depthwise_conv2d", cases, mismatches: 0, max_abs_error: 0.0 };
    let mut mm = OracleReport { what: "matmul", cases, mismatches: 0, max_abs_error: 0.0 };
    let mut worst = OracleReport { what: "worst_case_macs", cases, mismatches: 0, max_abs_error: 0.0 };
    let mut skipped = OracleReport { what: "skipped_macs", cases: 0, mismatches: 0, max_abs_error: 0.0 };
    for _ in 0..cases {
        let (n, c, f, k) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        let (stride, pad) = (r.gen_range(1..3), r.gen_range(0..3));
        let (h, w) = (r.gen_range(k..8), r.gen_range(k..8));
        let x = randn(&[n, c, h, w], &mut r);
        let kern = randn(&[f, c, k, k], &mut r);
        let e = max_abs(ops::conv2d(&x, &kern, stride, pad).unwrap().data(), &conv2d_oracle(&x, &kern, stride, pad));
        conv.max_abs_error = conv.max_abs_error.max(e);
        conv.mismatches += usize::from(e > 1e-12);

        let dkern = randn(&[c, k, k], &mut r);
        let d = ops::depthwise_conv2d(&x, &dkern, stride, pad).unwrap();
        let e = max_abs(d.data(), &depthwise_oracle(&x, &dkern, stride, pad));
        dw.max_abs_error = dw.max_abs_error.max(e);
        dw.mismatches += usize::from(e > 1e-12);

        let (m, kk, nn) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
        let a = randn(&[m, kk], &mut r);
        let b = randn(&[kk, nn], &mut r);
        let e = max_abs(ops::matmul(&a, &b).unwrap().data(), &matmul_oracle(&a, &b));
        mm.max_abs_error = mm.max_abs_error.max(e);
        mm.mismatches += usize::from(e > 1e-12);

        let (layer, input, weights) = random_layer(&mut r);
        let macs = enumerate_macs(&layer, &input, &weights);
        let counted = worst_case_macs(&layer, input.shape()).unwrap();
        worst.mismatches += usize::from(counted != macs.len() as u64);
        for rule in [SkipRule::SkipOnZeroActivation, SkipRule::SkipOnZeroWeight, SkipRule::SkipOnEither] {
            skipped.cases += 1;
            let got = skipped_macs(&layer, &input, Some(&weights), rule).unwrap();
            skipped.mismatches += usize::from(got != skipped_oracle(&macs, rule));
        }
    }
    vec![conv, dw, mm, worst, skipped]
}
