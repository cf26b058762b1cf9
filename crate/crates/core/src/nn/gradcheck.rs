//! Central finite-difference checks of every backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{soft_dice_loss, DiceReduction};
use super::net::{Arch, NetConfig, Network};
use super::ops::{self, ConvParams};
use super::Tensor;

pub const STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-5;
/// Denominator floor in the relative error, so exact zeros compare as zero.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Larger of two errors; NaN wins.
fn worse(a: f64, b: f64) -> f64 {
    if b.is_nan() || b > a {
        b
    } else {
        a
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Weights for the probe objective `Σ r·y`, bounded away from zero.
fn probe(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// `Σ r·(y⁺ − y⁻) / 2h`; differencing outputs before the dot product keeps
/// untouched outputs exactly cancelled.
fn probe_difference(r: &Tensor, plus: &Tensor, minus: &Tensor) -> f64 {
    r.data().iter().zip(plus.data().iter().zip(minus.data())).map(|(w, (p, m))| w * (p - m)).sum::<f64>()
        / (2.0 * STEP)
}

/// Compares `analytic[i]` with the finite difference obtained by nudging
/// `values[i]` and re-evaluating `f`.
fn check_slice(
    values: &mut Vec<f64>,
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + STEP;
        let plus = f(values);
        values[i] = orig - STEP;
        let minus = f(values);
        values[i] = orig;
        worst = worse(worst, rel_err(analytic[i], plus - minus));
    }
    (worst, values.len())
}

fn unary_check_precise(
    name: &str,
    x: &Tensor,
    r: &Tensor,
    forward: impl Fn(&Tensor) -> Tensor,
    analytic: &Tensor,
) -> CheckResult {
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let plus = forward(&xp);
        xp.data_mut()[i] = orig - STEP;
        let minus = forward(&xp);
        xp.data_mut()[i] = orig;
        worst = worse(worst, rel_err(analytic.data()[i], probe_difference(r, &plus, &minus)));
    }
    CheckResult { name: name.to_string(), max_rel_err: worst, tolerance: OP_TOLERANCE, checked: x.len() }
}

pub fn check_conv2d(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, [2, 3, 5, 4], -1.0, 1.0);
    let mut params = ConvParams::he_uniform(4, 3, 3, &mut rng);
    for b in &mut params.bias {
        *b = rng.gen_range(-0.5..0.5);
    }
    let y = ops::conv2d(&x, &params).unwrap();
    let r = probe(&mut rng, y.shape());
    let grads = ops::conv2d_backward(&x, &params, &r).unwrap();

    let input = unary_check_precise("conv2d.input", &x, &r, |t| ops::conv2d(t, &params).unwrap(), &grads.input);

    let mut worst_w = 0.0f64;
    let mut p = params.clone();
    for i in 0..p.weight.len() {
        let orig = p.weight[i];
        p.weight[i] = orig + STEP;
        let plus = ops::conv2d(&x, &p).unwrap();
        p.weight[i] = orig - STEP;
        let minus = ops::conv2d(&x, &p).unwrap();
        p.weight[i] = orig;
        worst_w = worse(worst_w, rel_err(grads.weight[i], probe_difference(&r, &plus, &minus)));
    }
    let mut worst_b = 0.0f64;
    for i in 0..p.bias.len() {
        let orig = p.bias[i];
        p.bias[i] = orig + STEP;
        let plus = ops::conv2d(&x, &p).unwrap();
        p.bias[i] = orig - STEP;
        let minus = ops::conv2d(&x, &p).unwrap();
        p.bias[i] = orig;
        worst_b = worse(worst_b, rel_err(grads.bias[i], probe_difference(&r, &plus, &minus)));
    }
    vec![
        input,
        CheckResult { name: "conv2d.weight".into(), max_rel_err: worst_w, tolerance: OP_TOLERANCE, checked: p.weight.len() },
        CheckResult { name: "conv2d.bias".into(), max_rel_err: worst_b, tolerance: OP_TOLERANCE, checked: p.bias.len() },
    ]
}

pub fn check_conv1x1(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, [2, 3, 4, 4], -1.0, 1.0);
    let params = ConvParams::he_uniform(2, 3, 1, &mut rng);
    let y = ops::conv2d(&x, &params).unwrap();
    let r = probe(&mut rng, y.shape());
    let g = ops::conv2d_backward(&x, &params, &r).unwrap();
    unary_check_precise("conv2d_1x1.input", &x, &r, |t| ops::conv2d(t, &params).unwrap(), &g.input)
}

pub fn check_relu(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep inputs clear of the kink
    let mut x = random_tensor(&mut rng, [1, 2, 6, 6], -1.0, 1.0);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v += 0.01;
        }
    }
    let r = probe(&mut rng, x.shape());
    let g = ops::relu_backward(&x, &r);
    unary_check_precise("relu", &x, &r, ops::relu, &g)
}

pub fn check_sigmoid(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, [1, 2, 6, 6], -4.0, 4.0);
    let r = probe(&mut rng, x.shape());
    let g = ops::sigmoid_backward(&ops::sigmoid(&x), &r);
    unary_check_precise("sigmoid", &x, &r, ops::sigmoid, &g)
}

pub fn check_maxpool(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a shuffled ramp: window entries differ by at least 1e-2, far above STEP
    let mut values: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
    for i in (1..values.len()).rev() {
        values.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::from_vec([1, 1, 4, 4], values).unwrap();
    let (y, argmax) = ops::maxpool2(&x).unwrap();
    let r = probe(&mut rng, y.shape());
    let g = ops::maxpool2_backward(x.shape(), &argmax, &r);
    unary_check_precise("maxpool2", &x, &r, |t| ops::maxpool2(t).unwrap().0, &g)
}

pub fn check_upsample(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, [2, 2, 3, 3], -1.0, 1.0);
    let r = probe(&mut rng, [2, 2, 6, 6]);
    let g = ops::upsample2_backward(&r);
    unary_check_precise("upsample2", &x, &r, ops::upsample2, &g)
}

pub fn check_dice(seed: u64, reduction: DiceReduction) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 1, 8, 8];
    let p = random_tensor(&mut rng, shape, 0.01, 0.99);
    let n = shape.iter().product();
    let t = Tensor::from_vec(shape, (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap();
    let (_, g) = soft_dice_loss(&p, &t, reduction).unwrap();
    let mut values = p.into_data();
    let (worst, checked) = check_slice(&mut values, g.data(), |v| {
        let pt = Tensor::from_vec(shape, v.to_vec()).unwrap();
        soft_dice_loss(&pt, &t, reduction).unwrap().0 / (2.0 * STEP)
    });
    let name = match reduction {
        DiceReduction::Batch => "soft_dice_loss",
        DiceReduction::PerSample => "soft_dice_loss.per_sample",
    };
    CheckResult { name: name.into(), max_rel_err: worst, tolerance: OP_TOLERANCE, checked }
}

/// Every parameter of a network on a 16×16 input under the soft Dice loss.
/// The error is norm-wise, `‖a − n‖ / max(‖a‖, ‖n‖)` over all parameters:
/// single entries near zero sit below the finite-difference rounding floor.
pub fn check_network(seed: u64, arch: Arch, depth: usize, base_channels: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(NetConfig { arch, depth, base_channels, seed }).unwrap();
    // small random biases so no pre-activation sits exactly on the ReLU kink
    for l in net.layers_mut() {
        for b in &mut l.bias {
            *b = rng.gen_range(-0.05..0.05);
        }
    }
    let x = random_tensor(&mut rng, [2, 1, 16, 16], -1.0, 1.0);
    let t = Tensor::from_vec(
        [2, 1, 16, 16],
        (0..512).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let loss_of = |n: &Network| {
        let y = n.forward(&x).unwrap();
        soft_dice_loss(&y, &t, DiceReduction::Batch).unwrap().0
    };
    let tape = net.forward_tape(&x).unwrap();
    let (_, dl) = soft_dice_loss(tape.output(), &t, DiceReduction::Batch).unwrap();
    let grads = net.backward(&tape, &dl).unwrap();

    let mut analytic_all = Vec::new();
    let mut numeric_all = Vec::new();
    for li in 0..net.layers().len() {
        for which in 0..2 {
            let len = if which == 0 { net.layers()[li].weight.len() } else { net.layers()[li].bias.len() };
            for i in 0..len {
                fn slot_of(n: &mut Network, li: usize, which: usize, i: usize) -> &mut f64 {
                    let l = &mut n.layers_mut()[li];
                    if which == 0 {
                        &mut l.weight[i]
                    } else {
                        &mut l.bias[i]
                    }
                }
                let orig = *slot_of(&mut net, li, which, i);
                *slot_of(&mut net, li, which, i) = orig + STEP;
                let plus = loss_of(&net);
                *slot_of(&mut net, li, which, i) = orig - STEP;
                let minus = loss_of(&net);
                *slot_of(&mut net, li, which, i) = orig;
                let numeric = (plus - minus) / (2.0 * STEP);
                let analytic = if which == 0 { grads.layers[li].0[i] } else { grads.layers[li].1[i] };
                analytic_all.push(analytic);
                numeric_all.push(numeric);
            }
        }
    }
    CheckResult {
        name: format!("{arch}.depth{depth}.end_to_end"),
        max_rel_err: norm_rel_err(&analytic_all, &numeric_all),
        tolerance: END_TO_END_TOLERANCE,
        checked: analytic_all.len(),
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, REL_FLOOR)`.
pub fn norm_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    diff / norm(analytic.iter().copied()).max(norm(numeric.iter().copied())).max(REL_FLOOR)
}


/// The full suite: every differentiable op plus a depth-1 U-net and a
/// depth-2 nested U-net end to end.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = check_conv2d(seed);
    out.push(check_conv1x1(seed + 1));
    out.push(check_relu(seed + 2));
    out.push(check_sigmoid(seed + 3));
    out.push(check_maxpool(seed + 4));
    out.push(check_upsample(seed + 5));
    out.push(check_dice(seed + 6, DiceReduction::Batch));
    out.push(check_dice(seed + 7, DiceReduction::PerSample));
    out.push(check_network(seed + 8, Arch::Unet, 1, 4));
    out.push(check_network(seed + 9, Arch::Unetpp, 2, 4));
    out
}

