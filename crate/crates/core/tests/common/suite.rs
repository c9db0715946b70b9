//! Finite-difference cases for every differentiable op and loss. Each case
//! maps a seed to the worst relative gradient error of one random instance.

use classsr::losses::{average_loss, blended_output, class_loss, image_loss, total_loss, BalanceMode, LossWeights};
use classsr::tensor::Tensor;
use rand::Rng;

use super::{gradient_error, random_tensor, rng};

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;

pub type Case = (&'static str, fn(u64) -> f64);

pub const OPS: &[Case] = &[
    ("conv2d", conv2d),
    ("conv_transpose2d", conv_transpose2d),
    ("prelu", prelu),
    ("relu", relu),
    ("global_avg_pool", global_avg_pool),
    ("linear", linear),
    ("softmax", softmax),
    ("add/sub/mul/scale/shift", elementwise),
    ("abs", abs),
    ("sum/mean", sum_mean),
    ("column/scale_rows", column_scale_rows),
];

pub const LOSSES: &[Case] = &[
    ("image loss of blended output", image_loss_case),
    ("class loss", class_loss_case),
    ("average loss", average_loss_case),
    ("total loss", total_loss_case),
];

/// Worst error over all instances of one case.
pub fn worst(case: fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(case).fold(0.0, f64::max)
}

fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cin = r.gen_range(1..=3);
    let cout = r.gen_range(1..=3);
    let k = [1, 2, 3][r.gen_range(0..3)];
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..=1);
    let hw = r.gen_range(k.max(3)..=5);
    let x = random_tensor(&mut r, &[2, cin, hw, hw], 0.0);
    let w = random_tensor(&mut r, &[cout, cin, k, k], 0.0);
    let b = random_tensor(&mut r, &[cout], 0.0);
    gradient_error(&[x, w, b], seed, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad))
}

fn conv_transpose2d(seed: u64) -> f64 {
    let mut r = rng(100 + seed);
    let cin = r.gen_range(1..=3);
    let cout = r.gen_range(1..=2);
    let k = r.gen_range(1..=4);
    let stride = r.gen_range(1..=3);
    let pad = r.gen_range(0..=(k - 1) / 2);
    let out_pad = r.gen_range(0..stride);
    let hw = r.gen_range(2..=4);
    let x = random_tensor(&mut r, &[2, cin, hw, hw], 0.0);
    let w = random_tensor(&mut r, &[cin, cout, k, k], 0.0);
    let b = random_tensor(&mut r, &[cout], 0.0);
    gradient_error(&[x, w, b], seed, |t, v| {
        t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad, out_pad)
    })
}

fn prelu(seed: u64) -> f64 {
    let mut r = rng(300 + seed);
    let x = random_tensor(&mut r, &[2, 3, 2, 2], 0.01);
    let a = random_tensor(&mut r, &[3], 0.0);
    gradient_error(&[x, a], seed, |t, v| t.prelu(v[0], v[1]))
}

fn relu(seed: u64) -> f64 {
    let mut r = rng(400 + seed);
    let x = random_tensor(&mut r, &[2, 3, 2, 2], 0.01);
    gradient_error(&[x], seed, |t, v| t.relu(v[0]))
}

fn global_avg_pool(seed: u64) -> f64 {
    let mut r = rng(500 + seed);
    let x = random_tensor(&mut r, &[2, 3, 3, 2], 0.0);
    gradient_error(&[x], seed, |t, v| t.global_avg_pool(v[0]))
}

fn linear(seed: u64) -> f64 {
    let mut r = rng(600 + seed);
    let fin = r.gen_range(1..=5);
    let fout = r.gen_range(1..=4);
    let x = random_tensor(&mut r, &[3, fin], 0.0);
    let w = random_tensor(&mut r, &[fout, fin], 0.0);
    let b = random_tensor(&mut r, &[fout], 0.0);
    gradient_error(&[x, w, b], seed, |t, v| t.linear(v[0], v[1], Some(v[2])))
}

fn softmax(seed: u64) -> f64 {
    let mut r = rng(700 + seed);
    let k = r.gen_range(2..=5);
    let x = random_tensor(&mut r, &[3, k], 0.0);
    gradient_error(&[x], seed, |t, v| t.softmax(v[0]))
}

fn elementwise(seed: u64) -> f64 {
    let mut r = rng(800 + seed);
    let a = random_tensor(&mut r, &[2, 3], 0.0);
    let b = random_tensor(&mut r, &[2, 3], 0.0);
    gradient_error(&[a, b], seed, |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let p = t.mul(d, v[1])?;
        let q = t.scale(p, -1.5)?;
        t.shift(q, 0.25)
    })
}

fn abs(seed: u64) -> f64 {
    let mut r = rng(900 + seed);
    let x = random_tensor(&mut r, &[2, 3], 0.01);
    gradient_error(&[x], seed, |t, v| t.abs(v[0]))
}

fn sum_mean(seed: u64) -> f64 {
    let mut r = rng(1000 + seed);
    let x = random_tensor(&mut r, &[2, 3], 0.0);
    gradient_error(&[x], seed, |t, v| {
        let s = t.sum(v[0])?;
        let m = t.mean(v[0])?;
        t.mul(s, m)
    })
}

fn column_scale_rows(seed: u64) -> f64 {
    let mut r = rng(1100 + seed);
    let p = random_tensor(&mut r, &[3, 4], 0.0);
    let x = random_tensor(&mut r, &[3, 2, 2, 2], 0.0);
    let j = r.gen_range(0..4);
    gradient_error(&[p, x], seed, move |t, v| {
        let c = t.column(v[0], j)?;
        t.scale_rows(v[1], c)
    })
}

// Losses take probabilities, so every case differentiates through a softmax
// of unconstrained logits.

fn logits(r: &mut rand_chacha::ChaCha8Rng, b: usize, m: usize) -> Tensor<f64> {
    Tensor::from_fn(&[b, m], |_| r.gen_range(-2.0..2.0))
}

fn image_loss_case(seed: u64) -> f64 {
    let mut r = rng(2000 + seed);
    let m = r.gen_range(2..=4);
    let z = logits(&mut r, 2, m);
    let mut inputs = vec![z];
    for _ in 0..m {
        inputs.push(random_tensor(&mut r, &[2, 1, 3, 3], 0.0));
    }
    // keeps the L1 residual off its kink
    let target = Tensor::from_fn(&[2, 1, 3, 3], |i| if i % 2 == 0 { 3.0 } else { -3.0 });
    gradient_error(&inputs, seed, move |t, v| {
        let p = t.softmax(v[0])?;
        let y = blended_output(t, p, &v[1..])?;
        let gt = t.constant(target.clone())?;
        image_loss(t, y, gt)
    })
}

fn class_loss_case(seed: u64) -> f64 {
    let mut r = rng(3000 + seed);
    let m = r.gen_range(2..=5);
    let b = r.gen_range(1..=4);
    let z = logits(&mut r, b, m);
    gradient_error(&[z], seed, |t, v| {
        let p = t.softmax(v[0])?;
        class_loss(t, p)
    })
}

fn average_loss_case(seed: u64) -> f64 {
    let mut r = rng(4000 + seed);
    let m = r.gen_range(2..=5);
    let b = m * r.gen_range(1..=3);
    let z = logits(&mut r, b, m);
    gradient_error(&[z], seed, |t, v| {
        let p = t.softmax(v[0])?;
        average_loss(t, p, BalanceMode::Strict)
    })
}

fn total_loss_case(seed: u64) -> f64 {
    let mut r = rng(5000 + seed);
    let m = 3;
    let z = logits(&mut r, 3, m);
    let outs: Vec<Tensor<f64>> = (0..m).map(|_| random_tensor(&mut r, &[3, 1, 2, 2], 0.0)).collect();
    let mut inputs = vec![z];
    inputs.extend(outs);
    let target = Tensor::from_fn(&[3, 1, 2, 2], |i| if i % 3 == 0 { 2.5 } else { -2.5 });
    gradient_error(&inputs, seed, move |t, v| {
        let p = t.softmax(v[0])?;
        let y = blended_output(t, p, &v[1..])?;
        let gt = t.constant(target.clone())?;
        let l1 = image_loss(t, y, gt)?;
        let lc = class_loss(t, p)?;
        let la = average_loss(t, p, BalanceMode::Strict)?;
        total_loss(t, l1, lc, la, &LossWeights::default())
    })
}
