#![allow(dead_code)]

pub mod suite;

use classsr::tensor::{Tape, Tensor, Var};
use classsr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Random f64 tensor with entries in `[-1, 1]` kept at least `margin` away
/// from zero (keeps kinked ops off their kink during finite differencing).
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Compares the tape gradient of `sum(f(inputs) * probe)` against central
/// differences with step `FD_STEP` and returns the worst norm-wise relative
/// error over all inputs.
pub fn gradient_error<F>(inputs: &[Tensor<f64>], probe_seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> (f64, Tensor<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        let mut r = rng(probe_seed);
        let probe = probe
            .cloned()
            .unwrap_or_else(|| random_tensor(&mut r, &shape, 0.1));
        let value = tape.value(out).dot(&probe).unwrap();
        (value, probe)
    };

    let (_, probe) = eval(inputs, None);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let p = tape.constant(probe.clone()).unwrap();
    let weighted = tape.mul(out, p).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let (fp, _) = eval(&plus, Some(&probe));
            let (fm, _) = eval(&minus, Some(&probe));
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .data()
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt())
            .max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}
