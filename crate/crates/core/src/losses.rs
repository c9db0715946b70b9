//! Training objective: probability-blended SR output, the L1 image loss, the
//! class loss that pushes each probability vector toward one-hot, and the
//! average loss that balances branch usage within a batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

const PROB_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 2000.0,
            w2: 1.0,
            w3: 6.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w1, self.w2, self.w3];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite, nonnegative and not all zero: {self:?}"
            )));
        }
        Ok(())
    }

    /// `w1 * l1 + w2 * lc + w3 * la` on plain numbers.
    pub fn combine(&self, l1: f64, lc: f64, la: f64) -> Result<f64> {
        if ![l1, lc, la].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        Ok(self.w1 * l1 + self.w2 * lc + self.w3 * la)
    }
}

/// How `average_loss` treats batches whose size is not a multiple of M.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// Reject `B mod M != 0`.
    #[default]
    Strict,
    /// Use the real-valued target `B / M`.
    Permissive,
}

/// Checks that a `[B, M]` tensor holds one probability vector per row.
pub fn validate_probs<T: Real>(probs: &Tensor<T>) -> Result<()> {
    let [_, m] = *probs.shape() else {
        return Err(Error::InvalidDistribution(format!(
            "expected [B, M], got {:?}",
            probs.shape()
        )));
    };
    if m == 0 {
        return Err(Error::InvalidDistribution("M must be at least 1".into()));
    }
    for (b, row) in probs.data().chunks(m).enumerate() {
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        if row.iter().any(|v| v.as_f64() < 0.0) || (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidDistribution(format!(
                "row {b} sums to {total} or has negative entries"
            )));
        }
    }
    Ok(())
}

/// `y = sum_i P_i * f_i(x)` per sample, for `probs [B, M]` and `M` branch
/// outputs of shape `[B, ...]`.
pub fn blended_output<T: Real>(tape: &mut Tape<T>, probs: Var, outputs: &[Var]) -> Result<Var> {
    validate_probs(tape.value(probs))?;
    let m = tape.value(probs).shape()[1];
    if outputs.len() != m {
        return Err(Error::shape(
            "blended_output",
            format!("{m} probabilities for {} branch outputs", outputs.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (i, out) in outputs.iter().enumerate() {
        let p = tape.column(probs, i)?;
        let term = tape.scale_rows(*out, p)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("no branch outputs".into()))
}

/// Mean absolute error over all elements.
pub fn image_loss<T: Real>(tape: &mut Tape<T>, output: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(output, target)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

/// `-sum_{i<j} |P_i - P_j|` per sample, averaged over the batch.
pub fn class_loss<T: Real>(tape: &mut Tape<T>, probs: Var) -> Result<Var> {
    validate_probs(tape.value(probs))?;
    let m = tape.value(probs).shape()[1];
    let cols = (0..m)
        .map(|i| tape.column(probs, i))
        .collect::<Result<Vec<_>>>()?;
    let mut acc: Option<Var> = None;
    for i in 0..m {
        for j in i + 1..m {
            let d = tape.sub(cols[i], cols[j])?;
            let a = tape.abs(d)?;
            acc = Some(match acc {
                None => a,
                Some(s) => tape.add(s, a)?,
            });
        }
    }
    let per_sample = match acc {
        Some(v) => v,
        // M == 1: no pairs, loss is identically zero
        None => tape.scale(cols[0], 0.0)?,
    };
    let mean = tape.mean(per_sample)?;
    tape.scale(mean, -1.0)
}

/// `sum_i | sum_b P_i(x_b) - B / M |` over a batch.
pub fn average_loss<T: Real>(tape: &mut Tape<T>, probs: Var, mode: BalanceMode) -> Result<Var> {
    validate_probs(tape.value(probs))?;
    let (b, m) = (tape.value(probs).shape()[0], tape.value(probs).shape()[1]);
    if mode == BalanceMode::Strict && b % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} is not divisible by {m} classes"
        )));
    }
    let target = b as f64 / m as f64;
    let mut acc: Option<Var> = None;
    for i in 0..m {
        let col = tape.column(probs, i)?;
        let mass = tape.sum(col)?;
        let dev = tape.shift(mass, -target)?;
        let a = tape.abs(dev)?;
        acc = Some(match acc {
            None => a,
            Some(s) => tape.add(s, a)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("no classes".into()))
}

/// `w1 * l1 + w2 * lc + w3 * la` on the tape.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, l1: Var, lc: Var, la: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let a = tape.scale(l1, w.w1)?;
    let b = tape.scale(lc, w.w2)?;
    let c = tape.scale(la, w.w3)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(tape: &mut Tape<f64>, rows: &[&[f64]]) -> Var {
        let m = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.constant(Tensor::new(vec![rows.len(), m], data).unwrap()).unwrap()
    }

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn class_loss_examples() {
        let mut t = Tape::new();
        let cases: [(&[f64], f64); 3] = [
            (&[1.0, 0.0, 0.0], -2.0),
            (&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.0),
            (&[0.5, 0.5, 0.0], -1.0),
        ];
        for (row, want) in cases {
            let p = probs(&mut t, &[row]);
            let l = class_loss(&mut t, p).unwrap();
            assert!((scalar(&t, l) - want).abs() < 1e-9, "{row:?}");
        }
    }

    #[test]
    fn average_loss_examples() {
        let mut t = Tape::new();
        let eye = probs(&mut t, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let l = average_loss(&mut t, eye, BalanceMode::Strict).unwrap();
        assert_eq!(scalar(&t, l), 0.0);

        let one: &[f64] = &[1.0, 0.0, 0.0];
        let same = probs(&mut t, &[one; 3]);
        let l = average_loss(&mut t, same, BalanceMode::Strict).unwrap();
        assert!((scalar(&t, l) - 4.0).abs() < 1e-9);

        let rows = vec![&[1.0, 0.0, 0.0][..]; 96];
        let big = probs(&mut t, &rows);
        let l = average_loss(&mut t, big, BalanceMode::Strict).unwrap();
        assert!((scalar(&t, l) - 128.0).abs() < 1e-9);
    }

    #[test]
    fn average_loss_divisibility() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]]);
        assert!(average_loss(&mut t, p, BalanceMode::Strict).is_err());
        let l = average_loss(&mut t, p, BalanceMode::Permissive).unwrap();
        // masses 0.5, 1.0, 0.5 against 2/3
        let want = (0.5f64 - 2.0 / 3.0).abs() * 2.0 + (1.0f64 - 2.0 / 3.0).abs();
        assert!((scalar(&t, l) - want).abs() < 1e-12);
    }

    #[test]
    fn image_loss_examples() {
        let mut t = Tape::<f64>::new();
        let gt = t.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64 * 0.1)).unwrap();
        let l = image_loss(&mut t, gt, gt).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let y = t.shift(gt, 0.5).unwrap();
        let l = image_loss(&mut t, y, gt).unwrap();
        assert!((scalar(&t, l) - 0.5).abs() < 1e-12);
        let a = t.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()).unwrap();
        let b = t.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        let l = image_loss(&mut t, a, b).unwrap();
        assert_eq!(scalar(&t, l), 1.0);
        let c = t.constant(Tensor::zeros(&[3])).unwrap();
        assert!(image_loss(&mut t, a, c).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((w.combine(0.01, -2.0, 0.0).unwrap() - 18.0).abs() < 1e-9);
        let recon = LossWeights { w2: 0.0, w3: 0.0, ..w };
        assert!((recon.combine(0.25, -2.0, 7.0).unwrap() - 500.0).abs() < 1e-9);
        assert_eq!(w.combine(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(w.combine(f64::NAN, 0.0, 0.0).is_err());

        let mut t = Tape::<f64>::new();
        let l1 = t.constant(Tensor::scalar(0.01)).unwrap();
        let lc = t.constant(Tensor::scalar(-2.0)).unwrap();
        let la = t.constant(Tensor::scalar(0.0)).unwrap();
        let total = total_loss(&mut t, l1, lc, la, &w).unwrap();
        assert!((scalar(&t, total) - 18.0).abs() < 1e-9);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { w1: 0.0, w2: 0.0, w3: 0.0 }.validate().is_err());
        assert!(LossWeights { w1: -1.0, w2: 0.0, w3: 0.0 }.validate().is_err());
    }

    #[test]
    fn blended_output_examples() {
        let mut t = Tape::<f64>::new();
        let outs: Vec<Var> = (0..3)
            .map(|j| {
                t.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| (i + 10 * j) as f64 * 0.37 - 1.1))
                    .unwrap()
            })
            .collect();
        let p = probs(&mut t, &[&[0.0, 1.0, 0.0]]);
        let y = blended_output(&mut t, p, &outs).unwrap();
        let bits = |v: Var, t: &Tape<f64>| t.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(y, &t), bits(outs[1], &t));

        let p = probs(&mut t, &[&[0.5, 0.5]]);
        let y = blended_output(&mut t, p, &outs[..2]).unwrap();
        for ((v, a), b) in t
            .value(y)
            .data()
            .iter()
            .zip(t.value(outs[0]).data())
            .zip(t.value(outs[1]).data())
        {
            assert!((v - (a + b) / 2.0).abs() < 1e-15);
        }
        assert!(blended_output(&mut t, p, &outs).is_err());
        let bad = probs(&mut t, &[&[0.7, 0.7]]);
        assert!(matches!(
            blended_output(&mut t, bad, &outs[..2]),
            Err(Error::InvalidDistribution(_))
        ));
    }
}
