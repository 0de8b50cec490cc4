//! Per-sample losses for both heads and both annotation types, and the two
//! batch objectives built from them.
//!
//! Every loss exists twice: a plain function over slices, and a recorded
//! version in [`graph`] that maps a batch to a `[B]` vector of per-sample
//! values so that gradients can be routed per sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Shape {
            op,
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    Ok(())
}

/// Mean over classes of the binary cross entropy.
pub fn bce_multilabel(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len("bce_multilabel", pred.len(), target.len())?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Mean over pixels of `-log softmax(logits)[target]`.
///
/// `logits` is a flattened `pixels x classes` grid, pixel-major.
pub fn pixel_ce(logits: &[f64], target: &[usize], classes: usize) -> Result<f64> {
    check_len("pixel_ce", logits.len(), target.len() * classes)?;
    if let Some(bad) = target.iter().find(|&&c| c >= classes) {
        return Err(Error::invalid(format!(
            "pixel class {bad} out of range for {classes} classes"
        )));
    }
    let total: f64 = logits
        .chunks(classes)
        .zip(target)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let p = ((row[t] - max).exp() / z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -p.ln()
        })
        .sum();
    Ok(total / target.len() as f64)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("mse", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `D_KL(N(mu, exp(log_var)) || N(0, I))`, always non-negative.
pub fn kl_to_standard_normal(mu: &[f64], log_var: &[f64]) -> Result<f64> {
    check_len("kl_to_standard_normal", mu.len(), log_var.len())?;
    let s: f64 = mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum();
    Ok(-0.5 * s)
}

/// Per-sample loss terms for one mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub disc_task: Vec<f64>,
    pub gen_task: Vec<f64>,
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
}

impl BatchLossReport {
    pub fn new(disc_task: Vec<f64>, gen_task: Vec<f64>, recon: Vec<f64>, kl: Vec<f64>) -> Result<Self> {
        let n = disc_task.len();
        if n == 0 || gen_task.len() != n || recon.len() != n || kl.len() != n {
            return Err(Error::invalid(format!(
                "loss report arrays must share a non-zero length, got {}/{}/{}/{}",
                n,
                gen_task.len(),
                recon.len(),
                kl.len()
            )));
        }
        Ok(Self {
            disc_task,
            gen_task,
            recon,
            kl,
        })
    }

    pub fn len(&self) -> usize {
        self.disc_task.len()
    }

    pub fn is_empty(&self) -> bool {
        self.disc_task.is_empty()
    }

    /// Batch mean of reconstruction + generative task loss + KL.
    pub fn generative_objective(&self) -> f64 {
        let n = self.len() as f64;
        (0..self.len())
            .map(|i| self.recon[i] + self.gen_task[i] + self.kl[i])
            .sum::<f64>()
            / n
    }

    /// Mean discriminative task loss over `subset`; an empty subset contributes 0.
    pub fn discriminative_objective(&self, subset: &[usize]) -> f64 {
        if subset.is_empty() {
            return 0.0;
        }
        subset.iter().map(|&i| self.disc_task[i]).sum::<f64>() / subset.len() as f64
    }
}

/// Recorded per-sample losses. Inputs are `[B, ...]`; outputs are `[B]`.
pub mod graph {
    use super::PROB_CLAMP;
    use crate::error::{Error, Result};
    use crate::tensor::{Tape, Tensor, Var};

    fn check_same(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
        if tape.shape(a) != tape.shape(b) || tape.shape(a).len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: tape.shape(a).to_vec(),
                rhs: tape.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `probs` and `targets` are `[B, C]`; `targets` is data.
    pub fn bce_multilabel(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
        let y = tape.constant(targets);
        check_same(tape, "bce_multilabel", probs, y)?;
        let one_minus_y: Vec<f64> = targets.values().iter().map(|v| 1.0 - v).collect();
        let not_y = tape.constant(&Tensor::new(targets.shape().to_vec(), one_minus_y)?);

        let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let log_p = tape.log(p);
        let neg_p = tape.scale(p, -1.0);
        let q = tape.shift(neg_p, 1.0);
        let log_q = tape.log(q);
        let pos = tape.mul(y, log_p)?;
        let neg = tape.mul(not_y, log_q)?;
        let ll = tape.add(pos, neg)?;
        let per_sample = tape.mean_last(ll);
        Ok(tape.scale(per_sample, -1.0))
    }

    /// `logits` is `[B, P * C]` (pixel-major); `targets` holds `B * P` class indices.
    pub fn pixel_ce(tape: &mut Tape, logits: Var, targets: &[usize], classes: usize) -> Result<Var> {
        let shape = tape.shape(logits).to_vec();
        let (b, width) = match shape.as_slice() {
            [b, w] if w % classes == 0 && b * (w / classes) == targets.len() => (*b, *w),
            _ => {
                return Err(Error::Shape {
                    op: "pixel_ce",
                    lhs: shape,
                    rhs: vec![targets.len(), classes],
                })
            }
        };
        let mut onehot = vec![0.0; b * width];
        for (px, &c) in targets.iter().enumerate() {
            if c >= classes {
                return Err(Error::invalid(format!(
                    "pixel class {c} out of range for {classes} classes"
                )));
            }
            onehot[px * classes + c] = 1.0;
        }
        let pixels = width / classes;
        let mask = tape.constant(&Tensor::new(vec![b * pixels, classes], onehot)?);
        let flat = tape.reshape(logits, vec![b * pixels, classes])?;
        let sm = tape.softmax(flat, 1)?;
        let p = tape.clamp(sm, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let log_p = tape.log(p);
        let picked = tape.mul(log_p, mask)?;
        let per_pixel = tape.sum_last(picked);
        let grid = tape.reshape(per_pixel, vec![b, pixels])?;
        let per_sample = tape.mean_last(grid);
        Ok(tape.scale(per_sample, -1.0))
    }

    pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        check_same(tape, "mse", a, b)?;
        let d = tape.sub(a, b)?;
        let sq = tape.square(d);
        Ok(tape.mean_last(sq))
    }

    pub fn kl_to_standard_normal(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var> {
        check_same(tape, "kl_to_standard_normal", mu, log_var)?;
        let var = tape.exp(log_var);
        let mu2 = tape.square(mu);
        let a = tape.shift(log_var, 1.0);
        let b = tape.sub(a, mu2)?;
        let c = tape.sub(b, var)?;
        let s = tape.sum_last(c);
        Ok(tape.scale(s, -0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bce_values() {
        assert!((bce_multilabel(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - LN2).abs() < 1e-15);
        let perfect = bce_multilabel(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!((0.0..2e-7).contains(&perfect));
        // hand computation: -(ln .9 + ln .8 + ln .7) / 3
        let expected = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln()) / 3.0;
        let got = bce_multilabel(&[0.9, 0.2, 0.7], &[1.0, 0.0, 1.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!(bce_multilabel(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn pixel_ce_values() {
        let logits = vec![0.3; 4 * 4];
        let got = pixel_ce(&logits, &[0, 1, 2, 3], 4).unwrap();
        assert!((got - 4f64.ln()).abs() < 1e-14);
        assert!(pixel_ce(&logits, &[0, 1, 2, 4], 4).is_err());

        let mut prev = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let v = pixel_ce(&[margin, 0.0, 0.0], &[0], 3).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn pixel_ce_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets = [2usize, 0, 1, 1];
        let mut total = 0.0;
        for (px, &t) in targets.iter().enumerate() {
            let row = &logits[px * 3..px * 3 + 3];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += -(row[t].exp() / z).ln();
        }
        let got = pixel_ce(&logits, &targets, 3).unwrap();
        assert!((got - total / 4.0).abs() < 1e-13);
    }

    #[test]
    fn mse_values() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..7).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..7).map(|_| rng.random()).collect();
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mut acc = 0.0;
        for d in &diffs {
            acc += d * d;
        }
        assert!((mse(&a, &b).unwrap() - acc / 7.0).abs() < 1e-15);
        assert!(mse(&[1.0], &[]).is_err());
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_to_standard_normal(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(kl_to_standard_normal(&[1.0], &[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn objectives() {
        let r = BatchLossReport::new(vec![0.0], vec![0.0], vec![0.0], vec![0.0]).unwrap();
        assert_eq!(r.generative_objective(), 0.0);
        let r = BatchLossReport::new(vec![1.0], vec![0.5], vec![0.2], vec![0.1]).unwrap();
        assert!((r.generative_objective() - 0.8).abs() < 1e-15);

        let r = BatchLossReport::new(
            vec![1.0, 2.0, 3.0],
            vec![0.3, 0.1, 0.9],
            vec![0.2, 0.4, 0.6],
            vec![0.05, 0.0, 1.0],
        )
        .unwrap();
        assert_eq!(r.discriminative_objective(&[0, 1, 2]), 2.0);
        assert_eq!(r.discriminative_objective(&[1]), 2.0);
        assert_eq!(r.discriminative_objective(&[0, 2]), 2.0);
        assert_eq!(r.discriminative_objective(&[]), 0.0);
        let hand = ((0.2 + 0.3 + 0.05) + (0.4 + 0.1 + 0.0) + (0.6 + 0.9 + 1.0)) / 3.0;
        assert!((r.generative_objective() - hand).abs() < 1e-15);

        assert!(BatchLossReport::new(vec![1.0], vec![], vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn graph_losses_match_scalar_versions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, c) = (3, 4);
        let probs: Vec<f64> = (0..b * c).map(|_| rng.random_range(0.05..0.95)).collect();
        let ys: Vec<f64> = (0..b * c).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::matrix(b, c, probs.clone()).unwrap());
        let y = Tensor::matrix(b, c, ys.clone()).unwrap();
        let l = graph::bce_multilabel(&mut tape, p, &y).unwrap();
        for i in 0..b {
            let want = bce_multilabel(&probs[i * c..(i + 1) * c], &ys[i * c..(i + 1) * c]).unwrap();
            assert!((tape.value(l)[i] - want).abs() < 1e-14);
        }

        let logits: Vec<f64> = (0..2 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = vec![0, 1, 2, 2, 1, 1, 0, 2];
        let lv = tape.constant(&Tensor::matrix(2, 12, logits.clone()).unwrap());
        let l = graph::pixel_ce(&mut tape, lv, &targets, 3).unwrap();
        for i in 0..2 {
            let want = pixel_ce(&logits[i * 12..(i + 1) * 12], &targets[i * 4..(i + 1) * 4], 3).unwrap();
            assert!((tape.value(l)[i] - want).abs() < 1e-14);
        }

        let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lvar: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = tape.constant(&Tensor::matrix(2, 3, mu.clone()).unwrap());
        let v = tape.constant(&Tensor::matrix(2, 3, lvar.clone()).unwrap());
        let kl = graph::kl_to_standard_normal(&mut tape, m, v).unwrap();
        let se = graph::mse(&mut tape, m, v).unwrap();
        for i in 0..2 {
            let r = i * 3..(i + 1) * 3;
            let want = kl_to_standard_normal(&mu[r.clone()], &lvar[r.clone()]).unwrap();
            assert!((tape.value(kl)[i] - want).abs() < 1e-14);
            let want = mse(&mu[r.clone()], &lvar[r]).unwrap();
            assert!((tape.value(se)[i] - want).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            pairs in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..8)
        ) {
            let (mu, lv): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let kl = kl_to_standard_normal(&mu, &lv).unwrap();
            prop_assert!(kl >= -1e-12);
        }

        #[test]
        fn batch_losses_are_permutation_equivariant(
            rows in proptest::collection::vec(proptest::collection::vec(0.01f64..0.99, 3), 2..6),
            seed in 0u64..1000,
        ) {
            let b = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let targets: Vec<f64> = flat.iter().map(|p| if *p > 0.5 { 1.0 } else { 0.0 }).collect();
            let mut perm: Vec<usize> = (0..b).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..b).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
            let permuted_t: Vec<f64> = perm.iter().flat_map(|&i| targets[i * 3..i * 3 + 3].to_vec()).collect();

            let mut tape = Tape::new();
            let p = tape.constant(&Tensor::matrix(b, 3, flat).unwrap());
            let a = graph::bce_multilabel(&mut tape, p, &Tensor::matrix(b, 3, targets).unwrap()).unwrap();
            let q = tape.constant(&Tensor::matrix(b, 3, permuted).unwrap());
            let bq = graph::bce_multilabel(&mut tape, q, &Tensor::matrix(b, 3, permuted_t).unwrap()).unwrap();
            let kl_a = graph::kl_to_standard_normal(&mut tape, p, p).unwrap();
            let kl_b = graph::kl_to_standard_normal(&mut tape, q, q).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(tape.value(bq)[k], tape.value(a)[i]);
                prop_assert_eq!(tape.value(kl_b)[k], tape.value(kl_a)[i]);
            }
        }
    }
}
