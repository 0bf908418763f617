//! Training objectives: identity (L1) and restoration (per-image RMS) terms,
//! the adversarial pair, and the critic's gradient penalty evaluated at
//! random interpolates between real and generated batches.
//!
//! Norms are reduced to per-pixel means so magnitudes do not depend on the
//! image resolution.

use autograd::{Tape, Var};
use ndarray::{Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss component: {0}")]
    NonFinite(String),
}

/// Weights of the composite objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_rec: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id: 10.0,
            lambda_rec: 10.0,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda_id < 0.0 || self.lambda_rec < 0.0 || self.lambda_gp < 0.0 {
            return Err(LossError::NonFinite("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Every loss term of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id: f64,
    pub rec: f64,
    pub g_adv: f64,
    pub g_total: f64,
    pub d_adv: f64,
    pub gp: f64,
    pub d_total: f64,
}

impl LossBreakdown {
    pub fn zeros() -> Self {
        Self {
            id: 0.0,
            rec: 0.0,
            g_adv: 0.0,
            g_total: 0.0,
            d_adv: 0.0,
            gp: 0.0,
            d_total: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.id,
            self.rec,
            self.g_adv,
            self.g_total,
            self.d_adv,
            self.gp,
            self.d_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn require_same_shape(tape: &Tape, a: Var, b: Var) -> Result<(), LossError> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(LossError::ShapeMismatch(format!("{sa:?} vs {sb:?}")));
    }
    if sa.len() != 4 || sa[0] == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(())
}

/// Mean absolute difference: batch mean of the per-image mean |x' - x|.
pub fn identity_loss(tape: &Tape, x_prime: Var, x: Var) -> Result<Var, LossError> {
    require_same_shape(tape, x_prime, x)?;
    Ok(tape.mean_all(tape.abs(tape.sub(x_prime, x))))
}

/// Batch mean of the per-image root-mean-square difference between the
/// restored pseudo-anomaly and its clean source. Element `i` of both batches
/// must refer to the same underlying source image.
pub fn restoration_loss(tape: &Tape, x_restored: Var, x_source: Var) -> Result<Var, LossError> {
    require_same_shape(tape, x_restored, x_source)?;
    let diff = tape.sub(x_restored, x_source);
    let per_image = tape.sqrt(tape.mean_chw(tape.mul(diff, diff)));
    Ok(tape.mean_all(per_image))
}

/// Generator adversarial term: negated mean critic score of the restored
/// stream, `-E[D(x')]`.
pub fn generator_adv_loss(tape: &Tape, scores: Var) -> Result<Var, LossError> {
    if tape.shape(scores).iter().product::<usize>() == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(tape.neg(tape.mean_all(scores)))
}

/// Per-sample random convex combination of a real and a generated batch:
/// `x_hat = eps * real + (1 - eps) * fake`, one uniform `eps` per sample.
pub fn interpolate_xhat(
    real: &Array4<f64>,
    fake: &Array4<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f64>, LossError> {
    if real.shape() != fake.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    if real.shape()[0] == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut out = fake.clone();
    for (bi, mut sample) in out.axis_iter_mut(Axis(0)).enumerate() {
        let eps: f64 = rng.random_range(0.0..=1.0);
        let real_b = real.index_axis(Axis(0), bi);
        sample.zip_mut_with(&real_b, |f, &r| *f = eps * r + (1.0 - eps) * *f);
    }
    Ok(out)
}

/// WGAN gradient penalty: `mean_b (||grad_{x_hat_b} D(x_hat_b)||_2 - 1)^2`.
///
/// `score_fn` builds the per-sample critic scores `[B]` for a given input
/// variable; the penalty differentiates through it, so the returned variable
/// remains differentiable with respect to the critic parameters.
pub fn gradient_penalty(
    tape: &Tape,
    x_hat: &Array4<f64>,
    score_fn: impl FnOnce(&Tape, Var) -> Result<Var, LossError>,
) -> Result<Var, LossError> {
    if x_hat.shape()[0] == 0 {
        return Err(LossError::EmptyBatch);
    }
    let xh = tape.leaf_grad(x_hat.clone().into_dyn());
    let scores = score_fn(tape, xh)?;
    let total = tape.sum_all(scores);
    // Per-sample input gradients; a score independent of the input means a
    // zero gradient field.
    let grad = match tape.grad(total, &[xh])[0] {
        Some(g) => g,
        None => tape.leaf_nograd(ndarray::ArrayD::zeros(ndarray::IxDyn(x_hat.shape()))),
    };
    let norms = tape.sqrt(tape.sum_chw(tape.mul(grad, grad)));
    let dev = tape.add_scalar(norms, -1.0);
    Ok(tape.mean_all(tape.mul(dev, dev)))
}

/// Critic objective pieces; `d_total = d_adv + lambda_gp * gp` with
/// `d_adv = E[D(fake)] - E[D(real)]`.
pub struct CriticLossParts {
    pub d_adv: Var,
    pub gp: Var,
    pub d_total: Var,
}

/// Assemble the critic loss from already-computed score vectors plus a
/// penalty evaluated at the interpolates.
pub fn discriminator_loss(
    tape: &Tape,
    scores_real: Var,
    scores_fake: Var,
    x_real: &Array4<f64>,
    x_fake: &Array4<f64>,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
    score_fn: impl FnOnce(&Tape, Var) -> Result<Var, LossError>,
) -> Result<CriticLossParts, LossError> {
    weights.validate()?;
    let d_adv = tape.sub(tape.mean_all(scores_fake), tape.mean_all(scores_real));
    let x_hat = interpolate_xhat(x_real, x_fake, rng)?;
    let gp = gradient_penalty(tape, &x_hat, score_fn)?;
    let d_total = tape.add(d_adv, tape.scale(gp, weights.lambda_gp));
    Ok(CriticLossParts { d_adv, gp, d_total })
}

/// `L_G = L_adv + lambda_id * L_id + lambda_rec * L_rec` on plain values.
pub fn generator_total(id: f64, rec: f64, g_adv: f64, weights: &LossWeights) -> f64 {
    g_adv + weights.lambda_id * id + weights.lambda_rec * rec
}

/// Tape version of [`generator_total`].
pub fn generator_total_var(tape: &Tape, id: Var, rec: Var, g_adv: Var, weights: &LossWeights) -> Var {
    tape.add(
        g_adv,
        tape.add(tape.scale(id, weights.lambda_id), tape.scale(rec, weights.lambda_rec)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::{Array1, Array4};
    use rand::Rng;

    fn rand_batch(seed: u64, b: usize, s: usize) -> Array4<f64> {
        let mut rng = derive_rng(seed, "loss_test", &[]);
        Array4::from_shape_fn((b, 1, s, s), |_| rng.random_range(-1.0..1.0))
    }

    fn leaf(tape: &Tape, a: &Array4<f64>) -> Var {
        tape.leaf_nograd(a.clone().into_dyn())
    }

    #[test]
    fn identity_loss_cases() {
        let tape = Tape::new();
        let x = rand_batch(1, 3, 6);
        let xv = leaf(&tape, &x);
        assert_eq!(tape.scalar(identity_loss(&tape, xv, xv).unwrap()), 0.0);

        let shifted = leaf(&tape, &x.mapv(|v| v + 0.5));
        let l = tape.scalar(identity_loss(&tape, shifted, xv).unwrap());
        assert!((l - 0.5).abs() < 1e-12);

        // brute-force oracle on a random pair
        let y = rand_batch(2, 3, 6);
        let oracle: f64 =
            x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        let yv = leaf(&tape, &y);
        let l = tape.scalar(identity_loss(&tape, yv, xv).unwrap());
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn restoration_loss_cases() {
        let tape = Tape::new();
        let x = rand_batch(3, 2, 5);
        let xv = leaf(&tape, &x);
        assert_eq!(tape.scalar(restoration_loss(&tape, xv, xv).unwrap()), 0.0);

        let shifted = leaf(&tape, &x.mapv(|v| v - 0.25));
        let l = tape.scalar(restoration_loss(&tape, shifted, xv).unwrap());
        assert!((l - 0.25).abs() < 1e-12, "rms of constant offset");

        // per-image RMS oracle
        let y = rand_batch(4, 2, 5);
        let mut oracle = 0.0;
        for b in 0..2 {
            let mut acc = 0.0;
            for h in 0..5 {
                for w in 0..5 {
                    let d = y[[b, 0, h, w]] - x[[b, 0, h, w]];
                    acc += d * d;
                }
            }
            oracle += (acc / 25.0).sqrt();
        }
        oracle /= 2.0;
        let yv = leaf(&tape, &y);
        let l = tape.scalar(restoration_loss(&tape, yv, xv).unwrap());
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn restoration_loss_is_pairing_sensitive() {
        let tape = Tape::new();
        let x = rand_batch(5, 4, 5);
        let y = rand_batch(6, 4, 5);
        let mut perm = Array4::zeros((4, 1, 5, 5));
        for b in 0..4 {
            perm.index_axis_mut(Axis(0), b)
                .assign(&y.index_axis(Axis(0), (b + 1) % 4));
        }
        let paired = tape.scalar(restoration_loss(&tape, leaf(&tape, &y), leaf(&tape, &x)).unwrap());
        let shuffled =
            tape.scalar(restoration_loss(&tape, leaf(&tape, &perm), leaf(&tape, &x)).unwrap());
        assert!((paired - shuffled).abs() > 1e-9, "permuting pairs must change the loss");
    }

    #[test]
    fn adv_loss_arithmetic() {
        let tape = Tape::new();
        let s = tape.leaf_nograd(Array1::from_vec(vec![1.0, 1.0]).into_dyn());
        assert!((tape.scalar(generator_adv_loss(&tape, s).unwrap()) + 1.0).abs() < 1e-15);
        let s = tape.leaf_nograd(Array1::from_vec(vec![0.0]).into_dyn());
        assert_eq!(tape.scalar(generator_adv_loss(&tape, s).unwrap()), 0.0);
        let s = tape.leaf_nograd(Array1::from_vec(vec![2.0, -4.0]).into_dyn());
        assert!((tape.scalar(generator_adv_loss(&tape, s).unwrap()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn interpolation_endpoints_and_degenerate_case() {
        let real = rand_batch(7, 2, 4);
        let fake = rand_batch(8, 2, 4);
        // identical inputs: any eps gives the same thing back
        let mut rng = derive_rng(0, "eps", &[]);
        let same = interpolate_xhat(&real, &real, &mut rng).unwrap();
        assert_eq!(same, real);
        // mixture stays between the two batches elementwise
        let mut rng = derive_rng(1, "eps", &[]);
        let mix = interpolate_xhat(&real, &fake, &mut rng).unwrap();
        for ((m, r), f) in mix.iter().zip(real.iter()).zip(fake.iter()) {
            let (lo, hi) = if r < f { (r, f) } else { (f, r) };
            assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
        }
    }

    /// Linear critic `D(x) = <w, x>`: the input gradient is `w`, so the
    /// penalty is `(||w|| - 1)^2` exactly.
    fn linear_penalty(weight_norm: f64) -> f64 {
        let b = 3usize;
        let s = 4usize;
        let tape = Tape::new();
        let n = (s * s) as f64;
        // constant weight image of the requested Euclidean norm, repeated per sample
        let mut w_full = Array4::zeros((b, 1, s, s));
        w_full.fill(weight_norm / n.sqrt());
        let wv = tape.leaf_nograd(w_full.into_dyn());
        let x_hat = rand_batch(9, b, s);
        let pen = gradient_penalty(&tape, &x_hat, |t, xh| Ok(t.sum_chw(t.mul(xh, wv))))
            .unwrap();
        tape.scalar(pen)
    }

    #[test]
    fn gradient_penalty_analytic_cases() {
        assert!(linear_penalty(1.0).abs() < 1e-9, "unit-norm linear critic");
        assert!((linear_penalty(3.0) - 4.0).abs() < 1e-9, "norm-3 linear critic");

        // constant critic: zero gradient, penalty (0 - 1)^2 = 1
        let tape = Tape::new();
        let x_hat = rand_batch(10, 2, 4);
        let pen = gradient_penalty(&tape, &x_hat, |t, _xh| {
            Ok(t.leaf_nograd(Array1::from_vec(vec![5.0, 5.0]).into_dyn()))
        })
        .unwrap();
        assert!((tape.scalar(pen) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generator_total_arithmetic() {
        let w = LossWeights {
            lambda_id: 1.0,
            lambda_rec: 1.0,
            lambda_gp: 10.0,
        };
        assert_eq!(generator_total(1.0, 1.0, 0.0, &w), 2.0);
        assert_eq!(generator_total(0.0, 0.0, 0.0, &w), 0.0);
        let w10 = LossWeights {
            lambda_id: 10.0,
            lambda_rec: 10.0,
            lambda_gp: 10.0,
        };
        assert_eq!(generator_total(2.0, 3.0, -1.0, &w10), 49.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::new();
        let a = leaf(&tape, &rand_batch(11, 2, 4));
        let b = leaf(&tape, &rand_batch(12, 2, 5));
        assert!(matches!(
            identity_loss(&tape, a, b),
            Err(LossError::ShapeMismatch(_))
        ));
    }
}
