//! Masked noise loss, cross-entropy, and their unweighted sum.
//!
//! The noise loss is gated by the label so that, by default, only inpainted
//! samples teach the reconstruction branch; the gate is configurable for the
//! target-selection ablations (none / all / nature-only / inpainting-only).

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Which labels contribute to the noise loss.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    None,
    All,
    NatureOnly,
    InpaintingOnly,
}

/// Residual normalization: the literal half squared L2 norm scales with the
/// image size, the per-element mean keeps the loss resolution-invariant.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NoiseNormalization {
    LiteralHalfSqL2,
    PerElementMean,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub noise_target: NoiseTarget,
    pub normalization: NoiseNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            noise_target: NoiseTarget::InpaintingOnly,
            normalization: NoiseNormalization::PerElementMean,
        }
    }
}

/// Probability clamp bound preventing log(0).
pub const PROB_CLAMP: f64 = 1e-7;

/// Label gate for the noise loss.
pub fn noise_multiplier(target: NoiseTarget, y: u8) -> f64 {
    match target {
        NoiseTarget::None => 0.0,
        NoiseTarget::All => 1.0,
        NoiseTarget::NatureOnly => {
            if y == 0 {
                1.0
            } else {
                0.0
            }
        }
        NoiseTarget::InpaintingOnly => {
            if y == 1 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::InvalidParameter(format!("label must be 0 or 1, got {y}")));
    }
    Ok(())
}

/// Per-sample noise loss between true and predicted noise.
pub fn noise_loss<T: Real>(
    eps: &ArrayD<T>,
    eps_hat: &ArrayD<T>,
    y: u8,
    cfg: &LossConfig,
) -> Result<T> {
    check_label(y)?;
    if eps.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "eps {:?} vs eps_hat {:?}",
            eps.shape(),
            eps_hat.shape()
        )));
    }
    if noise_multiplier(cfg.noise_target, y) == 0.0 {
        return Ok(T::zero());
    }
    let sum_sq: T = eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(e, eh)| {
            let d = *e - *eh;
            d * d
        })
        .sum();
    let half = T::from_f(0.5);
    Ok(match cfg.normalization {
        NoiseNormalization::LiteralHalfSqL2 => sum_sq * half,
        NoiseNormalization::PerElementMean => sum_sq / T::from_f(eps.len() as f64) * half,
    })
}

/// Binary cross-entropy on a clamped probability.
pub fn ce_loss<T: Real>(y: u8, y_prob: T) -> Result<T> {
    check_label(y)?;
    let lo = T::from_f(PROB_CLAMP);
    let hi = T::one() - lo;
    let p = y_prob.max(lo).min(hi);
    Ok(if y == 1 { -p.ln() } else { -(T::one() - p).ln() })
}

/// Unweighted sum of the two losses.
pub fn total_loss<T: Real>(l_noise: T, l_ce: T) -> Result<T> {
    if !l_noise.is_finite() || !l_ce.is_finite() {
        return Err(Error::Numeric(format!(
            "loss terms must be finite, got noise={l_noise} ce={l_ce}"
        )));
    }
    Ok(l_noise + l_ce)
}

/// Tape version of `noise_loss`; a zero gate yields a constant zero node.
pub fn noise_loss_var<T: Real>(
    tape: &mut Tape<T>,
    eps: Var,
    eps_hat: Var,
    y: u8,
    cfg: &LossConfig,
) -> Var {
    if noise_multiplier(cfg.noise_target, y) == 0.0 {
        return tape.constant(ArrayD::zeros(IxDyn(&[1])));
    }
    let diff = tape.sub(eps, eps_hat);
    let sq = tape.mul(diff, diff);
    let half = T::from_f(0.5);
    match cfg.normalization {
        NoiseNormalization::LiteralHalfSqL2 => {
            let s = tape.sum_all(sq);
            tape.scale(s, half)
        }
        NoiseNormalization::PerElementMean => {
            let m = tape.mean_all(sq);
            tape.scale(m, half)
        }
    }
}

/// Tape version of `ce_loss` on a `[1]` probability node.
pub fn ce_loss_var<T: Real>(tape: &mut Tape<T>, y: u8, prob: Var) -> Var {
    let lo = T::from_f(PROB_CLAMP);
    let hi = T::one() - lo;
    let p = tape.clamp(prob, lo, hi);
    if y == 1 {
        let lp = tape.ln(p);
        tape.scale(lp, -T::one())
    } else {
        let neg = tape.scale(p, -T::one());
        let one_minus = tape.add_scalar(neg, T::one());
        let lp = tape.ln(one_minus);
        tape.scale(lp, -T::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_array;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(n: usize) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[n]), 1.0)
    }

    fn zeros(n: usize) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(&[n]))
    }

    #[test]
    fn nature_sample_contributes_nothing_under_default_target() {
        let cfg = LossConfig::default();
        let l = noise_loss(&ones(4), &zeros(4), 0, &cfg).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn zero_residual_gives_zero_loss() {
        let cfg = LossConfig::default();
        let e = ones(4);
        assert_eq!(noise_loss(&e, &e, 1, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn unit_residual_examples() {
        let mean_cfg = LossConfig::default();
        assert_eq!(noise_loss(&ones(4), &zeros(4), 1, &mean_cfg).unwrap(), 0.5);
        let literal_cfg = LossConfig {
            normalization: NoiseNormalization::LiteralHalfSqL2,
            ..LossConfig::default()
        };
        assert_eq!(noise_loss(&ones(4), &zeros(4), 1, &literal_cfg).unwrap(), 2.0);
    }

    #[test]
    fn ablation_multipliers_cover_the_grid() {
        for (target, y, want) in [
            (NoiseTarget::None, 0, 0.0),
            (NoiseTarget::None, 1, 0.0),
            (NoiseTarget::All, 0, 1.0),
            (NoiseTarget::All, 1, 1.0),
            (NoiseTarget::NatureOnly, 0, 1.0),
            (NoiseTarget::NatureOnly, 1, 0.0),
            (NoiseTarget::InpaintingOnly, 0, 0.0),
            (NoiseTarget::InpaintingOnly, 1, 1.0),
        ] {
            assert_eq!(noise_multiplier(target, y), want, "{target:?}/{y}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let near_perfect: f64 = ce_loss(1, 1.0 - 1e-7).unwrap();
        assert!((near_perfect - 1e-7).abs() < 1e-9);
        assert!((ce_loss(1, 0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce_loss(0, 0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_extreme_probabilities() {
        assert!(ce_loss(1, 0.0f64).unwrap().is_finite());
        assert!(ce_loss(0, 1.0f64).unwrap().is_finite());
    }

    #[test]
    fn total_is_exact_commutative_sum() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(0.5, 0.693147).unwrap(), 1.193147);
        let (a, b) = (0.12345678901234, 9.87654321e-3);
        assert_eq!(total_loss(a, b).unwrap(), total_loss(b, a).unwrap());
        assert_eq!(total_loss(a, b).unwrap(), a + b);
        assert!(matches!(
            total_loss(f64::NAN, 0.0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            total_loss(0.0, f64::INFINITY),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn losses_are_nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let e = normal_array::<f64, _>(&mut rng, &[12]);
            let eh = normal_array::<f64, _>(&mut rng, &[12]);
            assert!(noise_loss(&e, &eh, 1, &cfg).unwrap() >= 0.0);
            let p = 0.5 + 0.499 * f64::standard_normal(&mut rng).tanh();
            assert!(ce_loss(0, p).unwrap() >= 0.0);
            assert!(ce_loss(1, p).unwrap() >= 0.0);
        }
    }

    #[test]
    fn tape_losses_match_pure_versions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for cfg in [
            LossConfig::default(),
            LossConfig {
                normalization: NoiseNormalization::LiteralHalfSqL2,
                ..LossConfig::default()
            },
        ] {
            let e = normal_array::<f64, _>(&mut rng, &[3, 4, 4]);
            let eh = normal_array::<f64, _>(&mut rng, &[3, 4, 4]);
            for y in [0u8, 1] {
                let pure = noise_loss(&e, &eh, y, &cfg).unwrap();
                let mut tape = Tape::new();
                let ev = tape.constant(e.clone());
                let ehv = tape.constant(eh.clone());
                let l = noise_loss_var(&mut tape, ev, ehv, y, &cfg);
                assert_eq!(tape.scalar(l), pure);
            }
        }
        for y in [0u8, 1] {
            for p in [0.001, 0.25, 0.5, 0.93, 0.9999999999] {
                let pure = ce_loss(y, p).unwrap();
                let mut tape = Tape::new();
                let pv = tape.constant(ArrayD::from_elem(IxDyn(&[1]), p));
                let l = ce_loss_var(&mut tape, y, pv);
                assert_eq!(tape.scalar(l), pure);
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = normal_array::<f64, _>(&mut rng, &[10]);
        let eh = normal_array::<f64, _>(&mut rng, &[10]);
        let cfg = LossConfig::default();
        let h = 1e-6;

        // Noise loss w.r.t. eps_hat.
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let ehv = tape.constant(eh.clone());
        let l = noise_loss_var(&mut tape, ev, ehv, 1, &cfg);
        let grads = tape.backward(l);
        let analytic = grads.of(ehv).unwrap().clone();
        for k in 0..10 {
            let mut plus = eh.clone();
            plus[[k]] += h;
            let mut minus = eh.clone();
            minus[[k]] -= h;
            let numeric = (noise_loss(&e, &plus, 1, &cfg).unwrap()
                - noise_loss(&e, &minus, 1, &cfg).unwrap())
                / (2.0 * h);
            let a = analytic[[k]];
            assert!(
                ((a - numeric) / numeric.abs().max(1e-9)).abs() < 1e-6,
                "k={k}: {a} vs {numeric}"
            );
        }

        // Cross-entropy w.r.t. the probability.
        for y in [0u8, 1] {
            let p0 = 0.3;
            let mut tape = Tape::new();
            let pv = tape.constant(ArrayD::from_elem(IxDyn(&[1]), p0));
            let l = ce_loss_var(&mut tape, y, pv);
            let grads = tape.backward(l);
            let a = grads.of(pv).unwrap()[[0]];
            let numeric =
                (ce_loss(y, p0 + h).unwrap() - ce_loss(y, p0 - h).unwrap()) / (2.0 * h);
            assert!(
                ((a - numeric) / numeric.abs()).abs() < 1e-6,
                "y={y}: {a} vs {numeric}"
            );
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let cfg = LossConfig::default();
        assert!(matches!(
            noise_loss(&ones(3), &ones(4), 1, &cfg),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            noise_loss(&ones(3), &ones(3), 2, &cfg),
            Err(Error::InvalidParameter(_))
        ));
    }
}
