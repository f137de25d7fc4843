//! The joint model: one-step reconstruction feeding the detection head on a
//! single tape, so the classification loss backpropagates into the denoiser.

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::detector::{Detector, DetectorConfig};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::loss::{ce_loss_var, noise_loss_var, LossConfig};
use crate::nn::{ParamBuilder, ParamSet};
use crate::real::Real;
use crate::tape::{Tape, Var};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Everything needed to rebuild the model deterministically.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub detector: DetectorConfig,
    pub loss: LossConfig,
}

impl ModelConfig {
    /// Desk-scale defaults for a given training resolution.
    pub fn for_input_side(input_side: usize) -> Result<Self> {
        Ok(ModelConfig {
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig {
                input_side,
                ..DenoiserConfig::default()
            },
            detector: DetectorConfig::for_input_side(input_side)?,
            loss: LossConfig::default(),
        })
    }

    pub fn input_side(&self) -> usize {
        self.denoiser.input_side
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.detector.validate()?;
        if self.denoiser.input_side != self.detector.input_side {
            return Err(Error::InvalidParameter(format!(
                "denoiser input side {} and detector input side {} disagree",
                self.denoiser.input_side, self.detector.input_side
            )));
        }
        if self.schedule.steps < 1 {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        Ok(())
    }
}

/// One recorded sample: losses and intermediate heads for inspection.
pub struct SampleGraph<T: Real> {
    pub tape: Tape<T>,
    pub eps_hat: Var,
    pub x0_hat: Var,
    pub prob: Var,
    pub fused: Var,
    pub l_noise: Var,
    pub l_ce: Var,
    pub l_total: Var,
}

/// Denoiser, detector, and schedule over one shared parameter set.
pub struct JointModel<T: Real> {
    pub config: ModelConfig,
    pub seed: u64,
    pub schedule: NoiseSchedule<T>,
    pub denoiser: Denoiser,
    pub detector: Detector,
    pub params: ParamSet<T>,
}

impl<T: Real> JointModel<T> {
    /// Deterministic initialization from `(config, seed)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        let mut params = ParamSet::new();
        let mut pb = ParamBuilder::new(&mut params, seed);
        let denoiser = Denoiser::build(&mut pb, "denoiser", config.denoiser)?;
        let detector = Detector::build(&mut pb, "detector", config.detector)?;
        Ok(JointModel {
            config,
            seed,
            schedule,
            denoiser,
            detector,
            params,
        })
    }

    fn check_image(&self, x0: &ArrayD<T>) -> Result<()> {
        let side = self.config.input_side();
        if x0.shape() != [3, side, side] {
            return Err(Error::ShapeMismatch(format!(
                "expected [3, {side}, {side}] image, got {:?}",
                x0.shape()
            )));
        }
        Ok(())
    }

    /// Record the full forward pass for one labeled sample.
    ///
    /// `detach_reconstruction` severs the gradient path from the detection
    /// loss into the denoiser while keeping the forward values identical.
    pub fn build_sample_graph(
        &self,
        x0: &ArrayD<T>,
        y: u8,
        t_index: usize,
        eps: &ArrayD<T>,
        detach_reconstruction: bool,
    ) -> Result<SampleGraph<T>> {
        self.check_image(x0)?;
        if y > 1 {
            return Err(Error::InvalidParameter(format!("label must be 0 or 1, got {y}")));
        }
        let x_t = self.schedule.forward_noise(x0, t_index, eps)?;

        let mut tape = Tape::new();
        let x_t_leaf = tape.constant(x_t);
        let eps_leaf = tape.constant(eps.clone());
        let eps_hat = self.denoiser.forward(&mut tape, &self.params, x_t_leaf, t_index);
        let x0_hat = self
            .schedule
            .one_step_denoise_var(&mut tape, x_t_leaf, t_index, eps_hat)?;
        // Reconstruction re-enters image range before the detector.
        let x0_hat = tape.clamp(x0_hat, -T::one(), T::one());
        let recon_in = if detach_reconstruction {
            tape.stop_grad(x0_hat)
        } else {
            x0_hat
        };
        let x0_leaf = tape.constant(x0.clone());
        let (prob, fused) = self
            .detector
            .forward(&mut tape, &self.params, x0_leaf, recon_in);
        let l_noise = noise_loss_var(&mut tape, eps_leaf, eps_hat, y, &self.config.loss);
        let l_ce = ce_loss_var(&mut tape, y, prob);
        let l_total = tape.add(l_noise, l_ce);
        Ok(SampleGraph {
            tape,
            eps_hat,
            x0_hat,
            prob,
            fused,
            l_noise,
            l_ce,
            l_total,
        })
    }

    /// Forward-only scoring; returns the probability and the fused feature
    /// vector that feeds the classifier.
    pub fn score(&self, x0: &ArrayD<T>, t_index: usize, eps: &ArrayD<T>) -> Result<(T, Vec<T>)> {
        let graph = self.build_sample_graph(x0, 0, t_index, eps, false)?;
        let prob = graph.tape.scalar(graph.prob);
        let fused = graph.tape.value(graph.fused).iter().cloned().collect();
        Ok((prob, fused))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{BackboneConfig, FusionMode, SpfmConfig};
    use crate::nn::{normal_array, randomize_params};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig {
                base_channels: 8,
                depth: 1,
                time_embed_dim: 16,
                input_side: 16,
            },
            detector: DetectorConfig {
                input_side: 16,
                backbone: BackboneConfig {
                    width: 8,
                    stages: 0,
                    out_channels: 16,
                },
                spfm: SpfmConfig {
                    sizes: [2, 4],
                    heads: 4,
                    fusion_mode: FusionMode::Spfm,
                },
            },
            loss: LossConfig::default(),
        }
    }

    fn sample(seed: u64) -> (ArrayD<f64>, ArrayD<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = normal_array::<f64, _>(&mut rng, &[3, 16, 16]).mapv(|v| v.clamp(-1.0, 1.0));
        let eps = normal_array::<f64, _>(&mut rng, &[3, 16, 16]);
        (x0, eps)
    }

    #[test]
    fn total_is_bitwise_sum_of_parts() {
        let model = JointModel::<f64>::init(tiny_model_config(), 1).unwrap();
        let (x0, eps) = sample(2);
        for y in [0u8, 1] {
            let g = model.build_sample_graph(&x0, y, 100, &eps, false).unwrap();
            let (ln, lc, lt) = (
                g.tape.scalar(g.l_noise),
                g.tape.scalar(g.l_ce),
                g.tape.scalar(g.l_total),
            );
            assert_eq!(lt, ln + lc);
            if y == 0 {
                assert_eq!(ln, 0.0, "nature sample must not incur noise loss");
            }
        }
    }

    #[test]
    fn detection_loss_reaches_denoiser_unless_detached() {
        let mut model = JointModel::<f64>::init(tiny_model_config(), 3).unwrap();
        randomize_params(&mut model.params, 4, 0.05);
        let (x0, eps) = sample(5);
        let t = 60;

        let denoiser_ids: Vec<_> = model
            .params
            .ids()
            .filter(|id| model.params.name(*id).starts_with("denoiser."))
            .collect();
        assert!(!denoiser_ids.is_empty());

        // Coupled: the classification loss alone reaches denoiser weights.
        let mut g = model.build_sample_graph(&x0, 1, t, &eps, false).unwrap();
        let grads = g.tape.backward(g.l_ce);
        let coupled_norm: f64 = denoiser_ids
            .iter()
            .filter_map(|id| grads.param(*id))
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(coupled_norm > 0.0, "no gradient reached the denoiser");

        // Detached: not a single denoiser weight receives gradient.
        let mut g = model.build_sample_graph(&x0, 1, t, &eps, true).unwrap();
        let grads = g.tape.backward(g.l_ce);
        for id in &denoiser_ids {
            assert!(
                grads.param(*id).is_none(),
                "denoiser weight {} still coupled",
                model.params.name(*id)
            );
        }

        // Forward values are identical either way.
        let ga = model.build_sample_graph(&x0, 1, t, &eps, false).unwrap();
        let gb = model.build_sample_graph(&x0, 1, t, &eps, true).unwrap();
        assert_eq!(ga.tape.scalar(ga.prob), gb.tape.scalar(gb.prob));
    }

    #[test]
    fn joint_gradients_match_finite_differences_through_both_networks() {
        let mut model = JointModel::<f64>::init(tiny_model_config(), 6).unwrap();
        randomize_params(&mut model.params, 7, 0.05);
        let (x0, eps) = sample(8);
        let t = 40;

        let objective = |model: &JointModel<f64>| {
            let g = model.build_sample_graph(&x0, 1, t, &eps, false).unwrap();
            g.tape.scalar(g.l_total)
        };

        let mut g = model.build_sample_graph(&x0, 1, t, &eps, false).unwrap();
        let grads = g.tape.backward(g.l_total);

        let ids: Vec<_> = model.params.ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 48 {
            let id = ids[rng.gen_range(0..ids.len())];
            let len = model.params.get(id).len();
            let k = rng.gen_range(0..len);
            let analytic = grads.param(id).map_or(0.0, |g| g.as_slice().unwrap()[k]);
            let base = model.params.get(id).clone();
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[k] += h;
            model.params.set(id, plus);
            let fp = objective(&model);
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[k] -= h;
            model.params.set(id, minus);
            let fm = objective(&model);
            model.params.set(id, base);
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs());
            if denom > 1e-8 {
                assert!(
                    ((analytic - numeric) / denom).abs() < 1e-3,
                    "{}[{k}]: {analytic} vs {numeric}",
                    model.params.name(id)
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn score_is_deterministic_and_in_range() {
        let model = JointModel::<f32>::init(tiny_model_config(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = normal_array::<f32, _>(&mut rng, &[3, 16, 16]).mapv(|v| v.clamp(-1.0, 1.0));
        let eps = normal_array::<f32, _>(&mut rng, &[3, 16, 16]);
        let (p1, f1) = model.score(&x0, 500, &eps).unwrap();
        let (p2, f2) = model.score(&x0, 500, &eps).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(f1, f2);
        assert!(p1 > 0.0 && p1 < 1.0);
        assert_eq!(f1.len(), 32);
    }

    #[test]
    fn mismatched_shapes_and_labels_are_rejected() {
        let model = JointModel::<f32>::init(tiny_model_config(), 12).unwrap();
        let bad = ArrayD::zeros(ndarray::IxDyn(&[3, 8, 8]));
        let eps = ArrayD::zeros(ndarray::IxDyn(&[3, 8, 8]));
        assert!(matches!(
            model.build_sample_graph(&bad, 1, 10, &eps, false),
            Err(Error::ShapeMismatch(_))
        ));
        let good = ArrayD::zeros(ndarray::IxDyn(&[3, 16, 16]));
        let eps = ArrayD::zeros(ndarray::IxDyn(&[3, 16, 16]));
        assert!(matches!(
            model.build_sample_graph(&good, 2, 10, &eps, false),
            Err(Error::InvalidParameter(_))
        ));
    }
}
