//! Patch critic: a stack of stride-2 convolutions with leaky activations and
//! a linear one-channel head, producing an unbounded score map whose mean is
//! the per-image realness score. No normalization layers — per-sample input
//! gradients must stay uncoupled across the batch for the gradient penalty.

use autograd::{receptive_field, Tape, Var};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::nn::{
    conv_layer, init_conv_weight, load_params, save_params, zeros, BoundParams, ModelError,
    ParamSet,
};
use crate::rng::derive_rng;

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub input_size: usize,
    pub channels_in: usize,
    /// Total conv layers: `num_layers - 1` stride-2 stages plus the linear head.
    pub num_layers: usize,
    pub base_width: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels_in: 1,
            num_layers: 4,
            base_width: 64,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::ConfigInvalid(msg));
        if self.num_layers < 2 {
            return err("critic needs at least two layers".into());
        }
        if self.base_width < 1 {
            return err("base_width must be >= 1".into());
        }
        if self.channels_in != 1 && self.channels_in != 3 {
            return err(format!("channels_in {} unsupported", self.channels_in));
        }
        // every stride-2 stage halves the (even) spatial extent; the final
        // k=4 s=1 p=1 layer needs at least 2 pixels
        let mut res = self.input_size;
        for _ in 0..self.num_layers - 1 {
            if res < 4 || res % 2 != 0 {
                return err(format!(
                    "input_size {} too small or odd for {} stride-2 stages",
                    self.input_size,
                    self.num_layers - 1
                ));
            }
            res /= 2;
        }
        if res < 2 {
            return err("score map would be empty".into());
        }
        Ok(())
    }

    pub fn width(&self, layer: usize) -> usize {
        self.base_width << layer
    }

    /// Receptive field of one score-map cell, in input pixels.
    pub fn receptive_field(&self) -> usize {
        let mut stack = vec![(4usize, 2usize); self.num_layers - 1];
        stack.push((4, 1));
        receptive_field(&stack)
    }
}

/// Output of a critic pass.
pub struct CriticForward {
    /// Per-image score: mean of the patch map. `[B]`.
    pub scores: Var,
    /// Raw patch score map, `[B, 1, h, w]`.
    pub score_map: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub config: CriticConfig,
    pub params: ParamSet,
}

impl Critic {
    pub fn init(config: CriticConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = derive_rng(seed, "critic_init", &[]);
        let mut p = ParamSet::new();
        let mut cin = config.channels_in;
        for layer in 0..config.num_layers - 1 {
            let cout = config.width(layer);
            p.insert(&format!("c{layer}.w"), init_conv_weight(&mut rng, cout, cin, 4, 4));
            p.insert(&format!("c{layer}.b"), zeros(&[cout]));
            cin = cout;
        }
        let last = config.num_layers - 1;
        p.insert(&format!("c{last}.w"), init_conv_weight(&mut rng, 1, cin, 4, 4));
        p.insert(&format!("c{last}.b"), zeros(&[1]));
        Ok(Self { config, params: p })
    }

    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> BoundParams {
        self.params.bind(tape, requires_grad)
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.channels_in || shape[2] != s || shape[3] != s
        {
            return Err(ModelError::ShapeMismatch(format!(
                "critic expects [B, {}, {s}, {s}], got {shape:?}",
                self.config.channels_in
            )));
        }
        Ok(())
    }

    /// Score a batch. Finite, unbounded, differentiable with respect to the
    /// input — there is no output nonlinearity.
    pub fn forward(
        &self,
        tape: &Tape,
        params: &BoundParams,
        x: Var,
    ) -> Result<CriticForward, ModelError> {
        self.check_input(&tape.shape(x))?;
        let mut h = x;
        for layer in 0..self.config.num_layers - 1 {
            h = tape.leaky_relu(conv_layer(tape, params, &format!("c{layer}"), h, 2, 1), LEAK);
        }
        let last = self.config.num_layers - 1;
        let score_map = conv_layer(tape, params, &format!("c{last}"), h, 1, 1);
        let scores = tape.mean_chw(score_map);
        Ok(CriticForward { scores, score_map })
    }

    /// Plain-array scoring convenience.
    pub fn criticize(&self, batch: &Array4<f64>) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.leaf_nograd(batch.clone().into_dyn());
        let fwd = self.forward(&tape, &params, x)?;
        Ok(tape.value(fwd.scores).iter().copied().collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        save_params(path, &self.config, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let (config, params) = load_params(path)?;
        let config: CriticConfig =
            serde_json::from_value(config).map_err(|e| ModelError::CheckpointCorrupt {
                path: path.to_path_buf(),
                msg: format!("critic config: {e}"),
            })?;
        let fresh = Critic::init(config.clone(), 0)?;
        crate::generator::check_same_blocks("critic", &fresh.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn load_expecting(
        path: &std::path::Path,
        expected: &CriticConfig,
    ) -> Result<Self, ModelError> {
        let loaded = Self::load(path)?;
        if &loaded.config != expected {
            return Err(ModelError::CheckpointConfigMismatch(format!(
                "stored critic config {:?} != expected {:?}",
                loaded.config, expected
            )));
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn tiny() -> CriticConfig {
        CriticConfig {
            input_size: 8,
            num_layers: 2,
            base_width: 4,
            ..CriticConfig::default()
        }
    }

    fn rand_batch(seed: u64, b: usize, s: usize) -> Array4<f64> {
        let mut rng = derive_rng(seed, "critic_test", &[]);
        Array4::from_shape_fn((b, 1, s, s), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_parameters_score_zero() {
        let mut critic = Critic::init(tiny(), 1).unwrap();
        for (_, block) in critic.params.iter_mut() {
            block.fill(0.0);
        }
        let scores = critic.criticize(&rand_batch(2, 3, 8)).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn final_layer_is_linear_in_its_weights() {
        let mut critic = Critic::init(tiny(), 3).unwrap();
        let batch = rand_batch(4, 2, 8);
        let base = critic.criticize(&batch).unwrap();
        let last = critic.config.num_layers - 1;
        critic.params.get_mut(&format!("c{last}.w")).mapv_inplace(|v| 2.0 * v);
        critic.params.get_mut(&format!("c{last}.b")).mapv_inplace(|v| 2.0 * v);
        let doubled = critic.criticize(&batch).unwrap();
        for (a, b) in base.iter().zip(&doubled) {
            assert!((2.0 * a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn scores_are_finite_and_input_sensitive() {
        let critic = Critic::init(tiny(), 5).unwrap();
        let a = critic.criticize(&rand_batch(6, 2, 8)).unwrap();
        let b = critic.criticize(&rand_batch(7, 2, 8)).unwrap();
        assert!(a.iter().chain(&b).all(|s| s.is_finite()));
        assert_ne!(a, b);
    }

    #[test]
    fn no_saturation_scores_grow_with_input_scale() {
        let critic = Critic::init(tiny(), 8).unwrap();
        let batch = rand_batch(9, 1, 8);
        let s1 = critic.criticize(&batch).unwrap()[0].abs();
        let big = batch.mapv(|v| v * 1000.0);
        let s2 = critic.criticize(&big).unwrap()[0].abs();
        assert!(s2 > 50.0 * s1.max(1e-9), "score should grow unboundedly: {s1} -> {s2}");
    }

    #[test]
    fn default_receptive_field_is_a_patch() {
        let cfg = CriticConfig::default();
        assert!(cfg.receptive_field() < cfg.input_size,
            "default critic must look at patches, rf {} vs input {}",
            cfg.receptive_field(), cfg.input_size);
    }

    #[test]
    fn checkpoint_round_trip() {
        let critic = Critic::init(tiny(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("critic.bin");
        critic.save(&path).unwrap();
        assert_eq!(Critic::load(&path).unwrap(), critic);
        let other = CriticConfig { base_width: 8, ..tiny() };
        assert!(Critic::load_expecting(&path, &other).is_err());
    }
}
