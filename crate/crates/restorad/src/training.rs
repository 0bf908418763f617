//! The adversarial optimization loop: Adam for both networks, stepped
//! learning-rate decay, a fixed critic:generator update ratio, per-iteration
//! loss logging, and checkpointing that resumes bit-exactly.
//!
//! Determinism: every random draw comes from a stream keyed by the master
//! seed plus plain counters (iteration, sub-step, batch cursor), so a resumed
//! run replays the exact tail of an uninterrupted one.

use std::io::Write;
use std::path::{Path, PathBuf};

use autograd::Tape;
use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{Critic, CriticConfig};
use crate::data::{DataError, DatasetRepartition, ImageStore, Split};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{
    discriminator_loss, generator_adv_loss, generator_total_var, identity_loss, restoration_loss,
    LossBreakdown, LossError, LossWeights,
};
use crate::nn::{load_params, save_params, BoundParams, ModelError, ParamSet};
use crate::rng::derive_rng;
use crate::synthesis::{paired_batch, SynthError, SynthParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("non-finite {phase} loss at iteration {iteration}: {breakdown:?}")]
    NonFinite {
        iteration: u64,
        phase: &'static str,
        breakdown: LossBreakdown,
    },
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid training configuration: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint state at {path} is corrupt: {msg}")]
    StateCorrupt { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Generator iterations to run.
    pub max_iterations: u64,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    /// Critic updates per generator update.
    pub d_steps_per_g_step: u64,
    pub seed: u64,
    /// Checkpoint every this many generator iterations (0 = only at the end).
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    /// When false, the unlabeled split is ignored and restored pseudo
    /// anomalies play the fake/adversarial stream instead.
    pub include_unlabeled: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 64,
            max_iterations: 100_000,
            lr_decay_every: 1000,
            lr_decay_factor: 0.95,
            d_steps_per_g_step: 2,
            seed: 0,
            checkpoint_every: 1000,
            weights: LossWeights::default(),
            include_unlabeled: true,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::ConfigInvalid(m));
        if self.lr < 0.0 || !self.lr.is_finite() {
            return err(format!("lr {} invalid", self.lr));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.max_iterations == 0 {
            return err("max_iterations must be positive".into());
        }
        if self.lr_decay_every == 0 {
            return err("lr_decay_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lr_decay_factor) || self.lr_decay_factor == 0.0 {
            return err(format!("lr_decay_factor {} invalid", self.lr_decay_factor));
        }
        if self.d_steps_per_g_step == 0 {
            return err("d_steps_per_g_step must be >= 1".into());
        }
        self.weights.validate().map_err(TrainError::Loss)?;
        Ok(())
    }

    /// Learning rate used by the step whose pre-step iteration counter is
    /// `iteration`: `lr * factor^(iteration / decay_every)`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr * self.lr_decay_factor.powi((iteration / self.lr_decay_every) as i32)
    }
}

/// Adam first/second moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One Adam update in place; `grads` maps block name to gradient.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &std::collections::BTreeMap<String, ArrayD<f64>>,
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) {
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let m = self.m.get_mut(name);
            let v = self.v.get_mut(name);
            let p = params.get_mut(name);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + EPS);
                });
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed generator steps.
    pub iteration: u64,
    pub d_steps_done: u64,
    pub generator: Generator,
    pub critic: Critic,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    /// Batches drawn so far per split (the data schedule is a pure function
    /// of these counters and the seed).
    pub cursor_normal: u64,
    pub cursor_unlabeled: u64,
}

impl TrainState {
    pub fn init(
        gen_cfg: GeneratorConfig,
        critic_cfg: CriticConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let generator = Generator::init(gen_cfg, seed)?;
        let critic = Critic::init(critic_cfg, seed.wrapping_add(1))?;
        let opt_g = AdamState::new(&generator.params);
        let opt_d = AdamState::new(&critic.params);
        Ok(Self {
            iteration: 0,
            d_steps_done: 0,
            generator,
            critic,
            opt_g,
            opt_d,
            cursor_normal: 0,
            cursor_unlabeled: 0,
        })
    }

    pub fn lr_current(&self, cfg: &TrainConfig) -> f64 {
        cfg.lr_at(self.iteration)
    }
}

/// Preloaded training images.
pub struct TrainData {
    pub normal: Vec<Array4<f64>>,
    pub normal_ids: Vec<String>,
    pub unlabeled: Vec<Array4<f64>>,
    pub unlabeled_ids: Vec<String>,
}

impl TrainData {
    /// Decode every training image once up front.
    pub fn preload(
        rep: &DatasetRepartition,
        store: &mut ImageStore,
        include_unlabeled: bool,
    ) -> Result<Self, TrainError> {
        store.preload(&rep.normal_train)?;
        if rep.normal_train.is_empty() {
            return Err(TrainError::Data(DataError::EmptySplit(Split::NormalTrain)));
        }
        let normal: Vec<Array4<f64>> = rep
            .normal_train
            .iter()
            .map(|r| {
                let img = store.get(&r.id)?.clone();
                let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
                Ok(img.into_shape_with_order((1, c, h, w)).expect("reshape").to_owned())
            })
            .collect::<Result<_, DataError>>()?;
        let normal_ids = rep.normal_train.iter().map(|r| r.id.clone()).collect();

        let (unlabeled, unlabeled_ids) = if include_unlabeled {
            if rep.unlabeled_train.is_empty() {
                return Err(TrainError::Data(DataError::EmptySplit(Split::UnlabeledTrain)));
            }
            store.preload(&rep.unlabeled_train)?;
            let imgs: Vec<Array4<f64>> = rep
                .unlabeled_train
                .iter()
                .map(|r| {
                    let img = store.get(&r.id)?.clone();
                    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
                    Ok(img.into_shape_with_order((1, c, h, w)).expect("reshape").to_owned())
                })
                .collect::<Result<_, DataError>>()?;
            let ids = rep.unlabeled_train.iter().map(|r| r.id.clone()).collect();
            (imgs, ids)
        } else {
            (Vec::new(), Vec::new())
        };

        Ok(Self {
            normal,
            normal_ids,
            unlabeled,
            unlabeled_ids,
        })
    }

    fn gather(images: &[Array4<f64>], ids: &[String], idx: &[usize]) -> (Array4<f64>, Vec<String>) {
        let (c, h, w) = {
            let s = images[0].shape();
            (s[1], s[2], s[3])
        };
        let mut out = Array4::zeros((idx.len(), c, h, w));
        let mut out_ids = Vec::with_capacity(idx.len());
        for (bi, &i) in idx.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&images[i].index_axis(ndarray::Axis(0), 0));
            out_ids.push(ids[i].clone());
        }
        (out, out_ids)
    }
}

/// Indices of the `k`-th training batch over a split of `n` records: pure in
/// `(seed, split, k)`. Batches are always full; the stream is the
/// concatenation of per-pass permutations, so every record is still visited
/// once per pass and the adversarial batches stay size-matched.
pub fn scheduled_batch(n: usize, batch_size: usize, seed: u64, split: Split, k: u64) -> Vec<usize> {
    assert!(n > 0 && batch_size > 0);
    let start = k as u128 * batch_size as u128;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = (start / n as u128) as u64;
    let mut offset = (start % n as u128) as usize;
    let mut order = crate::data::epoch_order(n, seed, split, epoch, true);
    for _ in 0..batch_size {
        if offset == n {
            epoch += 1;
            offset = 0;
            order = crate::data::epoch_order(n, seed, split, epoch, true);
        }
        out.push(order[offset]);
        offset += 1;
    }
    out
}

/// The training driver. Owns preloaded data and the output locations.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub synth: &'a SynthParams,
    pub data: &'a TrainData,
    /// Checkpoint root; `None` disables checkpointing.
    pub out_dir: Option<PathBuf>,
}

fn extract_grads(
    tape: &Tape,
    loss: autograd::Var,
    bound: &BoundParams,
) -> std::collections::BTreeMap<String, ArrayD<f64>> {
    let names: Vec<String> = bound.iter().map(|(n, _)| n.clone()).collect();
    let vars: Vec<autograd::Var> = bound.iter().map(|(_, v)| *v).collect();
    let grads = tape.grad(loss, &vars);
    names
        .into_iter()
        .zip(grads)
        .map(|(name, g)| {
            let arr = match g {
                Some(v) => tape.value(v),
                None => ArrayD::zeros(ndarray::IxDyn(&[0])),
            };
            (name, arr)
        })
        .filter(|(_, a)| !a.is_empty())
        .collect()
}

impl<'a> Trainer<'a> {
    fn draw_normal(&self, state: &mut TrainState) -> (Array4<f64>, Vec<String>) {
        let idx = scheduled_batch(
            self.data.normal.len(),
            self.cfg.batch_size,
            self.cfg.seed,
            Split::NormalTrain,
            state.cursor_normal,
        );
        state.cursor_normal += 1;
        TrainData::gather(&self.data.normal, &self.data.normal_ids, &idx)
    }

    fn draw_unlabeled(&self, state: &mut TrainState) -> (Array4<f64>, Vec<String>) {
        let idx = scheduled_batch(
            self.data.unlabeled.len(),
            self.cfg.batch_size,
            self.cfg.seed,
            Split::UnlabeledTrain,
            state.cursor_unlabeled,
        );
        state.cursor_unlabeled += 1;
        TrainData::gather(&self.data.unlabeled, &self.data.unlabeled_ids, &idx)
    }

    /// Produce the adversarial-stream batch for one sub-step: the unlabeled
    /// split, or restored pseudo anomalies when unlabeled data is excluded.
    fn adversarial_inputs(
        &self,
        state: &mut TrainState,
        tag: &str,
        sub: u64,
    ) -> Result<Array4<f64>, TrainError> {
        if self.cfg.include_unlabeled {
            Ok(self.draw_unlabeled(state).0)
        } else {
            let (normals, ids) = self.draw_normal(state);
            let mut rng = derive_rng(self.cfg.seed, tag, &[sub]);
            let (pseudo, _, _) = paired_batch(&normals, &ids, self.synth, &mut rng)?;
            Ok(pseudo)
        }
    }

    /// One critic update. Only critic parameters and moments change.
    pub fn step_discriminator(&self, state: &mut TrainState) -> Result<LossBreakdown, TrainError> {
        // Streams are keyed by the absolute critic-step counter, which is
        // part of the state: replaying from a clone reproduces the step.
        let sub = state.d_steps_done;
        let (x_real, _) = self.draw_normal(state);
        let stream = self.adversarial_inputs(state, "synth_d", sub)?;

        // Fakes are generated up front and enter the critic tape as constants.
        let fake = {
            let tape = Tape::new();
            let gparams = state.generator.bind(&tape, false);
            let x = tape.leaf_nograd(stream.into_dyn());
            let mut rng = derive_rng(self.cfg.seed, "delta_d", &[sub]);
            let fwd = state.generator.forward_train(&tape, &gparams, x, &mut rng)?;
            tape.value(fwd.output)
                .into_dimensionality::<ndarray::Ix4>()
                .expect("4-D fake batch")
        };

        let tape = Tape::new();
        let cparams = state.critic.bind(&tape, true);
        let real_v = tape.leaf_nograd(x_real.clone().into_dyn());
        let fake_v = tape.leaf_nograd(fake.clone().into_dyn());
        let scores_real = state.critic.forward(&tape, &cparams, real_v)?.scores;
        let scores_fake = state.critic.forward(&tape, &cparams, fake_v)?.scores;
        let mut rng = derive_rng(self.cfg.seed, "eps", &[sub]);
        let parts = discriminator_loss(
            &tape,
            scores_real,
            scores_fake,
            &x_real,
            &fake,
            &self.cfg.weights,
            &mut rng,
            |t, xh| {
                state
                    .critic
                    .forward(t, &cparams, xh)
                    .map(|f| f.scores)
                    .map_err(|e| LossError::ShapeMismatch(e.to_string()))
            },
        )?;

        let mut breakdown = LossBreakdown::zeros();
        breakdown.d_adv = tape.scalar(parts.d_adv);
        breakdown.gp = tape.scalar(parts.gp);
        breakdown.d_total = tape.scalar(parts.d_total);
        if !breakdown.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: state.iteration,
                phase: "critic",
                breakdown,
            });
        }

        let grads = extract_grads(&tape, parts.d_total, &cparams);
        let lr = state.lr_current(self.cfg);
        state.opt_d.step(
            &mut state.critic.params,
            &grads,
            lr,
            self.cfg.adam_beta1,
            self.cfg.adam_beta2,
        );
        state.d_steps_done += 1;
        Ok(breakdown)
    }

    /// One generator update. Only generator parameters and moments change.
    pub fn step_generator(&self, state: &mut TrainState) -> Result<LossBreakdown, TrainError> {
        let (x_n, ids) = self.draw_normal(state);
        let mut synth_rng = derive_rng(self.cfg.seed, "synth_g", &[state.iteration]);
        let (x_p, _, _) = paired_batch(&x_n, &ids, self.synth, &mut synth_rng)?;
        let adv_input = if self.cfg.include_unlabeled {
            Some(self.draw_unlabeled(state).0)
        } else {
            None
        };

        let tape = Tape::new();
        let gparams = state.generator.bind(&tape, true);
        let cparams = state.critic.bind(&tape, false);
        let mut delta_rng = derive_rng(self.cfg.seed, "delta_g", &[state.iteration]);

        let xn_v = tape.leaf_nograd(x_n.clone().into_dyn());
        let xp_v = tape.leaf_nograd(x_p.into_dyn());
        let restored_n = state
            .generator
            .forward_train(&tape, &gparams, xn_v, &mut delta_rng)?;
        let restored_p = state
            .generator
            .forward_train(&tape, &gparams, xp_v, &mut delta_rng)?;
        let restored_adv = match adv_input {
            Some(xu) => {
                let xu_v = tape.leaf_nograd(xu.into_dyn());
                state
                    .generator
                    .forward_train(&tape, &gparams, xu_v, &mut delta_rng)?
                    .output
            }
            None => restored_p.output,
        };

        let id = identity_loss(&tape, restored_n.output, xn_v)?;
        let rec = restoration_loss(&tape, restored_p.output, xn_v)?;
        let scores = state.critic.forward(&tape, &cparams, restored_adv)?.scores;
        let g_adv = generator_adv_loss(&tape, scores)?;
        let g_total = generator_total_var(&tape, id, rec, g_adv, &self.cfg.weights);

        let mut breakdown = LossBreakdown::zeros();
        breakdown.id = tape.scalar(id);
        breakdown.rec = tape.scalar(rec);
        breakdown.g_adv = tape.scalar(g_adv);
        breakdown.g_total = tape.scalar(g_total);
        if !breakdown.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: state.iteration,
                phase: "generator",
                breakdown,
            });
        }

        let grads = extract_grads(&tape, g_total, &gparams);
        let lr = state.lr_current(self.cfg);
        state.opt_g.step(
            &mut state.generator.params,
            &grads,
            lr,
            self.cfg.adam_beta1,
            self.cfg.adam_beta2,
        );
        state.iteration += 1;
        Ok(breakdown)
    }

    /// One full iteration: the configured number of critic updates, then one
    /// generator update. Returns the merged breakdown (critic fields from the
    /// final critic update before the generator step).
    pub fn iteration(&self, state: &mut TrainState) -> Result<LossBreakdown, TrainError> {
        let mut last_d = LossBreakdown::zeros();
        for _ in 0..self.cfg.d_steps_per_g_step {
            last_d = self.step_discriminator(state)?;
        }
        let mut merged = self.step_generator(state)?;
        merged.d_adv = last_d.d_adv;
        merged.gp = last_d.gp;
        merged.d_total = last_d.d_total;
        Ok(merged)
    }

    /// Run from the state's current iteration to `max_iterations`, appending
    /// one loss line per iteration and checkpointing on schedule.
    pub fn run(
        &self,
        state: &mut TrainState,
        mut on_line: impl FnMut(u64, &LossBreakdown),
    ) -> Result<Vec<LossBreakdown>, TrainError> {
        self.cfg.validate()?;
        let mut log = Vec::new();
        let mut last_saved = None;
        while state.iteration < self.cfg.max_iterations {
            let breakdown = self.iteration(state)?;
            on_line(state.iteration, &breakdown);
            log.push(breakdown);
            let due = self.cfg.checkpoint_every > 0
                && state.iteration % self.cfg.checkpoint_every == 0;
            if due || state.iteration == self.cfg.max_iterations {
                if let Some(dir) = &self.out_dir {
                    save_checkpoint(dir, state, self.cfg)?;
                    last_saved = Some(state.iteration);
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            if last_saved != Some(state.iteration) {
                save_checkpoint(dir, state, self.cfg)?;
            }
        }
        Ok(log)
    }
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    iteration: u64,
    d_steps_done: u64,
    cursor_normal: u64,
    cursor_unlabeled: u64,
    opt_g_t: u64,
    opt_d_t: u64,
    lr_current: f64,
    seed: u64,
}

/// Write `ckpt_<iteration>/` with model, optimizer and counter state.
pub fn save_checkpoint(
    root: &Path,
    state: &TrainState,
    cfg: &TrainConfig,
) -> Result<PathBuf, TrainError> {
    let dir = root.join(format!("ckpt_{:07}", state.iteration));
    std::fs::create_dir_all(&dir).map_err(|source| TrainError::Io {
        path: dir.clone(),
        source,
    })?;
    state.generator.save(&dir.join("generator.bin"))?;
    state.critic.save(&dir.join("critic.bin"))?;

    // optimizer moments for both nets in one container
    let mut opt = ParamSet::new();
    for (name, block) in state.opt_g.m.iter() {
        opt.insert(&format!("g.m.{name}"), block.clone());
    }
    for (name, block) in state.opt_g.v.iter() {
        opt.insert(&format!("g.v.{name}"), block.clone());
    }
    for (name, block) in state.opt_d.m.iter() {
        opt.insert(&format!("d.m.{name}"), block.clone());
    }
    for (name, block) in state.opt_d.v.iter() {
        opt.insert(&format!("d.v.{name}"), block.clone());
    }
    let meta = StateMeta {
        iteration: state.iteration,
        d_steps_done: state.d_steps_done,
        cursor_normal: state.cursor_normal,
        cursor_unlabeled: state.cursor_unlabeled,
        opt_g_t: state.opt_g.t,
        opt_d_t: state.opt_d.t,
        lr_current: state.lr_current(cfg),
        seed: cfg.seed,
    };
    save_params(&dir.join("optimizer.bin"), &meta, &opt)?;
    let meta_path = dir.join("state.json");
    let body = serde_json::to_string_pretty(&meta).expect("state serializes");
    std::fs::write(&meta_path, body).map_err(|source| TrainError::Io {
        path: meta_path,
        source,
    })?;
    let cfg_path = dir.join("train_config.json");
    let body = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&cfg_path, body).map_err(|source| TrainError::Io {
        path: cfg_path,
        source,
    })?;
    Ok(dir)
}

/// Restore a [`TrainState`] from a checkpoint directory. The stored train
/// config must equal `cfg`.
pub fn load_checkpoint(dir: &Path, cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    let cfg_path = dir.join("train_config.json");
    let body = std::fs::read_to_string(&cfg_path).map_err(|source| TrainError::Io {
        path: cfg_path.clone(),
        source,
    })?;
    let stored: TrainConfig = serde_json::from_str(&body).map_err(|e| TrainError::StateCorrupt {
        path: cfg_path.clone(),
        msg: e.to_string(),
    })?;
    if &stored != cfg {
        return Err(TrainError::ConfigInvalid(format!(
            "checkpoint train config differs from the requested one ({cfg_path:?})"
        )));
    }

    let generator = Generator::load(&dir.join("generator.bin"))?;
    let critic = Critic::load(&dir.join("critic.bin"))?;
    let (meta, opt) = load_params(&dir.join("optimizer.bin"))?;
    let meta: StateMeta = serde_json::from_value(meta).map_err(|e| TrainError::StateCorrupt {
        path: dir.join("optimizer.bin"),
        msg: e.to_string(),
    })?;

    let mut opt_g = AdamState::new(&generator.params);
    let mut opt_d = AdamState::new(&critic.params);
    opt_g.t = meta.opt_g_t;
    opt_d.t = meta.opt_d_t;
    for (name, block) in opt.iter() {
        if let Some(rest) = name.strip_prefix("g.m.") {
            *opt_g.m.get_mut(rest) = block.clone();
        } else if let Some(rest) = name.strip_prefix("g.v.") {
            *opt_g.v.get_mut(rest) = block.clone();
        } else if let Some(rest) = name.strip_prefix("d.m.") {
            *opt_d.m.get_mut(rest) = block.clone();
        } else if let Some(rest) = name.strip_prefix("d.v.") {
            *opt_d.v.get_mut(rest) = block.clone();
        }
    }

    Ok(TrainState {
        iteration: meta.iteration,
        d_steps_done: meta.d_steps_done,
        generator,
        critic,
        opt_g,
        opt_d,
        cursor_normal: meta.cursor_normal,
        cursor_unlabeled: meta.cursor_unlabeled,
    })
}

/// Append one structured loss line (iteration plus all seven fields).
pub fn append_loss_line(
    file: &mut impl Write,
    iteration: u64,
    b: &LossBreakdown,
) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        iteration: u64,
        #[serde(flatten)]
        losses: &'a LossBreakdown,
    }
    let line = serde_json::to_string(&Line {
        iteration,
        losses: b,
    })
    .expect("loss line serializes");
    writeln!(file, "{line}")
}
