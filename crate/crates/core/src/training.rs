//! Minibatch training of the conditional noise predictor.
//!
//! Every randomness consumer has an addressable stream: batch selection by
//! iteration, timestep draws by (iteration, slot), forward-process noise by
//! (sample index, timestep). Two runs with the same seed and config produce
//! identical loss trajectories.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{save_checkpoint, DenoiserBackbone, DenoiserConfig, ParamStore};
use crate::data::{Dataset, FieldSample, Subset};
use crate::error::CoreError;
use crate::forward_process::q_sample;
use crate::nn::Tensor;
use crate::rng::{RngFactory, StreamDomain};
use crate::schedules::{NoiseSchedule, ScheduleParams};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub backbone: DenoiserConfig,
    /// Neutral-format dataset directory (CLI fills this in; in-memory
    /// training may leave it unset).
    pub dataset_root: Option<PathBuf>,
    /// Write a checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: usize,
    /// Optional exponential moving average of the parameters.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 32,
            learning_rate: 2e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            schedule: ScheduleParams::default(),
            backbone: DenoiserConfig::default(),
            dataset_root: None,
            checkpoint_every: 0,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(CoreError::training("iterations must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(CoreError::training("batch size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::training(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(CoreError::training(format!("ema decay {d} outside [0, 1)")));
            }
        }
        self.backbone.validate()?;
        self.schedule.build().map(|_| ())
    }
}

/// Optimizer state. Parameters are re-quantized to f32 after every update so
/// checkpoints reproduce the in-memory model exactly.
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: usize,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    },
    Sgd {
        lr: f64,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
                v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            },
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        match self {
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let t = *step as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for ((p, g), (mi, vi)) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    let Some(g) = g else { continue };
                    for ((pv, gv), (mv, vv)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mi.data_mut().iter_mut().zip(vi.data_mut().iter_mut()))
                    {
                        *mv = *beta1 * *mv + (1.0 - *beta1) * gv;
                        *vv = *beta2 * *vv + (1.0 - *beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                    p.round_to_f32();
                }
            }
            Optimizer::Sgd { lr } => {
                for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= *lr * gv;
                    }
                    p.round_to_f32();
                }
            }
        }
    }
}

/// One optimization step over an explicit batch. `samples` pairs each field
/// sample with its dataset index so the injected noise is reproducible from
/// (seed, sample index, timestep). Returns the batch loss.
pub fn train_step(
    model: &mut DenoiserBackbone,
    samples: &[(usize, &FieldSample)],
    schedule: &NoiseSchedule,
    factory: &RngFactory,
    iteration: u64,
    optimizer: &mut Optimizer,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::training("empty batch"));
    }
    let n = samples.len();
    let (h, w) = samples[0].1.spatial_dims();
    let plane = 3 * h * w;
    let mut x_t = Vec::with_capacity(n * plane);
    let mut cond = Vec::with_capacity(n * plane);
    let mut eps = Vec::with_capacity(n * plane);
    let mut ts = Vec::with_capacity(n);
    let horizon = schedule.num_steps();
    let mut t_stream = factory.stream(StreamDomain::TrainTimestep, iteration);
    for (ds_index, sample) in samples {
        let t = t_stream.gen_range(1..=horizon);
        let mut noise_stream = factory.stream2(StreamDomain::TrainNoise, *ds_index as u64, t as u64);
        let pair = q_sample(&sample.target, t, schedule, &mut noise_stream)?;
        x_t.extend_from_slice(pair.x_t.data());
        eps.extend_from_slice(pair.epsilon.data());
        cond.extend_from_slice(sample.condition.channels().data());
        ts.push(t);
    }
    let shape = [n, 3, h, w];
    let pass = model
        .loss_grads(
            &Tensor::from_vec(&shape, x_t),
            &Tensor::from_vec(&shape, cond),
            &ts,
            &Tensor::from_vec(&shape, eps),
        )
        .map_err(|e| match e {
            CoreError::Numerical { stage, reason } => CoreError::Numerical {
                stage,
                reason: format!(
                    "{reason}; batch timesteps {:?}, sample indices {:?}",
                    ts,
                    samples.iter().map(|(i, _)| *i).collect::<Vec<_>>()
                ),
            },
            other => other,
        })?;
    optimizer.apply(model.params_mut(), &pass.grads);
    Ok(pass.loss)
}

/// Artifacts produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserBackbone,
    pub losses: Vec<f64>,
    pub loss_log: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Run the training loop on an in-memory dataset. Artifacts are written under
/// `out_dir` when provided (loss log CSV plus checkpoints at the configured
/// cadence and at the end).
pub fn train_with_dataset(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_indices = dataset.indices_in(Subset::Training);
    if train_indices.is_empty() {
        return Err(CoreError::data("dataset has no training samples"));
    }
    let (h, w) = dataset.samples[train_indices[0]].spatial_dims();
    if h != config.backbone.input_size || w != config.backbone.input_size {
        return Err(CoreError::config(format!(
            "dataset grid {h}x{w} does not match backbone input size {}",
            config.backbone.input_size
        )));
    }
    let schedule = config.schedule.build()?;
    let factory = RngFactory::new(config.seed);
    let mut model = DenoiserBackbone::new(config.backbone.clone(), &factory)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.params());
    let mut ema: Option<Vec<Tensor>> = config
        .ema_decay
        .map(|_| model.params().tensors().to_vec());

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match out_dir {
        Some(dir) => {
            let path = dir.join("loss_log.csv");
            let mut s = String::from("iteration,loss,wall_seconds\n");
            s.reserve(config.iterations * 24);
            Some((path, s))
        }
        None => None,
    };

    let started = Instant::now();
    let mut losses = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let mut batch_stream = factory.stream(StreamDomain::TrainBatch, iter as u64);
        let batch: Vec<(usize, &FieldSample)> = (0..config.batch_size)
            .map(|_| {
                let idx = train_indices[batch_stream.gen_range(0..train_indices.len())];
                (idx, &dataset.samples[idx])
            })
            .collect();
        let loss = train_step(
            &mut model,
            &batch,
            &schedule,
            &factory,
            iter as u64,
            &mut optimizer,
        )?;
        if let Some(decay) = config.ema_decay {
            let shadow = ema.as_mut().expect("ema state");
            for (s, p) in shadow.iter_mut().zip(model.params().tensors()) {
                for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                    *sv = decay * *sv + (1.0 - decay) * pv;
                }
            }
        }
        losses.push(loss);
        if let Some((_, buf)) = log.as_mut() {
            buf.push_str(&format!(
                "{},{},{}\n",
                iter + 1,
                loss,
                started.elapsed().as_secs_f64()
            ));
        }
        if let Some(dir) = out_dir {
            let cadence = config.checkpoint_every;
            if cadence > 0 && (iter + 1) % cadence == 0 && iter + 1 < config.iterations {
                save_checkpoint(&dir.join(format!("ckpt_{:07}.ckpt", iter + 1)), &model)?;
            }
        }
    }

    let mut final_checkpoint = None;
    let mut loss_log = None;
    if let Some(dir) = out_dir {
        let path = dir.join("model_final.ckpt");
        save_checkpoint(&path, &model)?;
        final_checkpoint = Some(path);
        if let Some(decay) = config.ema_decay {
            let mut shadow_model = model.clone();
            let shadow = ema.take().expect("ema state");
            for (slot, s) in shadow_model.params_mut().tensors_mut().iter_mut().zip(shadow) {
                *slot = s;
                slot.round_to_f32();
            }
            let _ = decay;
            save_checkpoint(&dir.join("model_final_ema.ckpt"), &shadow_model)?;
        }
        if let Some((path, buf)) = log.take() {
            std::fs::write(&path, buf)?;
            loss_log = Some(path);
        }
    }
    Ok(TrainOutcome {
        model,
        losses,
        loss_log,
        final_checkpoint,
    })
}

/// Load the dataset from `config.dataset_root` and train.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let root = config
        .dataset_root
        .as_ref()
        .ok_or_else(|| CoreError::training("no dataset root configured"))?;
    let dataset = crate::data::load_dataset(root)?;
    if dataset.is_empty() {
        return Err(CoreError::data(format!(
            "dataset at {} is empty",
            root.display()
        )));
    }
    train_with_dataset(config, &dataset, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LatentKind;
    use crate::data::{generate_synthetic_dataset, toy_case_declarations};
    use crate::samplers::NoisePredictor as _;

    fn toy_backbone(size: usize, kind: LatentKind) -> DenoiserConfig {
        DenoiserConfig {
            input_channels: 6,
            input_size: size,
            base_width: 8,
            depth: 1,
            attn_levels: vec![],
            latent_kind: kind,
            latent_blocks: 2,
            latent_heads: 2,
            embed_dim: 16,
            patch_size: 1,
            time_embed_dim: 16,
        }
    }

    fn toy_dataset(size: usize) -> Dataset {
        generate_synthetic_dataset(
            size,
            size,
            3,
            0.05,
            0.45,
            8.0e6,
            &toy_case_declarations(),
            &RngFactory::new(77),
        )
        .unwrap()
    }

    fn toy_config(size: usize, iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 4,
            learning_rate: 2e-3,
            optimizer: OptimizerKind::Adam,
            seed: 5,
            schedule: ScheduleParams {
                num_steps: 50,
                beta_start: 1e-3,
                beta_end: 0.05,
            },
            backbone: toy_backbone(size, LatentKind::Dit),
            dataset_root: None,
            checkpoint_every: 0,
            ema_decay: None,
        }
    }

    #[test]
    fn oracle_stub_noise_gives_zero_loss_and_zero_model_unit_loss() {
        // A model that outputs the exact noise has loss 0; since a fresh
        // model outputs exactly zero, its expected loss is E||eps||^2 / n = 1.
        let ds = toy_dataset(8);
        let config = toy_config(8, 1);
        let schedule = config.schedule.build().unwrap();
        let factory = RngFactory::new(9);
        let model = DenoiserBackbone::new(config.backbone.clone(), &factory).unwrap();

        // large batch of q_sample draws; fresh model predicts 0
        let mut total = 0.0;
        let mut count = 0usize;
        let mut exact = 0.0;
        for (i, s) in ds.samples.iter().enumerate().take(16) {
            let t = 1 + (i % schedule.num_steps());
            let mut stream = factory.stream2(StreamDomain::TrainNoise, i as u64, t as u64);
            let pair = q_sample(&s.target, t, &schedule, &mut stream).unwrap();
            let pred = model.predict_noise(&pair.x_t, &s.condition, t).unwrap();
            for (p, e) in pred.data().iter().zip(pair.epsilon.data()) {
                total += (p - e) * (p - e);
                count += 1;
            }
            // oracle stub: predicting the true noise -> zero residual
            for (a, e) in pair.epsilon.data().iter().zip(pair.epsilon.data()) {
                exact += (a - e) * (a - e);
            }
        }
        assert_eq!(exact, 0.0);
        let mean = total / count as f64;
        let se = (2.0f64 / count as f64).sqrt(); // Var(chi^2_1) = 2
        assert!((mean - 1.0).abs() < 3.0 * se, "zero-model loss {mean}");
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let ds = toy_dataset(8);
        let config = toy_config(8, 4);
        let a = train_with_dataset(&config, &ds, None).unwrap();
        let b = train_with_dataset(&config, &ds, None).unwrap();
        assert_eq!(a.losses, b.losses);
        for (x, y) in a
            .model
            .params()
            .tensors()
            .iter()
            .zip(b.model.params().tensors())
        {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn loss_is_finite_and_decreases_on_average() {
        let ds = toy_dataset(8);
        let config = toy_config(8, 60);
        let outcome = train_with_dataset(&config, &ds, None).unwrap();
        assert!(outcome.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
        let head: f64 = outcome.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = outcome.losses[50..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "loss did not trend down: head {head}, tail {tail}"
        );
    }

    #[test]
    fn every_stage_changes_within_three_steps() {
        // Zero-initialized projections gate the gradient flow: step 1 moves
        // only the final conv, step 2 reaches the decoder/encoder trunks and
        // the modulation layers, step 3 opens the embedding paths behind
        // them. After three steps every stage must have moved - guards
        // against dead skip/modulation paths.
        let ds = toy_dataset(8);
        for kind in [
            LatentKind::Dit,
            LatentKind::Uvit,
            LatentKind::UnetMid,
            LatentKind::SkiplessDit,
        ] {
            let mut config = toy_config(8, 1);
            config.backbone = toy_backbone(8, kind);
            let schedule = config.schedule.build().unwrap();
            let factory = RngFactory::new(13);
            let mut model = DenoiserBackbone::new(config.backbone.clone(), &factory).unwrap();
            let before: Vec<Tensor> = model.params().tensors().to_vec();
            let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.params());
            let batch: Vec<(usize, &FieldSample)> =
                ds.samples.iter().take(4).enumerate().collect();
            for iter in 0..3u64 {
                train_step(&mut model, &batch, &schedule, &factory, iter, &mut optimizer).unwrap();
            }
            for prefix in ["embed.", "encoder.", "latent.", "decoder."] {
                let changed = model
                    .params()
                    .names()
                    .iter()
                    .zip(model.params().tensors())
                    .zip(&before)
                    .filter(|((n, _), _)| n.starts_with(prefix))
                    .any(|((_, now), was)| now.data() != was.data());
                assert!(changed, "{kind:?}: stage {prefix} never moved");
            }
        }
    }

    #[test]
    fn ablation_matrix_trains_under_one_config() {
        let ds = toy_dataset(8);
        for kind in [
            LatentKind::Dit,
            LatentKind::Uvit,
            LatentKind::UnetMid,
            LatentKind::SkiplessDit,
        ] {
            let mut config = toy_config(8, 2);
            config.backbone = toy_backbone(8, kind);
            let outcome = train_with_dataset(&config, &ds, None).unwrap();
            assert_eq!(outcome.losses.len(), 2, "{kind:?}");
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let config = toy_config(8, 0);
        assert!(config.validate().is_err());
    }

    #[test]
    fn artifacts_written_when_out_dir_given() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(8);
        let mut config = toy_config(8, 5);
        config.checkpoint_every = 2;
        config.ema_decay = Some(0.99);
        let outcome = train_with_dataset(&config, &ds, Some(dir.path())).unwrap();
        let log = outcome.loss_log.unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        assert!(text.starts_with("iteration,loss,wall_seconds\n"));
        assert_eq!(text.lines().count(), 6);
        assert!(outcome.final_checkpoint.unwrap().exists());
        assert!(dir.path().join("ckpt_0000002.ckpt").exists());
        assert!(dir.path().join("ckpt_0000004.ckpt").exists());
        assert!(dir.path().join("model_final_ema.ckpt").exists());
    }
}
