//! Training loop: batched gradient steps, stage-dependent parameter
//! freezing, plateau learning-rate schedule, and checkpoint save/resume.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{CompassModel, PredictorKind};
use crate::params::Params;
use crate::tensor::Graph;

use super::loss::combined_rd_loss;
use super::optim::Adam;
use super::sampler::sample_pyramid;
use super::{TrainConfig, TrainStage};

/// Scalar readings of one completed training step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// 1-based number of the step just completed.
    pub step: u64,
    /// Batch-mean loss.
    pub loss: f64,
    /// Learning rate used for this step's update.
    pub lr: f64,
    /// Pyramid layer index of each rate/distortion column.
    pub layer_ids: Vec<usize>,
    /// Batch-mean rate per layer (bits per pixel).
    pub rates_bpp: Vec<f64>,
    /// Batch-mean scaled distortion per layer.
    pub distortions: Vec<f64>,
}

/// RNG for 0-based step `step`: ChaCha20 stream `step + 1` of the run seed
/// (stream 0 seeded the model parameters).
fn step_rng(seed: u64, step: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

/// Freeze parameter groups the stage must not touch; everything else becomes
/// trainable. The base layer is frozen in every enhancement stage.
fn apply_freeze(params: &mut Params, stage: TrainStage, predictor: PredictorKind) {
    params.set_trainable_prefix("", true);
    match stage {
        TrainStage::PretrainBl => {
            params.set_trainable_prefix("liff.", false);
            params.set_trainable_prefix("rc.", false);
        }
        TrainStage::PretrainLiff => {
            params.set_trainable_prefix("bl.", false);
            params.set_trainable_prefix("rc.", false);
        }
        TrainStage::PretrainRc => {
            params.set_trainable_prefix("bl.", false);
            params.set_trainable_prefix("liff.", false);
        }
        TrainStage::Joint => {
            params.set_trainable_prefix("bl.", false);
            if predictor == PredictorKind::Bicubic {
                params.set_trainable_prefix("liff.", false);
            }
        }
    }
}

pub struct Trainer {
    model: CompassModel,
    cfg: TrainConfig,
    dataset: Vec<(String, Array3<f64>)>,
    opt: Adam,
    /// Completed steps.
    step: u64,
    window_sum: f64,
    window_count: u64,
    best_window: Option<f64>,
}

impl Trainer {
    pub fn new(
        model: CompassModel,
        cfg: TrainConfig,
        dataset: Vec<(String, Array3<f64>)>,
    ) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::Dataset("training dataset is empty".into()));
        }
        if cfg.stage == TrainStage::PretrainLiff && model.config.predictor != PredictorKind::Liff {
            return Err(Error::invalid(
                "pretrain-liff requires the learned predictor",
            ));
        }
        let mut model = model;
        apply_freeze(&mut model.params, cfg.stage, model.config.predictor);
        let opt = Adam::new(cfg.lr);
        Ok(Trainer {
            model,
            cfg,
            dataset,
            opt,
            step: 0,
            window_sum: 0.0,
            window_count: 0,
            best_window: None,
        })
    }

    /// Resume the run a checkpoint describes. The checkpoint must have been
    /// written by [`Trainer::save`] (it carries the training configuration).
    pub fn from_checkpoint(
        ck: Checkpoint,
        dataset: Vec<(String, Array3<f64>)>,
    ) -> Result<Self> {
        let train = ck.meta.train.clone().ok_or_else(|| {
            Error::Checkpoint("checkpoint has no training configuration to resume".into())
        })?;
        let cfg: TrainConfig = serde_json::from_value(train)
            .map_err(|e| Error::Checkpoint(format!("invalid training configuration: {e}")))?;
        let step = ck.step;
        let model = ck.into_model()?;
        let mut trainer = Trainer::new(model, cfg, dataset)?;
        trainer.step = step;
        Ok(trainer)
    }

    pub fn model(&self) -> &CompassModel {
        &self.model
    }

    pub fn into_model(self) -> CompassModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr()
    }

    /// Override the configured total step count (e.g. to extend a resumed
    /// run).
    pub fn set_total_steps(&mut self, steps: u64) {
        self.cfg.steps = steps;
    }

    /// Run one batched gradient step.
    ///
    /// All randomness of the step — image choice, pyramid sampling, latent
    /// noise — comes from the step's own RNG stream, drawn in a fixed order
    /// sample by sample, so a step's outcome depends only on the parameters,
    /// the seed, and the step number.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let levels = if self.cfg.stage == TrainStage::PretrainBl {
            0
        } else {
            self.cfg.layers
        };
        let mut rng = step_rng(self.cfg.seed, self.step);
        let trainable = self.model.params.trainable_names();
        let inv_batch = 1.0 / self.cfg.batch_size as f64;

        let mut accum: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut layer_ids: Vec<usize> = Vec::new();
        let mut rates: Vec<f64> = Vec::new();
        let mut dists: Vec<f64> = Vec::new();

        for _ in 0..self.cfg.batch_size {
            let idx = rng.gen_range(0..self.dataset.len());
            let pyramid = sample_pyramid(
                &self.dataset[idx].1,
                levels,
                self.cfg.crop_size,
                self.cfg.scale_min,
                self.cfg.scale_max,
                &mut rng,
            );
            let g = Graph::recording();
            let bound = self.model.params.bind(&g);
            let bd = combined_rd_loss(
                &g,
                &bound,
                &self.model.config,
                self.cfg.stage,
                self.cfg.lambda,
                &pyramid,
                &mut rng,
            )?;
            let grads = g.backward(bd.total);
            for name in &trainable {
                if let Some(v) = bound.get(name) {
                    if let Some(arr) = grads.get(v) {
                        let scaled = arr.mapv(|x| x * inv_batch);
                        match accum.get_mut(name) {
                            Some(a) => *a += &scaled,
                            None => {
                                accum.insert(name.clone(), scaled);
                            }
                        }
                    }
                }
            }
            loss_sum += bd.loss * inv_batch;
            if layer_ids.is_empty() {
                layer_ids = bd.layers.iter().map(|l| l.layer).collect();
                rates = vec![0.0; layer_ids.len()];
                dists = vec![0.0; layer_ids.len()];
            }
            for (i, lt) in bd.layers.iter().enumerate() {
                rates[i] += lt.rate_bpp * inv_batch;
                dists[i] += lt.distortion * inv_batch;
            }
        }

        let lr_used = self.opt.lr();
        self.opt.step(&mut self.model.params, &accum)?;
        self.step += 1;
        self.update_schedule(loss_sum);

        Ok(StepRecord {
            step: self.step,
            loss: loss_sum,
            lr: lr_used,
            layer_ids,
            rates_bpp: rates,
            distortions: dists,
        })
    }

    /// Plateau schedule: halve the learning rate when a window's mean loss
    /// fails to improve on the best window seen so far.
    fn update_schedule(&mut self, loss: f64) {
        if self.cfg.plateau_window == 0 {
            return;
        }
        self.window_sum += loss;
        self.window_count += 1;
        if self.window_count >= self.cfg.plateau_window {
            let mean = self.window_sum / self.window_count as f64;
            if let Some(best) = self.best_window {
                if mean >= best {
                    self.opt.set_lr((self.opt.lr() * 0.5).max(self.cfg.min_lr));
                }
            }
            self.best_window = Some(self.best_window.map_or(mean, |b| b.min(mean)));
            self.window_sum = 0.0;
            self.window_count = 0;
        }
    }

    /// Run until the configured total step count, invoking `on_step` after
    /// every step. Returns the records selected for logging: every
    /// `log_every`-th step plus the final one.
    pub fn run_with<F: FnMut(&StepRecord)>(&mut self, mut on_step: F) -> Result<Vec<StepRecord>> {
        let mut selected = Vec::new();
        while self.step < self.cfg.steps {
            let rec = self.step_once()?;
            on_step(&rec);
            let every = self.cfg.log_every;
            if (every > 0 && rec.step % every == 0) || rec.step == self.cfg.steps {
                selected.push(rec);
            }
        }
        Ok(selected)
    }

    pub fn run(&mut self) -> Result<Vec<StepRecord>> {
        self.run_with(|_| {})
    }

    /// Write a checkpoint carrying parameters, model and training
    /// configuration, seed, and step count.
    ///
    /// Checkpoints store 32-bit floats, so saving also rounds the in-memory
    /// parameters to that precision: continuing in-process and resuming from
    /// the file then follow bit-identical trajectories.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let train = serde_json::to_value(&self.cfg)
            .map_err(|e| Error::Checkpoint(format!("cannot serialize training config: {e}")))?;
        checkpoint::save(path, &self.model, Some(train), self.cfg.seed, self.step)?;
        let names: Vec<String> = self.model.params.names().map(String::from).collect();
        for name in names {
            self.model
                .params
                .get_mut(&name)
                .expect("name from listing")
                .mapv_inplace(|x| x as f32 as f64);
        }
        Ok(())
    }
}

/// Write selected step records as CSV: `step,loss,lr`, then one rate and one
/// distortion column per layer in the loss.
pub fn write_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Dataset(format!("cannot write log {}: {e}", path.display())))?;
    let ids: &[usize] = records.first().map_or(&[], |r| &r.layer_ids);
    let mut header = vec!["step".to_string(), "loss".to_string(), "lr".to_string()];
    for id in ids {
        header.push(format!("r_bpp_{id}"));
    }
    for id in ids {
        header.push(format!("d_{id}"));
    }
    w.write_record(&header)
        .map_err(|e| Error::Dataset(format!("log write failed: {e}")))?;
    for r in records {
        let mut row = vec![r.step.to_string(), format!("{:.6}", r.loss), format!("{:.6e}", r.lr)];
        for v in &r.rates_bpp {
            row.push(format!("{v:.6}"));
        }
        for v in &r.distortions {
            row.push(format!("{v:.6}"));
        }
        w.write_record(&row)
            .map_err(|e| Error::Dataset(format!("log write failed: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Dataset(format!("log write failed: {e}")))?;
    Ok(())
}
