//! Training driver: run configuration, dataset presets, the epoch loop,
//! validation-based model selection and binary checkpoints.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "MEIMCKPT"  u16 version  u32 len  <RunConfig JSON>
//! u64 epoch  f64 best_mrr  u64 adam_step  u32 tensor_count
//! tensor_count x { u16 name_len  name  u8 rank  rank x u64 dim  f64 data... }
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradTape;
use crate::data::{
    batches, build_filter_index, load_dataset, ByteReader, FilterIndex, Split, TripleStore,
};
use crate::error::{MeimError, Result};
use crate::eval::{evaluate, EvalOptions, MetricsReport, TiePolicy};
use crate::model::{CoreMode, Direction, Mode, ModelConfig, ModelParams, Sampling};
use crate::objective::{build_targets, loss_on_tape, LossWeights};
use crate::optim::{adam_step, lr_at, AdamState, LrSchedule};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEIMCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: u64,
    pub data_dir: PathBuf,
    /// Where the best checkpoint is written; the latest state goes to
    /// the same path with a `.last` suffix.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines metrics log.
    pub log_path: Option<PathBuf>,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: u64,
    pub tie_policy: TiePolicy,
}

impl RunConfig {
    pub fn new(model: ModelConfig, data_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            model,
            schedule: LrSchedule {
                base_lr: 3e-3,
                decay: 1.0,
            },
            batch_size: 1024,
            epochs: 1000,
            data_dir: data_dir.into(),
            checkpoint: None,
            log_path: None,
            eval_every: 1,
            tie_policy: TiePolicy::Average,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.epochs == 0 {
            return Err(MeimError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(MeimError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights::from_config(&self.model)
    }
}

/// Per-dataset hyperparameters of the reference setup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Wn18rr,
    Fb15k237,
    Yago310,
}

impl std::str::FromStr for Preset {
    type Err = MeimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wn18rr" => Ok(Preset::Wn18rr),
            "fb15k-237" | "fb15k237" => Ok(Preset::Fb15k237),
            "yago3-10" | "yago310" => Ok(Preset::Yago310),
            _ => Err(MeimError::Config(format!(
                "unknown preset `{s}` (expected wn18rr, fb15k-237 or yago3-10)"
            ))),
        }
    }
}

impl Preset {
    /// `(entities, relations)` of the published dataset.
    pub fn dataset_sizes(self) -> (usize, usize) {
        match self {
            Preset::Wn18rr => (40943, 11),
            Preset::Fb15k237 => (14541, 237),
            Preset::Yago310 => (123182, 37),
        }
    }

    /// Overwrites model and optimizer hyperparameters; vocabulary sizes and
    /// paths are left alone.
    pub fn apply(self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        m.core_mode = CoreMode::Independent;
        m.ce = 100;
        m.cr = 100;
        m.p_norm = 3;
        cfg.batch_size = 1024;
        cfg.epochs = 1000;
        cfg.schedule.base_lr = 3e-3;
        match self {
            Preset::Wn18rr => {
                m.k = 3;
                m.sampling = Sampling::KVsAll;
                (m.input_dropout, m.hidden_dropout) = (0.71, 0.67);
                (m.lambda_ortho, m.lambda_unitnorm) = (1e-1, 5e-4);
                cfg.schedule.decay = 0.99775;
            }
            Preset::Fb15k237 => {
                m.k = 3;
                m.sampling = Sampling::OneVsAll;
                (m.input_dropout, m.hidden_dropout) = (0.66, 0.67);
                (m.lambda_ortho, m.lambda_unitnorm) = (0.0, 0.0);
                cfg.schedule.decay = 0.99775;
            }
            Preset::Yago310 => {
                m.k = 5;
                m.sampling = Sampling::OneVsAll;
                (m.input_dropout, m.hidden_dropout) = (0.1, 0.15);
                (m.lambda_ortho, m.lambda_unitnorm) = (1e-3, 0.0);
                cfg.schedule.decay = 0.995;
            }
        }
    }

    /// Model configuration at the published dataset sizes.
    pub fn model_config(self) -> ModelConfig {
        let (e, r) = self.dataset_sizes();
        let mut cfg = RunConfig::new(ModelConfig::new(e, r, 1, 1, 1), "");
        self.apply(&mut cfg);
        cfg.model
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub config: RunConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    pub best_mrr: f64,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(&ckpt.config).expect("run config serializes");
    let mut tensors: Vec<(String, &Tensor)> = ckpt.params.named_tensors();
    let names: Vec<&str> = ckpt.params.trainable().iter().map(|(n, _)| *n).collect();
    for (i, name) in names.iter().enumerate() {
        tensors.push((format!("adam.m.{name}"), &ckpt.adam.m[i]));
        tensors.push((format!("adam.v.{name}"), &ckpt.adam.v[i]));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&ckpt.best_mrr.to_le_bytes());
    buf.extend_from_slice(&ckpt.adam.step.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut buf, name, t);
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| MeimError::io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| MeimError::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| MeimError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| MeimError::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(MeimError::Integrity(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(MeimError::Integrity(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let json_len = r.u32()? as usize;
    let config: RunConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| MeimError::Integrity(format!("checkpoint configuration is corrupt: {e}")))?;
    config.model.validate()?;
    let epoch = r.u64()?;
    let best_mrr = r.f64()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;

    let mut params = ModelParams::init(&config.model)?;
    let names: Vec<&'static str> = params.trainable().iter().map(|(n, _)| *n).collect();
    let mut adam = AdamState::new(params.trainable().into_iter().map(|(_, t)| t));
    adam.step = step;
    let mut filled = 0usize;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| MeimError::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| r.f64()).collect::<Result<_>>()?;
        let slot = if let Some(rest) = name.strip_prefix("adam.m.") {
            names
                .iter()
                .position(|n| *n == rest)
                .map(|i| &mut adam.m[i])
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            names
                .iter()
                .position(|n| *n == rest)
                .map(|i| &mut adam.v[i])
        } else {
            params.named_tensor_mut(&name)
        };
        let slot =
            slot.ok_or_else(|| MeimError::Integrity(format!("unexpected tensor `{name}`")))?;
        if slot.shape() != shape.as_slice() {
            return Err(MeimError::Integrity(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(&data);
        filled += 1;
    }
    let expected = params.named_tensors().len() + 2 * names.len();
    if filled != expected {
        return Err(MeimError::Integrity(format!(
            "checkpoint holds {filled} tensors, expected {expected}"
        )));
    }
    if !r.is_done() {
        return Err(MeimError::Integrity(
            "trailing bytes after checkpoint".into(),
        ));
    }
    Ok(Checkpoint {
        version,
        config,
        params,
        adam,
        epoch,
        best_mrr,
    })
}

/// One line of the JSON-lines metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub ortho_loss: f64,
    pub val_mrr: Option<f64>,
    pub val_hits1: Option<f64>,
    pub val_hits3: Option<f64>,
    pub val_hits10: Option<f64>,
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub ortho_loss: f64,
}

/// Owns the parameters, optimizer state and data of a run.
pub struct Trainer {
    pub config: RunConfig,
    pub store: TripleStore,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    pub best_mrr: f64,
    pub best: Option<ModelParams>,
    train_filter: FilterIndex,
    eval_filter: FilterIndex,
}

fn check_sizes(config: &RunConfig, store: &TripleStore) -> Result<()> {
    if store.num_entities() != config.model.num_entities
        || store.num_relations() != config.model.num_relations
    {
        return Err(MeimError::Config(format!(
            "model is sized for {} entities and {} relations but the dataset has {} and {}",
            config.model.num_entities,
            config.model.num_relations,
            store.num_entities(),
            store.num_relations()
        )));
    }
    if store.train.is_empty() {
        return Err(MeimError::Validation("the training split is empty".into()));
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: RunConfig, store: TripleStore) -> Result<Self> {
        config.validate()?;
        check_sizes(&config, &store)?;
        let params = ModelParams::init(&config.model)?;
        let adam = AdamState::new(params.trainable().into_iter().map(|(_, t)| t));
        Ok(Self::assemble(
            config,
            store,
            params,
            adam,
            0,
            f64::NEG_INFINITY,
        ))
    }

    /// Continues from `ckpt`; `epochs` in `config` is the new total.
    pub fn resume(ckpt: Checkpoint, config: RunConfig, store: TripleStore) -> Result<Self> {
        config.validate()?;
        if config.model != ckpt.config.model {
            return Err(MeimError::Config(
                "model configuration differs from the checkpoint being resumed".into(),
            ));
        }
        check_sizes(&config, &store)?;
        let mut t = Self::assemble(
            config,
            store,
            ckpt.params,
            ckpt.adam,
            ckpt.epoch,
            ckpt.best_mrr,
        );
        t.best = Some(t.params.clone());
        Ok(t)
    }

    fn assemble(
        config: RunConfig,
        store: TripleStore,
        params: ModelParams,
        adam: AdamState,
        epoch: u64,
        best_mrr: f64,
    ) -> Self {
        let train_filter = build_filter_index(&store, &[Split::Train]);
        let eval_filter = build_filter_index(&store, &Split::ALL);
        Trainer {
            config,
            store,
            params,
            adam,
            epoch,
            best_mrr,
            best: None,
            train_filter,
            eval_filter,
        }
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(&self.config.schedule, self.epoch)
    }

    fn epoch_seed(&self) -> u64 {
        self.config
            .model
            .seed
            .wrapping_add(self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// One pass over the shuffled training split.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let lr = self.current_lr();
        let weights = self.config.loss_weights();
        let seed = self.epoch_seed();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
        let n_ent = self.store.num_entities();
        let sampling = self.config.model.sampling;
        let mut loss_sum = 0.0;
        let mut ortho_sum = 0.0;
        let mut last_finite = None;
        let all = batches(&self.store, Split::Train, self.config.batch_size, seed);
        let n_batches = all.len();
        for (i, batch) in all.into_iter().enumerate() {
            let tt = build_targets(&batch, Direction::Tail, &self.train_filter, sampling, n_ent)?;
            let th = build_targets(&batch, Direction::Head, &self.train_filter, sampling, n_ent)?;
            let mut tape = GradTape::new();
            let vars = self.params.register(&mut tape);
            let graph = loss_on_tape(
                &self.params,
                &mut tape,
                &vars,
                &batch,
                &tt,
                &th,
                &weights,
                Mode::Train { rng: &mut rng },
            )?;
            let loss = tape.scalar(graph.total);
            if !loss.is_finite() {
                return Err(MeimError::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: i,
                    last_finite,
                });
            }
            last_finite = Some(loss);
            loss_sum += loss;
            ortho_sum += graph.ortho.map_or(0.0, |o| tape.scalar(o));
            let mut grads = tape.backward(graph.total)?;
            let names: Vec<&'static str> =
                self.params.trainable().iter().map(|(n, _)| *n).collect();
            let g: Vec<Tensor> = names
                .iter()
                .map(|n| grads.take(vars.by_name(n).expect("registered parameter")))
                .collect();
            self.params.apply_norm_updates(&graph.forward.norm_updates);
            drop(tape);
            let mut targets: Vec<&mut Tensor> = self
                .params
                .trainable_mut()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            adam_step(&mut targets, &g, &mut self.adam, lr)?;
        }
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / n_batches as f64,
            ortho_loss: ortho_sum / n_batches as f64,
        };
        self.epoch += 1;
        Ok(stats)
    }

    pub fn evaluate(&self, split: Split) -> Result<MetricsReport> {
        let opts = EvalOptions {
            tie_policy: self.config.tie_policy,
            ..Default::default()
        };
        evaluate(&self.params, &self.store, split, &self.eval_filter, &opts)
    }

    pub fn checkpoint(&self, params: &ModelParams) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            best_mrr: self.best_mrr,
        }
    }

    /// Runs the remaining epochs, validating at the configured cadence and
    /// keeping the parameters with the best validation MRR.
    ///
    /// Without validation the final parameters are kept.
    pub fn run(&mut self, mut on_entry: impl FnMut(&LogEntry)) -> Result<Vec<LogEntry>> {
        let mut log_file = match &self.config.log_path {
            Some(p) => Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| MeimError::io(p, e))?,
            ),
            None => None,
        };
        let validate = self.config.eval_every > 0 && !self.store.valid.is_empty();
        let mut log = Vec::new();
        while self.epoch < self.config.epochs {
            let stats = self.run_epoch()?;
            let mut entry = LogEntry {
                epoch: stats.epoch,
                lr: stats.lr,
                train_loss: stats.train_loss,
                ortho_loss: stats.ortho_loss,
                val_mrr: None,
                val_hits1: None,
                val_hits3: None,
                val_hits10: None,
            };
            let due = validate
                && (self.epoch.is_multiple_of(self.config.eval_every)
                    || self.epoch == self.config.epochs);
            if due {
                let report = self.evaluate(Split::Valid)?;
                entry.val_mrr = Some(report.mrr);
                entry.val_hits1 = Some(report.hits1);
                entry.val_hits3 = Some(report.hits3);
                entry.val_hits10 = Some(report.hits10);
                if report.mrr > self.best_mrr {
                    self.best_mrr = report.mrr;
                    self.best = Some(self.params.clone());
                    if let Some(path) = &self.config.checkpoint {
                        save_checkpoint(&self.checkpoint(&self.params), path)?;
                    }
                }
            }
            if let Some(path) = &self.config.checkpoint {
                let mut last = path.clone().into_os_string();
                last.push(".last");
                save_checkpoint(&self.checkpoint(&self.params), Path::new(&last))?;
            }
            if let Some(f) = &mut log_file {
                let line = serde_json::to_string(&entry).expect("log entry serializes");
                writeln!(f, "{line}")
                    .map_err(|e| MeimError::io(self.config.log_path.as_ref().unwrap(), e))?;
            }
            on_entry(&entry);
            log.push(entry);
        }
        if !validate {
            self.best = Some(self.params.clone());
            if let Some(path) = &self.config.checkpoint {
                save_checkpoint(&self.checkpoint(&self.params), path)?;
            }
        }
        Ok(log)
    }

    /// Checkpoint of the retained (best) parameters.
    pub fn best_checkpoint(&self) -> Checkpoint {
        self.checkpoint(self.best.as_ref().unwrap_or(&self.params))
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Loads the dataset named by `config` and trains from scratch.
pub fn train(config: RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let store = load_dataset(&config.data_dir)?;
    let mut trainer = Trainer::new(config, store)?;
    let log = trainer.run(|_| {})?;
    Ok(TrainOutcome {
        best: trainer.best_checkpoint(),
        log,
    })
}
