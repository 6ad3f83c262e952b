use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{compute_class_weights, weighted_cross_entropy, Optimizer, TrainConfig, TrainError};
use crate::autograd::{Graph, Tensor};
use crate::data::{ExampleLoader, LabelMap};
use crate::evaluation::{argmax_rows, evaluate_split, EvalOptions, MetricsReport};
use crate::model::{build_model, save_checkpoint_with, ModelConfig, TwoStreamModel};
use crate::nn::Module;
use crate::rng::{derive_seed, rng_for, Stream};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STATE_FILE: &str = "train_state.json";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    /// Head learning rate for this epoch.
    pub lr: f64,
    pub lr_backbone: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub stopped_early: bool,
    /// Split the selection metric was computed on.
    pub selection_split: String,
}

impl TrainState {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

#[derive(Clone, Default)]
pub struct TrainOptions {
    /// Receives the log, the best checkpoint and the final state.
    pub out_dir: Option<PathBuf>,
    pub cancel: Option<Arc<AtomicBool>>,
    pub progress: Option<Arc<dyn Fn(&EpochRecord) + Send + Sync>>,
}

impl std::fmt::Debug for TrainOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainOptions").field("out_dir", &self.out_dir).finish_non_exhaustive()
    }
}

/// Model-selection score after each epoch (1-based epoch number).
pub type Validator<'a> = dyn FnMut(&TwoStreamModel, usize) -> Result<f64, TrainError> + 'a;

fn selection_split(loader: &ExampleLoader, cfg: &TrainConfig) -> String {
    let m = loader.manifest();
    if m.has_split(&cfg.val_split) && m.split_instances(&cfg.val_split).is_ok_and(|v| !v.is_empty()) {
        cfg.val_split.clone()
    } else {
        cfg.train_split.clone()
    }
}

/// Train all three modules jointly; the model ends up holding the weights
/// of the best epoch.
pub fn train(
    model: &mut TwoStreamModel,
    loader: &ExampleLoader,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainState, TrainError> {
    let split = selection_split(loader, cfg);
    let eval = EvalOptions { batch_size: cfg.eval_batch_size, ..Default::default() };
    let mut validator = |m: &TwoStreamModel, _epoch: usize| -> Result<f64, TrainError> {
        Ok(evaluate_split(m, loader, &split, m.default_variant(), &eval)?.score(cfg.averaging))
    };
    train_with(model, loader, cfg, opts, &split, &mut validator)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

fn write_state(dir: Option<&Path>, state: &TrainState) -> Result<(), TrainError> {
    if let Some(dir) = dir {
        let path = dir.join(STATE_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(state).expect("state serializes")).map_err(io_err(&path))?;
    }
    Ok(())
}

/// [`train`] with a caller-supplied selection metric.
pub fn train_with(
    model: &mut TwoStreamModel,
    loader: &ExampleLoader,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    selection_split: &str,
    validator: &mut Validator<'_>,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let manifest = loader.manifest();
    if model.num_classes() != manifest.num_classes() {
        return Err(TrainError::InvalidConfig(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            manifest.num_classes()
        )));
    }
    let pre = loader.config();
    let mc = model.config();
    let context_size = mc.context.as_ref().map_or(pre.context_size, |c| c.input_size);
    if pre.crop_size != mc.crop.input_size || pre.context_size != context_size {
        return Err(TrainError::InvalidConfig(format!(
            "loader produces {}/{} px inputs, model expects {}/{}",
            pre.crop_size, pre.context_size, mc.crop.input_size, context_size
        )));
    }
    model.preprocess = pre.clone();
    let instances = manifest.split_instances(&cfg.train_split)?;
    if instances.is_empty() {
        return Err(TrainError::InvalidConfig(format!("split {:?} has no instances", cfg.train_split)));
    }
    let counts: Vec<usize> = manifest.class_distribution(&cfg.train_split)?.counts.iter().map(|c| c.count).collect();
    let weights = compute_class_weights(&counts, cfg.class_weighting, cfg.effective_number_beta)?;

    let out_dir = opts.out_dir.as_deref();
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(LOG_FILE);
            Some((std::fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };

    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay as f32);
    let variant = model.default_variant();
    let has_context = model.has_context();
    let mut state = TrainState {
        seed: cfg.seed,
        history: Vec::new(),
        best_epoch: 0,
        best_val_macro_f1: f64::NEG_INFINITY,
        best_checkpoint: None,
        stopped_early: false,
        selection_split: selection_split.to_string(),
    };
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        if opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed)) {
            write_state(out_dir, &state)?;
            return Err(TrainError::Cancelled);
        }
        let factor = cfg.lr_schedule.factor(epoch, cfg.epochs);
        let lr_head = cfg.lr_head * factor;
        let lr_backbone = cfg.lr_backbone * factor;
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, Stream::Shuffle, epoch as u64, 0));

        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let members: Vec<_> = chunk.iter().map(|&i| instances[i]).collect();
            let augment = cfg.augment.then_some((&cfg.augmentation, cfg.seed, epoch as u64));
            let batch = loader.batch(&members, augment, (step * cfg.batch_size) as u64)?;
            let g = Graph::training(derive_seed(cfg.seed, Stream::Dropout, epoch as u64, step as u64));
            let crop = g.constant(batch.crop);
            let context = has_context.then(|| g.constant(batch.context));
            let logits = model.forward(&g, &crop, context.as_ref(), variant)?;
            let loss = weighted_cross_entropy(&g, &logits, &batch.labels, &weights, cfg.label_smoothing as f32)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                write_state(out_dir, &state)?;
                return Err(TrainError::DivergenceDetected {
                    epoch: epoch + 1,
                    step,
                    checkpoint: state.best_checkpoint.clone(),
                });
            }
            let preds = argmax_rows(&logits.value().clone().into_dimensionality().expect("2-D logits"));
            correct += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            loss_sum += value * chunk.len() as f64;

            let grads = g.backward(&loss);
            let mut updates: HashMap<_, _> = g.take_buffer_updates().into_iter().collect();
            opt.step(model, &grads, &|name| if name.starts_with("head.") { lr_head as f32 } else { lr_backbone as f32 });
            if !updates.is_empty() {
                model.visit_mut("", &mut |_, p| {
                    if let Some(t) = updates.remove(&p.id()) {
                        p.set(t);
                    }
                });
            }
        }

        let score = validator(model, epoch + 1)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / instances.len() as f64,
            val_macro_f1: score,
            lr: lr_head,
            lr_backbone,
            train_accuracy: correct as f64 / instances.len() as f64,
        };
        if let Some((file, path)) = &mut log {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}").and_then(|_| file.flush()).map_err(io_err(path))?;
        }
        if let Some(progress) = &opts.progress {
            progress(&record);
        }
        state.history.push(record);

        if score > state.best_val_macro_f1 {
            state.best_val_macro_f1 = score;
            state.best_epoch = epoch + 1;
            stale = 0;
            let mut snapshot = Vec::new();
            model.visit("", &mut |_, p| snapshot.push(p.value().clone()));
            best_params = Some(snapshot);
            if let Some(dir) = out_dir {
                let path = dir.join(BEST_CHECKPOINT);
                let meta = serde_json::json!({
                    "epoch": epoch + 1,
                    "val_macro_f1": score,
                    "selection_split": selection_split,
                    "seed": cfg.seed,
                    "train_config": cfg,
                });
                save_checkpoint_with(model, &path, meta)?;
                state.best_checkpoint = Some(path);
            }
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                state.stopped_early = true;
                break;
            }
        }
    }

    if let Some(snapshot) = best_params {
        let mut values = snapshot.into_iter();
        model.visit_mut("", &mut |_, p| p.set(values.next().expect("same parameter list")));
    }
    write_state(out_dir, &state)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub state: TrainState,
    pub test: Option<MetricsReport>,
}

/// Independent build + train (+ test evaluation) per seed. With an output
/// directory, seed `s` writes under `seed_<s>/`.
pub fn run_multi_seed(
    model_cfg: &ModelConfig,
    labels: &LabelMap,
    loader: &ExampleLoader,
    base: &TrainConfig,
    seeds: &[u64],
    test_split: Option<&str>,
    opts: &TrainOptions,
) -> Result<Vec<SeedRun>, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::InvalidConfig("no seeds given".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let mut model = build_model(model_cfg, labels.clone(), seed)?;
        let seed_opts = TrainOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("seed_{seed}"))),
            ..opts.clone()
        };
        let state = train(&mut model, loader, &cfg, &seed_opts)?;
        let test = match test_split {
            Some(split) => {
                let eval = EvalOptions { batch_size: cfg.eval_batch_size, run_id: format!("seed_{seed}"), seed: Some(seed) };
                Some(evaluate_split(&model, loader, split, model.default_variant(), &eval)?)
            }
            None => None,
        };
        runs.push(SeedRun { seed, state, test });
    }
    Ok(runs)
}
