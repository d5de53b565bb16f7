//! Training: seeded minibatch loops for the HTR models (CTC loss) and the
//! classifiers (cross-entropy), Adadelta and Adam updates, ReduceLROnPlateau
//! and early stopping on validation loss, and the `HTRK` binary checkpoint
//! format (32-bit parameters on disk, 64-bit in memory).

use crate::ctc::{ctc_loss, ctc_loss_node, Label, ProbMatrix};
use crate::data::{derive_seed, load_entry_image, Charset, DatasetManifest, ManifestEntry, Split};
use crate::decode::best_path;
use crate::imaging::{resize_pad, GrayImage};
use crate::layers::Mode;
use crate::metrics::corpus_eval;
use crate::models::{Model, ModelKind, ModelSpec};
use crate::numerics::Tensor;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adadelta,
    Adam,
}

impl Optimizer {
    pub fn parse(s: &str) -> Result<Optimizer> {
        match s {
            "adadelta" => Ok(Optimizer::Adadelta),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected adadelta|adam)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Optimizer::Adadelta => "adadelta",
            Optimizer::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    /// Epochs without improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Minimum decrease in validation loss that counts as improvement.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 0.001,
            optimizer: Optimizer::Adam,
            early_stop_patience: 20,
            plateau_patience: 10,
            plateau_factor: 0.2,
            max_epochs: 100,
            seed: 0,
            clip_norm: Some(5.0),
            min_delta: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.plateau_factor) || self.plateau_factor == 0.0 {
            return Err(Error::Config(format!(
                "plateau_factor {} not in (0,1)",
                self.plateau_factor
            )));
        }
        if self.early_stop_patience < 1 || self.plateau_patience < 1 {
            return Err(Error::Config("patiences must be at least 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config(format!("negative learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation CER in percent for HTR runs, misclassification rate in
    /// percent for classifier runs.
    pub val_cer: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best: Checkpoint,
    pub stopped_early: bool,
}

/// History CSV: epoch, train_loss, val_loss, val_cer, lr.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_cer,lr\n");
    for row in history {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.4},{:.9}\n",
            row.epoch, row.train_loss, row.val_loss, row.val_cer, row.lr
        ));
    }
    out
}

// ── optimizers ──────────────────────────────────────────────────────

/// One Adadelta update (rho = 0.95, eps = 1e-6), scaled by `lr`.
pub fn adadelta_step(
    param: &mut [f64],
    grad: &[f64],
    avg_sq_grad: &mut [f64],
    avg_sq_update: &mut [f64],
    lr: f64,
) {
    const RHO: f64 = 0.95;
    const EPS: f64 = 1e-6;
    for i in 0..param.len() {
        let g = grad[i];
        avg_sq_grad[i] = RHO * avg_sq_grad[i] + (1.0 - RHO) * g * g;
        let update = -((avg_sq_update[i] + EPS).sqrt() / (avg_sq_grad[i] + EPS).sqrt()) * g;
        avg_sq_update[i] = RHO * avg_sq_update[i] + (1.0 - RHO) * update * update;
        param[i] += lr * update;
    }
}

/// One Adam update (beta = (0.9, 0.999), eps = 1e-8) with bias correction;
/// `t` is the 1-based step count.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let bc1 = 1.0 - B1.powi(t as i32);
    let bc2 = 1.0 - B2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = B1 * m[i] + (1.0 - B1) * g;
        v[i] = B2 * v[i] + (1.0 - B2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

struct OptSlot {
    a: Vec<f64>,
    b: Vec<f64>,
    t: usize,
}

struct OptimizerState {
    kind: Optimizer,
    slots: BTreeMap<String, OptSlot>,
}

impl OptimizerState {
    fn new(kind: Optimizer) -> Self {
        OptimizerState {
            kind,
            slots: BTreeMap::new(),
        }
    }

    fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let n = param.len();
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| OptSlot {
            a: vec![0.0; n],
            b: vec![0.0; n],
            t: 0,
        });
        slot.t += 1;
        match self.kind {
            Optimizer::Adadelta => adadelta_step(
                param.data_mut(),
                grad.data(),
                &mut slot.a,
                &mut slot.b,
                lr,
            ),
            Optimizer::Adam => adam_step(
                param.data_mut(),
                grad.data(),
                &mut slot.a,
                &mut slot.b,
                slot.t,
                lr,
            ),
        }
    }
}

/// Scales gradients in place so their global norm is at most `clip`.
fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, clip: f64) {
    let norm: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

/// Validation-driven schedule shared by both training loops.
struct PlateauSchedule {
    best: f64,
    stale: usize,
    plateau_stale: usize,
    min_delta: f64,
}

impl PlateauSchedule {
    fn new(min_delta: f64) -> Self {
        PlateauSchedule {
            best: f64::INFINITY,
            stale: 0,
            plateau_stale: 0,
            min_delta,
        }
    }

    /// Returns (improved, decay_now).
    fn observe(&mut self, val_loss: f64, plateau_patience: usize) -> (bool, bool) {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stale = 0;
            self.plateau_stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            self.plateau_stale += 1;
            if self.plateau_stale >= plateau_patience {
                self.plateau_stale = 0;
                (false, true)
            } else {
                (false, false)
            }
        }
    }
}

// ── sample loading ──────────────────────────────────────────────────

struct HtrSample {
    image: GrayImage,
    label: Label,
    transcript: String,
}

fn load_htr_samples(
    entries: &[&ManifestEntry],
    data_dir: &Path,
    charset: &Charset,
    input_w: usize,
    input_h: usize,
    max_steps: usize,
) -> Result<Vec<HtrSample>> {
    let mut samples = Vec::with_capacity(entries.len());
    for entry in entries {
        let label = charset.encode(&entry.transcript)?;
        if label.len() + label.adjacent_repeats() > max_steps {
            eprintln!(
                "warning: skipping {:?}: label {:?} needs more than {max_steps} frames",
                entry.path, entry.transcript
            );
            continue;
        }
        let image = resize_pad(&load_entry_image(data_dir, entry)?, input_w, input_h);
        samples.push(HtrSample {
            image,
            label,
            transcript: entry.transcript.clone(),
        });
    }
    Ok(samples)
}

// ── HTR training ────────────────────────────────────────────────────

/// Trains an HTR model: shuffled minibatches, CTC loss against pre-softmax
/// logits, per-epoch validation loss and best-path CER, plateau decay and
/// early stopping. Returns the epoch history and the best-validation
/// checkpoint. Samples whose labels cannot align within the model's output
/// steps are skipped with a warning. An empty validation split falls back
/// to validating on the training set.
pub fn train_htr(
    model: &mut Model,
    manifest: &DatasetManifest,
    data_dir: &Path,
    charset: &Charset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !model.spec().kind.is_htr() {
        return Err(Error::Config(format!(
            "{} is not an HTR model",
            model.spec().kind
        )));
    }
    if model.spec().charset_size != charset.len() {
        return Err(Error::Config(format!(
            "model was built for {} symbols, charset has {}",
            model.spec().charset_size,
            charset.len()
        )));
    }
    let t_steps = model.output_steps()?;
    let (input_w, input_h) = (model.spec().input_w, model.spec().input_h);
    let train_entries: Vec<&ManifestEntry> = manifest.of_split(Split::Train).collect();
    if train_entries.is_empty() {
        return Err(Error::Config("manifest has no train entries".into()));
    }
    let val_entries: Vec<&ManifestEntry> = manifest.of_split(Split::Val).collect();
    let train = load_htr_samples(&train_entries, data_dir, charset, input_w, input_h, t_steps)?;
    let val = if val_entries.is_empty() {
        Vec::new()
    } else {
        load_htr_samples(&val_entries, data_dir, charset, input_w, input_h, t_steps)?
    };
    if train.is_empty() {
        return Err(Error::Config("all training samples were skipped".into()));
    }

    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut schedule = PlateauSchedule::new(cfg.min_delta);
    let mut lr = cfg.lr;
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, epoch));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for &i in batch {
                let sample = &train[i];
                let pass = model.forward_graph(&sample.image, Mode::Train, &mut dropout_rng)?;
                let mut graph = pass.graph;
                let loss = ctc_loss_node(&mut graph, pass.output, &sample.label)?;
                graph.backward(loss)?;
                epoch_loss += graph.value(loss).item();
                for (name, node) in &pass.param_nodes {
                    let g = graph.grad_or_zeros(*node);
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                        None => {
                            grads.insert(name.clone(), g);
                        }
                    }
                }
                model.apply_bn_updates(&pass.bn_updates);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if let Some(clip) = cfg.clip_norm {
                clip_global_norm(&mut grads, clip);
            }
            for (name, grad) in &grads {
                let mut param = model.param(name).unwrap().clone();
                opt.step(name, &mut param, grad, lr);
                *model.param_mut(name).unwrap() = param;
            }
        }
        let train_loss = epoch_loss / train.len() as f64;

        let val_set: &[HtrSample] = if val.is_empty() { &train } else { &val };
        let (val_loss, val_cer) = validate_htr(model, val_set, charset)?;

        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_cer,
            lr,
        });

        let (improved, decay) = schedule.observe(val_loss, cfg.plateau_patience);
        if improved || best.is_none() {
            best = Some(Checkpoint::from_model(model, epoch as u32, schedule.best, lr));
        }
        if decay {
            lr *= cfg.plateau_factor;
        }
        if schedule.stale >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        history,
        best: best.expect("at least one epoch ran"),
        stopped_early,
    })
}

fn validate_htr(model: &Model, samples: &[HtrSample], charset: &Charset) -> Result<(f64, f64)> {
    let mut total_loss = 0.0;
    let mut pairs = Vec::with_capacity(samples.len());
    for sample in samples {
        let probs: ProbMatrix = model.forward_htr(&sample.image)?;
        total_loss += ctc_loss(&probs, &sample.label)?.loss;
        let decoded = charset.decode(&best_path(&probs))?;
        pairs.push((decoded, sample.transcript.clone()));
    }
    let report = corpus_eval(&pairs)?;
    Ok((total_loss / samples.len() as f64, report.cer))
}

/// Decodes every sample of a split with best-path and reports corpus CER
/// in percent (used by tests and the eval command for quick checks).
pub fn split_cer(
    model: &Model,
    manifest: &DatasetManifest,
    data_dir: &Path,
    charset: &Charset,
    split: Split,
) -> Result<f64> {
    let entries: Vec<&ManifestEntry> = manifest.of_split(split).collect();
    if entries.is_empty() {
        return Err(Error::Config(format!("split {split} is empty")));
    }
    let t_steps = model.output_steps()?;
    let samples = load_htr_samples(
        &entries,
        data_dir,
        charset,
        model.spec().input_w,
        model.spec().input_h,
        t_steps,
    )?;
    let (_, cer) = validate_htr(model, &samples, charset)?;
    Ok(cer)
}

// ── classifier training ─────────────────────────────────────────────

/// Trains a classifier with cross-entropy over the distinct transcripts of
/// the train split (sorted order defines class indices). Without a val
/// split, a deterministic 10% holdout is taken from the training data.
pub fn train_classifier(
    model: &mut Model,
    manifest: &DatasetManifest,
    data_dir: &Path,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.spec().kind.is_htr() {
        return Err(Error::Config(format!(
            "{} is not a classifier",
            model.spec().kind
        )));
    }
    let train_entries: Vec<&ManifestEntry> = manifest.of_split(Split::Train).collect();
    if train_entries.is_empty() {
        return Err(Error::Config("manifest has no train entries".into()));
    }
    let mut classes: Vec<String> = train_entries
        .iter()
        .map(|e| e.transcript.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    classes.sort();
    if classes.len() != model.spec().num_classes {
        return Err(Error::Config(format!(
            "model expects {} classes but the train split has {}",
            model.spec().num_classes,
            classes.len()
        )));
    }
    let class_of = |t: &str| classes.iter().position(|c| c == t).unwrap();

    let (input_w, input_h) = (model.spec().input_w, model.spec().input_h);
    let mut train: Vec<(GrayImage, usize)> = Vec::new();
    for e in &train_entries {
        train.push((
            resize_pad(&load_entry_image(data_dir, e)?, input_w, input_h),
            class_of(&e.transcript),
        ));
    }
    let val_entries: Vec<&ManifestEntry> = manifest.of_split(Split::Val).collect();
    let mut val: Vec<(GrayImage, usize)> = Vec::new();
    if val_entries.is_empty() {
        // deterministic 10% holdout
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, 0));
        order.shuffle(&mut rng);
        let n_val = (train.len() / 10).max(1);
        let val_idx: std::collections::BTreeSet<usize> =
            order.into_iter().take(n_val).collect();
        let mut kept = Vec::with_capacity(train.len() - n_val);
        for (i, s) in train.into_iter().enumerate() {
            if val_idx.contains(&i) {
                val.push(s);
            } else {
                kept.push(s);
            }
        }
        train = kept;
    } else {
        for e in &val_entries {
            if !classes.iter().any(|c| c == &e.transcript) {
                continue; // class unseen in training: cannot be scored
            }
            val.push((
                resize_pad(&load_entry_image(data_dir, e)?, input_w, input_h),
                class_of(&e.transcript),
            ));
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("classifier training needs train and val samples".into()));
    }

    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut schedule = PlateauSchedule::new(cfg.min_delta);
    let mut lr = cfg.lr;
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, epoch));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for &i in batch {
                let (image, class) = &train[i];
                let pass = model.forward_graph(image, Mode::Train, &mut dropout_rng)?;
                let mut graph = pass.graph;
                let loss = graph.cross_entropy(pass.output, *class)?;
                graph.backward(loss)?;
                epoch_loss += graph.value(loss).item();
                for (name, node) in &pass.param_nodes {
                    let g = graph.grad_or_zeros(*node);
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                        None => {
                            grads.insert(name.clone(), g);
                        }
                    }
                }
                model.apply_bn_updates(&pass.bn_updates);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if let Some(clip) = cfg.clip_norm {
                clip_global_norm(&mut grads, clip);
            }
            for (name, grad) in &grads {
                let mut param = model.param(name).unwrap().clone();
                opt.step(name, &mut param, grad, lr);
                *model.param_mut(name).unwrap() = param;
            }
        }
        let train_loss = epoch_loss / train.len() as f64;

        let mut val_loss = 0.0;
        let mut wrong = 0usize;
        for (image, class) in &val {
            let probs = model.forward_classifier(image)?;
            val_loss -= probs[*class].max(1e-300).ln();
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax != *class {
                wrong += 1;
            }
        }
        val_loss /= val.len() as f64;
        let val_err = 100.0 * wrong as f64 / val.len() as f64;

        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_cer: val_err,
            lr,
        });

        let (improved, decay) = schedule.observe(val_loss, cfg.plateau_patience);
        if improved || best.is_none() {
            best = Some(Checkpoint::from_model(model, epoch as u32, schedule.best, lr));
        }
        if decay {
            lr *= cfg.plateau_factor;
        }
        if schedule.stale >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        history,
        best: best.expect("at least one epoch ran"),
        stopped_early,
    })
}

// ── checkpoints ─────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"HTRK";
const FORMAT_VERSION: u32 = 1;

/// Serialized model: spec, training state, and named parameters stored as
/// little-endian f32. Loading and re-saving a checkpoint is byte-stable.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub epoch: u32,
    pub best_val_loss: f64,
    pub lr: f64,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: u32, best_val_loss: f64, lr: f64) -> Self {
        Checkpoint {
            spec: *model.spec(),
            epoch,
            best_val_loss,
            lr,
            params: model
                .export_params()
                .into_iter()
                .map(|(name, tensor, _)| {
                    let data: Vec<f32> = tensor.data().iter().map(|&v| v as f32).collect();
                    (name, tensor.shape().to_vec(), data)
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let stored: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(name, shape, data)| {
                let tensor = Tensor::from_vec(
                    shape.clone(),
                    data.iter().map(|&v| v as f64).collect(),
                )?;
                Ok((name.clone(), tensor))
            })
            .collect::<Result<_>>()?;
        Model::from_params(self.spec, &stored)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let kind_idx = ModelKind::ALL
            .iter()
            .position(|k| *k == self.spec.kind)
            .unwrap() as u8;
        out.push(kind_idx);
        for v in [
            self.spec.charset_size as u32,
            self.spec.num_classes as u32,
            self.spec.input_w as u32,
            self.spec.input_h as u32,
            self.epoch,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.best_val_loss.to_le_bytes());
        out.extend_from_slice(&self.lr.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = std::io::Cursor::new(bytes);
        let err = |msg: &str| Error::Parse {
            path: "<checkpoint>".into(),
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| err("truncated"))?;
        if &magic != MAGIC {
            return Err(err("bad magic (not an HTRK checkpoint)"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |cur: &mut std::io::Cursor<&[u8]>| -> Result<u32> {
            cur.read_exact(&mut u32buf).map_err(|_| err("truncated"))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut cur)?;
        if version != FORMAT_VERSION {
            return Err(err(&format!("unsupported format version {version}")));
        }
        let mut byte = [0u8; 1];
        cur.read_exact(&mut byte).map_err(|_| err("truncated"))?;
        let kind = *ModelKind::ALL
            .get(byte[0] as usize)
            .ok_or_else(|| err("bad model kind"))?;
        let charset_size = read_u32(&mut cur)? as usize;
        let num_classes = read_u32(&mut cur)? as usize;
        let input_w = read_u32(&mut cur)? as usize;
        let input_h = read_u32(&mut cur)? as usize;
        let epoch = read_u32(&mut cur)?;
        let mut f64buf = [0u8; 8];
        cur.read_exact(&mut f64buf).map_err(|_| err("truncated"))?;
        let best_val_loss = f64::from_le_bytes(f64buf);
        cur.read_exact(&mut f64buf).map_err(|_| err("truncated"))?;
        let lr = f64::from_le_bytes(f64buf);
        let count = read_u32(&mut cur)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            cur.read_exact(&mut u16buf).map_err(|_| err("truncated"))?;
            let name_len = u16::from_le_bytes(u16buf) as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name).map_err(|_| err("truncated"))?;
            let name = String::from_utf8(name).map_err(|_| err("bad parameter name"))?;
            cur.read_exact(&mut byte).map_err(|_| err("truncated"))?;
            let rank = byte[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                cur.read_exact(&mut u32buf).map_err(|_| err("truncated"))?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut f32buf = [0u8; 4];
            for _ in 0..n {
                cur.read_exact(&mut f32buf).map_err(|_| err("truncated"))?;
                data.push(f32::from_le_bytes(f32buf));
            }
            params.push((name, shape, data));
        }
        Ok(Checkpoint {
            spec: ModelSpec {
                kind,
                charset_size,
                num_classes,
                input_w,
                input_h,
            },
            epoch,
            best_val_loss,
            lr,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse {
                path: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }
}
