//! Mini-batch training with Adam, plateau learning-rate reduction, early
//! stopping and best-checkpoint selection, plus evaluation of checkpoints.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, IoContext, Result};
use crate::intervals::{decode_sequence, encode_frame_targets, merge_proposals, Modality, Proposal};
use crate::kv::KeyValues;
use crate::losses::{dfd_bce_with_grad, tfl_composite_with_grad, FocalConfig, LossBreakdown};
use crate::metrics::{ApPooling, DetectionReport, EvalRecord, LocalizationReport, joint_view, modality_view};
use crate::model::{average_levels, dfd_probabilities, Model, ModelConfig, Prediction, Task};
use crate::params::ParamStore;
use crate::syndata::Sample;
use crate::tensor::{Mat, Real};

/// Frame probability at which a frame is decoded into a proposal.
pub const DECODE_THRESHOLD: f64 = 0.5;
/// IoU above which same-modality proposals are suppressed.
pub const NMS_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub focal: FocalConfig,
    pub seed: u64,
    pub pooling: ApPooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            batch: 16,
            epochs: 100,
            patience: 10,
            plateau_factor: 0.1,
            plateau_patience: 5,
            focal: FocalConfig::default(),
            seed: 42,
            pooling: ApPooling::Global,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch == 0 || self.epochs == 0 || self.patience == 0 || self.plateau_patience == 0 {
            return bad("batch, epochs, patience and plateau_patience must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.focal.alpha > 0.0 && self.focal.alpha < 1.0 && self.focal.gamma >= 0.0) {
            return bad("alpha must lie in (0, 1) and gamma must be non-negative");
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let model = ModelConfig::from_kv(kv)?;
        let cfg = Self {
            model,
            lr: kv.take_or("lr", d.lr)?,
            batch: kv.take_or("batch", d.batch)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            patience: kv.take_or("patience", d.patience)?,
            plateau_factor: kv.take_or("plateau_factor", d.plateau_factor)?,
            plateau_patience: kv.take_or("plateau_patience", d.plateau_patience)?,
            focal: FocalConfig { alpha: kv.take_or("alpha", d.focal.alpha)?, gamma: kv.take_or("gamma", d.focal.gamma)? },
            seed: kv.take_or("seed", d.seed)?,
            pooling: kv.take_or("ap_pooling", d.pooling)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::read(path)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }
}

/// Samples zero-padded to the longest member.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub samples: Vec<&'a Sample>,
    pub padded: usize,
    pub visual: Vec<Mat<f32>>,
    pub audio: Vec<Mat<f32>>,
    /// `true` on real frames.
    pub mask: Vec<Vec<bool>>,
}

impl Batch<'_> {
    pub fn valid(&self, i: usize) -> usize {
        self.samples[i].frames()
    }
}

pub fn pad_and_mask_batch<'a>(samples: &[&'a Sample], f_max: usize) -> Result<Batch<'a>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.frames() > f_max || s.frames() == 0) {
        return Err(Error::InvalidInput(format!("{} has {} frames (f_max {f_max})", s.id, s.frames())));
    }
    let padded = samples.iter().map(|s| s.frames()).max().unwrap();
    let pad = |m: &Mat<f32>| {
        let mut out = Mat::zeros(padded, m.cols);
        out.data[..m.data.len()].copy_from_slice(&m.data);
        out
    };
    Ok(Batch {
        samples: samples.to_vec(),
        padded,
        visual: samples.iter().map(|s| pad(&s.visual)).collect(),
        audio: samples.iter().map(|s| pad(&s.audio)).collect(),
        mask: samples.iter().map(|s| (0..padded).map(|j| j < s.frames()).collect()).collect(),
    })
}

/// Loss of one sample (evaluated on `visual`/`audio`, which may be padded
/// beyond the sample's frames) and its parameter gradient.
pub fn sample_loss<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    sample: &Sample,
    visual: &Mat<T>,
    audio: &Mat<T>,
    focal: FocalConfig,
) -> Result<(LossBreakdown, ParamStore<T>)> {
    let (pred, cache) = model.forward(params, visual, audio, sample.frames())?;
    let (breakdown, grad) = match pred {
        Prediction::Dfd(logits) => {
            let (v, g) = dfd_bce_with_grad(&logits, sample.labels);
            (LossBreakdown { total: v, ..Default::default() }, Prediction::Dfd(g))
        }
        Prediction::Tfl(levels) => {
            let targets = encode_frame_targets(&sample.intervals, sample.frames())?;
            let (b, g) = tfl_composite_with_grad(&levels, &targets, focal);
            (b, Prediction::Tfl(g))
        }
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss of {}", sample.id)));
    }
    let mut g = params.zeros_like();
    model.backward(params, &cache, &grad, &mut g);
    Ok((breakdown, g))
}

/// Mean loss and gradient over a batch. Elements run in parallel and are
/// reduced in batch order.
pub fn batch_loss(
    model: &Model,
    params: &ParamStore<f32>,
    batch: &Batch<'_>,
    focal: FocalConfig,
) -> Result<(LossBreakdown, ParamStore<f32>)> {
    let parts: Vec<Result<(LossBreakdown, ParamStore<f32>)>> = (0..batch.samples.len())
        .into_par_iter()
        .map(|i| sample_loss(model, params, batch.samples[i], &batch.visual[i], &batch.audio[i], focal))
        .collect();
    let n = batch.samples.len();
    let mut mean = LossBreakdown::default();
    let mut grads = params.zeros_like();
    for part in parts {
        let (b, g) = part?;
        mean.focal += b.focal / n as f64;
        mean.diou += b.diou / n as f64;
        mean.smooth_l1 += b.smooth_l1 / n as f64;
        mean.total += b.total / n as f64;
        mean.p += b.p;
        grads.accumulate(&g);
    }
    grads.scale(1.0 / n as f32);
    Ok((mean, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradient had a non-finite entry; nothing changed.
    Skipped,
}

pub fn adam_step<T: Real>(params: &mut ParamStore<T>, grads: &ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<StepOutcome> {
    if params.len() != grads.len()
        || params.entries().iter().zip(grads.entries()).any(|(p, g)| p.value.len() != g.value.len())
    {
        return Err(Error::InvalidInput("gradient layout differs from parameters".into()));
    }
    if !grads.is_finite() {
        return Ok(StepOutcome::Skipped);
    }
    state.t += 1;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    let step = T::lit(lr / c1);
    let c2 = T::lit(c2);
    let eps = T::lit(state.eps);
    let one = T::one();
    for (((p, g), m), v) in params
        .entries_mut()
        .iter_mut()
        .zip(grads.entries())
        .zip(state.m.entries_mut())
        .zip(state.v.entries_mut())
    {
        for k in 0..p.value.len() {
            let gk = g.value[k];
            m.value[k] = b1 * m.value[k] + (one - b1) * gk;
            v.value[k] = b2 * v.value[k] + (one - b2) * gk * gk;
            p.value[k] = p.value[k] - step * m.value[k] / ((v.value[k] / c2).sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}

/// Reduces the learning rate when a higher-is-better metric stalls.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, best: None, bad: 0 }
    }

    pub fn step(&mut self, metric: f64) -> f64 {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                self.lr *= self.factor;
                self.bad = 0;
            }
        }
        self.lr
    }
}

/// One sample's inference output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub video_score: f64,
    /// Per-modality fake score, visual then audio.
    pub modality_scores: [f64; 2],
    pub proposals: Vec<Proposal>,
}

pub fn predict(model: &Model, params: &ParamStore<f32>, sample: &Sample) -> Result<PredictionRecord> {
    let (pred, _) = model.forward(params, &sample.visual, &sample.audio, sample.frames())?;
    Ok(match pred {
        Prediction::Dfd(logits) => {
            let scores = dfd_probabilities(&logits);
            PredictionRecord {
                id: sample.id.clone(),
                video_score: scores[0].max(scores[1]),
                modality_scores: scores,
                proposals: Vec::new(),
            }
        }
        Prediction::Tfl(levels) => {
            let mut proposals = Vec::new();
            let mut scores = [0.0; 2];
            for m in Modality::ALL {
                let fp = average_levels(&levels, m);
                let (raw, _) = decode_sequence(&fp.prob, &fp.d_start, &fp.d_end, DECODE_THRESHOLD, m);
                let kept = merge_proposals(&raw, NMS_IOU);
                scores[m.index()] = kept.first().map_or(0.0, |p| p.confidence);
                proposals.extend(kept);
            }
            proposals.sort_by(crate::intervals::by_confidence_desc);
            PredictionRecord {
                id: sample.id.clone(),
                video_score: scores[0].max(scores[1]),
                modality_scores: scores,
                proposals,
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub samples: usize,
    /// Checkpoint-selection value.
    pub selection: f64,
    pub joint: Option<LocalizationReport>,
    pub visual: Option<LocalizationReport>,
    pub audio: Option<LocalizationReport>,
    /// Video level: fake if any modality is fake.
    pub detection: DetectionReport,
    pub detection_visual: DetectionReport,
    pub detection_audio: DetectionReport,
}

impl MetricReport {
    pub fn compute(task: Task, samples: &[Sample], preds: &[PredictionRecord], pooling: ApPooling) -> Self {
        let records: Vec<EvalRecord> = samples
            .iter()
            .zip(preds)
            .map(|(s, p)| EvalRecord::new(s.id.clone(), p.proposals.clone(), s.intervals.clone(), p.video_score, s.is_fake()))
            .collect();
        let scores: Vec<f64> = preds.iter().map(|p| p.video_score).collect();
        let labels: Vec<bool> = samples.iter().map(|s| s.is_fake()).collect();
        let per = |m: Modality| {
            let s: Vec<f64> = preds.iter().map(|p| p.modality_scores[m.index()]).collect();
            let l: Vec<bool> = samples.iter().map(|x| x.labels[m.index()]).collect();
            DetectionReport::compute(&s, &l)
        };
        let mut report = Self {
            task,
            samples: samples.len(),
            selection: 0.0,
            joint: None,
            visual: None,
            audio: None,
            detection: DetectionReport::compute(&scores, &labels),
            detection_visual: per(Modality::Visual),
            detection_audio: per(Modality::Audio),
        };
        if task == Task::Tfl {
            let joint = LocalizationReport::compute(&joint_view(&records), pooling);
            report.selection = [0.5, 0.75, 0.95].iter().map(|&p| joint.ap(p).unwrap_or(0.0)).sum::<f64>()
                + [50, 20, 10].iter().map(|&n| joint.ar(n).unwrap_or(0.0)).sum::<f64>();
            report.joint = Some(joint);
            report.visual = Some(LocalizationReport::compute(&modality_view(&records, Modality::Visual), pooling));
            report.audio = Some(LocalizationReport::compute(&modality_view(&records, Modality::Audio), pooling));
        } else {
            report.selection = report.detection.auc.unwrap_or(0.0);
        }
        report
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<PredictionRecord>,
}

fn evaluate_params(model: &Model, params: &ParamStore<f32>, samples: &[Sample], pooling: ApPooling) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let predictions = samples.par_iter().map(|s| predict(model, params, s)).collect::<Result<Vec<_>>>()?;
    let report = MetricReport::compute(model.config().task, samples, &predictions, pooling);
    Ok(Evaluation { report, predictions })
}

/// Evaluates a checkpoint; `task` must match the checkpoint's task.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[Sample], task: Task, pooling: ApPooling) -> Result<Evaluation> {
    if checkpoint.config.task != task {
        return Err(Error::TaskMismatch { expected: task.to_string(), found: checkpoint.config.task.to_string() });
    }
    let model = checkpoint.model()?;
    evaluate_params(&model, &checkpoint.params, samples, pooling)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EpochLimit,
    EarlyStop,
    /// Non-finite loss; the best checkpoint so far is kept.
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: MetricReport,
    pub lr: f64,
    pub skipped_steps: usize,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Epoch with the highest selection metric (earliest on ties).
    pub fn best(&self) -> Option<&EpochLog> {
        self.epochs.iter().fold(None, |best: Option<&EpochLog>, e| match best {
            Some(b) if b.val.selection >= e.val.selection => Some(b),
            _ => Some(e),
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).context(|| format!("opening {}", path.display()))?;
        let mut epochs = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.context(|| format!("reading {}", path.display()))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: EpochLog = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { path: path.into(), line: i + 1, detail: e.to_string() })?;
            if epochs.last().is_some_and(|p: &EpochLog| p.epoch >= e.epoch) {
                return Err(Error::Parse { path: path.into(), line: i + 1, detail: "epochs out of order".into() });
            }
            epochs.push(e);
        }
        Ok(Self { epochs })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn best_epoch(&self) -> Option<&EpochLog> {
        self.log.best()
    }
}

pub fn train(cfg: &TrainConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutcome> {
    train_with(cfg, train_set, val_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput("training and validation sets must be non-empty".into()));
    }
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.feature_dim() != cfg.model.d0) {
        return Err(Error::InvalidConfig(format!(
            "model d0={} but {} has {}-dimensional features",
            cfg.model.d0,
            s.id,
            s.feature_dim()
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut params) = Model::new::<f32, _>(cfg.model.clone(), &mut init_rng)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut adam = AdamState::new(&params);
    let mut plateau = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut stop = StopReason::EpochLimit;

    'epochs: for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = plateau.lr;
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut skipped = 0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let members: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = pad_and_mask_batch(&members, cfg.model.f_max)?;
            let (b, g) = match batch_loss(&model, &params, &batch, cfg.focal) {
                Ok(x) => x,
                Err(Error::NonFinite(_)) => {
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if adam_step(&mut params, &g, &mut adam, lr)? == StepOutcome::Skipped {
                skipped += 1;
            }
            sum.focal += b.focal;
            sum.diou += b.diou;
            sum.smooth_l1 += b.smooth_l1;
            sum.total += b.total;
            sum.p += b.p;
            batches += 1;
        }
        let nb = batches as f64;
        let train_loss = LossBreakdown {
            focal: sum.focal / nb,
            diou: sum.diou / nb,
            smooth_l1: sum.smooth_l1 / nb,
            total: sum.total / nb,
            p: sum.p,
        };
        let val = match evaluate_params(&model, &params, val_set, cfg.pooling) {
            Ok(e) => e.report,
            Err(Error::NonFinite(_)) => {
                stop = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        let selection = val.selection;
        if best.as_ref().is_none_or(|(b, _)| selection > *b) {
            best = Some((selection, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        plateau.step(selection);
        let entry = EpochLog { epoch, train: train_loss, val, lr, skipped_steps: skipped, wall_secs: start.elapsed().as_secs_f64() };
        on_epoch(&entry);
        log.epochs.push(entry);
        if since_best >= cfg.patience {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    let params = best.map_or(params, |(_, p)| p);
    Ok(TrainOutcome { checkpoint: Checkpoint { config: cfg.model.clone(), params }, log, stop })
}

/// Writes predictions as JSON lines.
pub fn write_predictions(preds: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).context(|| format!("creating {}", path.display()))?;
    for p in preds {
        writeln!(file, "{}", serde_json::to_string(p).expect("serializable")).context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { path: path.into(), line: i + 1, detail: e.to_string() }))
        .collect()
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EpochLimit => "epoch limit",
            StopReason::EarlyStop => "early stop",
            StopReason::Diverged => "diverged",
        })
    }
}

impl FromStr for ApPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ApPooling::Global),
            "per-video" => Ok(ApPooling::PerVideo),
            other => Err(Error::InvalidInput(format!("unknown AP pooling {other:?}"))),
        }
    }
}
