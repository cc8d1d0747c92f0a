//! Epoch loop, evaluation and the focus-trajectory probe.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{AvMaster, ForwardOptions, Prediction};
use crate::objectives::{loss_total_for, InferenceConfig, LossBreakdown};
use crate::optim::{Adam, Schedule};
use crate::types::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            schedule: Schedule::default(),
            seed: 0,
        }
    }
}

/// Sample order for one epoch. Depends only on `(seed, epoch)`, so a
/// resumed run needs no generator state.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// SHA-256 over every tensor bit pattern, answer and question type.
pub fn dataset_hash(data: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in data {
        for t in [&s.audio.data, &s.visual.data, &s.question.word, &s.question.sentence] {
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.update((s.answer as u64).to_le_bytes());
        h.update(s.qtype.to_string().as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn add(&mut self, hit: bool) {
        self.correct += usize::from(hit);
        self.total += 1;
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted means over the epoch's batches.
    pub losses: LossBreakdown,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub accuracy: f64,
    pub per_qtype: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub source: String,
    pub samples: usize,
    pub sha256: String,
}

impl DataInfo {
    pub fn of(source: impl Into<String>, data: &[Sample]) -> Self {
        Self {
            source: source.into(),
            samples: data.len(),
            sha256: dataset_hash(data),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub data: DataInfo,
    /// Ablation variant name and how it rewired the model.
    pub variant: Option<String>,
    pub flags: BTreeMap<String, String>,
    pub epochs: Vec<EpochRecord>,
    /// Kept apart from the reproducible fields.
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(config: &ModelConfig, train: &TrainConfig, data: DataInfo) -> Self {
        let flags = [
            ("tdpp", config.tdpp),
            ("gpap", config.gpap),
            ("avfc", config.avfc),
            ("attn_shared", config.attn_shared),
            ("bias_shared", config.bias_shared),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .chain([("tau".to_string(), config.tau.to_string())])
        .collect();
        Self {
            config: config.clone(),
            train: *train,
            data,
            variant: None,
            flags,
            epochs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }
}

fn qtype_accuracy(tallies: BTreeMap<String, Tally>) -> BTreeMap<String, f64> {
    tallies.into_iter().map(|(k, t)| (k, t.accuracy())).collect()
}

/// A model plus its optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: AvMaster,
    pub opt: Adam,
    pub train: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: AvMaster, train: TrainConfig) -> Result<Self> {
        if train.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let opt = Adam::new(&model.params, train.schedule);
        Ok(Self {
            model,
            opt,
            train,
            epoch: 0,
        })
    }

    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.epoch;
        let lr = self.train.schedule.lr_at(epoch);
        let order = epoch_order(self.train.seed, epoch, data.len());
        let mut sums = [0.0; 4];
        let mut tally = Tally::default();
        let mut per_qtype: BTreeMap<String, Tally> = BTreeMap::new();
        for (b, idx) in order.chunks(self.train.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let (outcome, grads) = self.model.batch_gradients(&batch)?;
            let l = outcome.losses;
            for (part, v) in [("l_qa", l.l_qa), ("l_vp", l.l_vp), ("l_ap", l.l_ap), ("l_c", l.l_c), ("total", l.total)] {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b, part });
                }
            }
            self.opt.update(&mut self.model.params, &grads, lr);
            for (s, v) in sums.iter_mut().zip(l.parts()) {
                *s += v * batch.len() as f64;
            }
            for (s, p) in batch.iter().zip(&outcome.predictions) {
                let hit = p.combine(&InferenceConfig::default())?.0 == s.answer;
                tally.add(hit);
                per_qtype.entry(s.qtype.to_string()).or_default().add(hit);
            }
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochRecord {
            epoch,
            lr,
            losses: loss_total_for(sums.map(|s| s / n), &self.model.config),
            accuracy: tally.accuracy(),
            per_qtype: qtype_accuracy(per_qtype),
        })
    }

    /// Runs the remaining epochs, appending to `manifest` and handing each
    /// record to `sink` as it completes.
    pub fn fit(
        &mut self,
        data: &[Sample],
        manifest: &mut RunManifest,
        mut sink: impl FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<()> {
        let start = Instant::now();
        while self.epoch < self.train.epochs {
            let rec = self.run_epoch(data)?;
            log::info!(
                "epoch {} lr {:.2e} loss {:.4} acc {:.3}",
                rec.epoch,
                rec.lr,
                rec.losses.total,
                rec.accuracy
            );
            sink(&rec)?;
            manifest.epochs.push(rec);
        }
        manifest.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(())
    }
}

/// Initialises a model from `config.seed` and trains it on `data`.
pub fn train(config: &ModelConfig, train: &TrainConfig, data: &[Sample], info: DataInfo) -> Result<(Trainer, RunManifest)> {
    let model = AvMaster::init(config.clone(), config.seed)?;
    let mut trainer = Trainer::new(model, *train)?;
    let mut manifest = RunManifest::new(config, train, info);
    trainer.fit(data, &mut manifest, |_| Ok(()))?;
    Ok((trainer, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderAccuracy {
    pub qa: f64,
    pub ap: Option<f64>,
    pub vp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy: f64,
    pub per_qtype: BTreeMap<String, Tally>,
    /// Each decoder's own argmax accuracy, independent of the combination.
    pub per_decoder: DecoderAccuracy,
    pub inference: InferenceConfig,
}

fn score(data: &[Sample], preds: &[Prediction], ic: &InferenceConfig) -> Result<Metrics> {
    let mut tally = Tally::default();
    let mut per_qtype: BTreeMap<String, Tally> = BTreeMap::new();
    let (mut qa, mut ap, mut vp) = (Tally::default(), Tally::default(), Tally::default());
    for (s, p) in data.iter().zip(preds) {
        let hit = p.combine(ic)?.0 == s.answer;
        tally.add(hit);
        per_qtype.entry(s.qtype.to_string()).or_default().add(hit);
        qa.add(p.qa.probs.argmax() == s.answer);
        if let Some(d) = &p.ap {
            ap.add(d.probs.argmax() == s.answer);
        }
        if let Some(d) = &p.vp {
            vp.add(d.probs.argmax() == s.answer);
        }
    }
    Ok(Metrics {
        samples: data.len(),
        accuracy: tally.accuracy(),
        per_qtype,
        per_decoder: DecoderAccuracy {
            qa: qa.accuracy(),
            ap: (ap.total > 0).then(|| ap.accuracy()),
            vp: (vp.total > 0).then(|| vp.accuracy()),
        },
        inference: *ic,
    })
}

pub fn predict_all(model: &AvMaster, data: &[Sample]) -> Result<Vec<Prediction>> {
    data.iter().map(|s| model.predict(s)).collect()
}

pub fn evaluate(model: &AvMaster, data: &[Sample], ic: &InferenceConfig) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    score(data, &predict_all(model, data)?, ic)
}

/// Scores already computed predictions under another inference setting.
pub fn evaluate_predictions(data: &[Sample], preds: &[Prediction], ic: &InferenceConfig) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.len() != preds.len() {
        return Err(Error::Shape(format!("{} samples but {} predictions", data.len(), preds.len())));
    }
    score(data, preds, ic)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub step: usize,
    pub accuracy: f64,
}

/// Accuracy when the focus templates after scan step `k` stand in for the
/// final focus features, for every `k`.
pub fn probe_focus_trajectory(model: &AvMaster, data: &[Sample], ic: &InferenceConfig) -> Result<Vec<ProbePoint>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(model.config.tdpp && model.config.avfc) {
        return Err(Error::Config("the probe needs the focus scan; tdpp and avfc must be enabled".into()));
    }
    let steps = data[0].segments();
    if data.iter().any(|s| s.segments() != steps) {
        return Err(Error::Shape("probe samples must share one segment count".into()));
    }
    let mut tallies = vec![Tally::default(); steps];
    for s in data {
        let trajectory = model.focus_trajectory(s)?;
        for (k, (a, v)) in trajectory.into_iter().enumerate() {
            let opts = ForwardOptions {
                focus_override: Some((a, v)),
            };
            let p = model.predict_with(s, &opts)?;
            tallies[k].add(p.combine(ic)?.0 == s.answer);
        }
    }
    Ok(tallies
        .iter()
        .enumerate()
        .map(|(step, t)| ProbePoint {
            step,
            accuracy: t.accuracy(),
        })
        .collect())
}
