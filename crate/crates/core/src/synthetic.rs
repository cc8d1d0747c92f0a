//! Planted-signal task generator.
//!
//! Each sample targets one modality. Codebook "events" are planted at
//! distinct steps inside the placement window of that modality's sequence;
//! the other modality gets independent decoy events in the same window.
//! Every other step carries the null vector. The question's word features
//! are `[cue(modality), cue(subtype), padding..]` and the sentence feature is
//! the sum of the two cues. All values pass through `f32` so archives round
//! trip bitwise.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{FeatureSequence, Modality, QType, QuestionFeatures, Sample, Subtype};

/// Generator parameters. The codebook and cue vectors are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub segments: usize,
    pub dim: usize,
    pub question_len: usize,
    pub num_answers: usize,
    /// Codebook size `K`, excluding the null vector.
    pub num_events: usize,
    pub noise_sigma: f64,
    /// Inclusive placement bounds `(t0, t1)`.
    pub window: (usize, usize),
    pub subtypes: Vec<Subtype>,
    pub modalities: Vec<Modality>,
    pub decoys: bool,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            segments: 16,
            dim: 32,
            question_len: 3,
            num_answers: 5,
            num_events: 8,
            noise_sigma: 0.1,
            window: (0, 15),
            subtypes: vec![Subtype::Counting, Subtype::Existence, Subtype::Localization],
            modalities: vec![Modality::Audio, Modality::Visual],
            decoys: true,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (t0, t1) = self.window;
        if self.segments == 0 || self.dim == 0 || self.num_answers == 0 {
            return Err(Error::Spec("segments, dim and num_answers must be at least 1".into()));
        }
        if self.question_len < 2 {
            return Err(Error::Spec("question_len must leave room for both cue tokens".into()));
        }
        if t0 > t1 || t1 >= self.segments {
            return Err(Error::Spec(format!(
                "window ({t0}, {t1}) must satisfy t0 <= t1 < {}",
                self.segments
            )));
        }
        if self.num_events < self.num_answers {
            return Err(Error::Spec(format!(
                "codebook size {} is smaller than the answer count {}",
                self.num_events, self.num_answers
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec("noise_sigma must be finite and non-negative".into()));
        }
        if self.subtypes.is_empty() || self.modalities.is_empty() {
            return Err(Error::Spec("at least one subtype and one modality are required".into()));
        }
        let span = t1 - t0 + 1;
        for s in &self.subtypes {
            match s {
                Subtype::Counting if self.num_answers - 1 > span => {
                    return Err(Error::Spec(format!(
                        "counting needs {} distinct steps but the window has {span}",
                        self.num_answers - 1
                    )))
                }
                Subtype::Existence if self.num_answers < 2 => {
                    return Err(Error::Spec("existence needs at least 2 answers".into()))
                }
                Subtype::Localization if self.num_answers < 3 || span < 3 => {
                    return Err(Error::Spec("localization needs 3 answers and a window of at least 3 steps".into()))
                }
                Subtype::Comparative | Subtype::Temporal => {
                    return Err(Error::Spec(format!("subtype {} is not generated", s.as_str())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Copies the task's shapes into a model configuration.
    pub fn fit(&self, config: &mut ModelConfig) {
        config.audio_width = self.dim;
        config.visual_width = self.dim;
        config.text_width = self.dim;
        config.max_segments = config.max_segments.max(self.segments);
        config.max_question_len = config.max_question_len.max(self.question_len);
        config.num_answers = self.num_answers;
    }

    fn labels(&self, subtype: Subtype) -> usize {
        match subtype {
            Subtype::Existence => 2,
            Subtype::Localization => 3,
            _ => self.num_answers,
        }
    }
}

/// What was planted in one sample; enough to recompute its answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub modality: Modality,
    pub subtype: Subtype,
    pub window: (usize, usize),
    /// `(step, codebook row)`, sorted by step.
    pub events: Vec<(usize, usize)>,
    pub decoys: Vec<(usize, usize)>,
}

/// Answer index of a planted configuration.
pub fn oracle_answer(p: &PlantedConfig) -> usize {
    match p.subtype {
        Subtype::Existence => usize::from(!p.events.is_empty()),
        Subtype::Localization => p.events.first().map_or(0, |&(t, _)| window_third(p.window, t)),
        _ => p.events.len(),
    }
}

/// Which third of the inclusive window `(t0, t1)` step `t` falls in.
pub fn window_third((t0, t1): (usize, usize), t: usize) -> usize {
    ((t - t0) * 3 / (t1 - t0 + 1)).min(2)
}

/// A task spec with its codebook and cue vectors materialised.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    /// `K×D` event vectors.
    pub codebook: Tensor,
    /// `1×D` background vector.
    pub null: Tensor,
    pub modality_cues: [Tensor; 2],
    /// Indexed like [`Subtype`] declaration order.
    pub subtype_cues: Vec<Tensor>,
}

fn subtype_slot(s: Subtype) -> usize {
    match s {
        Subtype::Counting => 0,
        Subtype::Existence => 1,
        Subtype::Localization => 2,
        Subtype::Comparative => 3,
        Subtype::Temporal => 4,
    }
}

fn modality_slot(m: Modality) -> usize {
    match m {
        Modality::Audio => 0,
        Modality::Visual => 1,
    }
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.dim;
        let codebook = Tensor::random_normal(spec.num_events, d, 1.0, &mut rng).round_to_f32();
        let null = Tensor::random_normal(1, d, 1.0, &mut rng).round_to_f32();
        let modality_cues = [
            Tensor::random_normal(1, d, 1.0, &mut rng).round_to_f32(),
            Tensor::random_normal(1, d, 1.0, &mut rng).round_to_f32(),
        ];
        let subtype_cues = (0..5)
            .map(|_| Tensor::random_normal(1, d, 1.0, &mut rng).round_to_f32())
            .collect();
        Ok(Self {
            spec,
            codebook,
            null,
            modality_cues,
            subtype_cues,
        })
    }

    fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index + 1);
        rng
    }

    /// The planted configuration of sample `index`. Modality and subtype
    /// cycle with the index and labels are stratified within each
    /// (modality, subtype) cell.
    pub fn plant(&self, index: u64) -> PlantedConfig {
        let s = &self.spec;
        let cells = (s.modalities.len() * s.subtypes.len()) as u64;
        let cell = (index % cells) as usize;
        let round = index / cells;
        let modality = s.modalities[cell % s.modalities.len()];
        let subtype = s.subtypes[cell / s.modalities.len()];
        let label = (round % s.labels(subtype) as u64) as usize;

        let mut rng = self.rng_for(index);
        let (t0, t1) = s.window;
        let span = t1 - t0 + 1;
        let code = |rng: &mut ChaCha8Rng| rng.random_range(0..s.num_events);
        let mut events: Vec<(usize, usize)> = match subtype {
            Subtype::Localization => {
                let slots: Vec<usize> = (t0..=t1).filter(|&t| window_third(s.window, t) == label).collect();
                let t = slots[rng.random_range(0..slots.len())];
                vec![(t, code(&mut rng))]
            }
            _ => {
                let n = match subtype {
                    Subtype::Existence if label == 1 => rng.random_range(1..s.num_answers.min(span + 1)),
                    Subtype::Existence => 0,
                    _ => label,
                };
                index::sample(&mut rng, span, n)
                    .into_iter()
                    .map(|i| (t0 + i, code(&mut rng)))
                    .collect()
            }
        };
        events.sort_unstable();
        let mut decoys: Vec<(usize, usize)> = if s.decoys {
            let n = rng.random_range(0..s.num_answers.min(span + 1));
            index::sample(&mut rng, span, n)
                .into_iter()
                .map(|i| (t0 + i, code(&mut rng)))
                .collect()
        } else {
            Vec::new()
        };
        decoys.sort_unstable();
        PlantedConfig {
            modality,
            subtype,
            window: s.window,
            events,
            decoys,
        }
    }

    fn render(&self, planted: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Tensor {
        let s = &self.spec;
        let mut out = Tensor::zeros(s.segments, s.dim);
        for t in 0..s.segments {
            let src = match planted.iter().find(|&&(pt, _)| pt == t) {
                Some(&(_, k)) => self.codebook.row(k),
                None => self.null.row(0),
            };
            out.row_mut(t).copy_from_slice(src);
        }
        if s.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, s.noise_sigma).expect("validated sigma");
            for v in out.data_mut() {
                *v += normal.sample(rng);
            }
        }
        out.round_to_f32()
    }

    pub fn question(&self, modality: Modality, subtype: Subtype) -> QuestionFeatures {
        let s = &self.spec;
        let mc = &self.modality_cues[modality_slot(modality)];
        let sc = &self.subtype_cues[subtype_slot(subtype)];
        let mut word = Tensor::zeros(s.question_len, s.dim);
        word.row_mut(0).copy_from_slice(mc.row(0));
        word.row_mut(1).copy_from_slice(sc.row(0));
        let sentence = mc.zip_map(sc, |a, b| a + b).round_to_f32();
        QuestionFeatures { word, sentence }
    }

    /// Renders sample `index` from its planted configuration.
    pub fn sample_from(&self, index: u64, planted: &PlantedConfig) -> Sample {
        let mut rng = self.rng_for(index);
        // Noise comes from a separate stream so planting and rendering are independent.
        rng.set_word_pos(1 << 20);
        let target = self.render(&planted.events, &mut rng);
        let decoy = self.render(&planted.decoys, &mut rng);
        let (audio, visual) = match planted.modality {
            Modality::Audio => (target, decoy),
            Modality::Visual => (decoy, target),
        };
        Sample {
            audio: FeatureSequence {
                modality: Modality::Audio,
                data: audio,
            },
            visual: FeatureSequence {
                modality: Modality::Visual,
                data: visual,
            },
            question: self.question(planted.modality, planted.subtype),
            answer: oracle_answer(planted),
            qtype: QType {
                scope: planted.modality.into(),
                subtype: planted.subtype,
            },
        }
    }

    pub fn gen_sample(&self, index: u64) -> Sample {
        self.sample_from(index, &self.plant(index))
    }

    /// Samples `start..start + n`.
    pub fn generate(&self, start: u64, n: usize) -> Vec<Sample> {
        (start..start + n as u64).map(|i| self.gen_sample(i)).collect()
    }
}

/// Keeps `t_prime` segments spread evenly over the sequence; labels are
/// left unchanged.
pub fn subsample_segments(sample: &Sample, t_prime: usize) -> Result<Sample> {
    let t = sample.segments();
    if t_prime == 0 || t_prime > t {
        return Err(Error::Range(format!("cannot keep {t_prime} of {t} segments")));
    }
    let keep: Vec<usize> = (0..t_prime).map(|i| i * t / t_prime).collect();
    let pick = |src: &Tensor| {
        let mut out = Tensor::zeros(t_prime, src.cols());
        for (r, &k) in keep.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(k));
        }
        out
    };
    let mut out = sample.clone();
    out.audio.data = pick(&sample.audio.data);
    out.visual.data = pick(&sample.visual.data);
    Ok(out)
}
