//! Finite-difference verification of the batch gradient, grouped by
//! parameter group, with a dead-parameter detector.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::AvMaster;
use crate::params::ParamId;
use crate::tensor::Tensor;
use crate::types::{FeatureSequence, Modality, QType, QaScope, QuestionFeatures, Sample, Subtype};

/// A sample with standard-normal features at the configured widths.
pub fn random_sample(config: &ModelConfig, segments: usize, tokens: usize, rng: &mut ChaCha8Rng) -> Sample {
    let audio = Tensor::random_normal(segments, config.audio_width, 1.0, rng);
    let visual = Tensor::random_normal(segments, config.visual_width, 1.0, rng);
    let word = Tensor::random_normal(tokens, config.text_width, 1.0, rng);
    let sentence = Tensor::random_normal(1, config.text_width, 1.0, rng);
    Sample {
        audio: FeatureSequence {
            modality: Modality::Audio,
            data: audio,
        },
        visual: FeatureSequence {
            modality: Modality::Visual,
            data: visual,
        },
        question: QuestionFeatures { word, sentence },
        answer: rng.random_range(0..config.num_answers),
        qtype: QType {
            scope: QaScope::AudioVisual,
            subtype: Subtype::Counting,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub batch: usize,
    /// Check at most this many entries per tensor (evenly strided); 0 = all.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            batch: 2,
            max_entries: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub tensors: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: BTreeMap<String, GroupReport>,
    /// Tensors with an all-zero gradient that are not structurally inert.
    pub dead: Vec<String>,
    /// Tensors exempted because their gradient is zero by construction.
    pub inert: Vec<String>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the weighted total loss on a random
/// batch with central differences, for every parameter tensor.
pub fn gradcheck(config: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.batch == 0 {
        return Err(Error::Config("gradcheck batch must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = AvMaster::init(config.clone(), opts.seed)?;
    // Perturb away from the zero/one initialisation of biases and norms so
    // every path carries signal.
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.value_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let samples: Vec<Sample> = (0..opts.batch)
        .map(|_| random_sample(config, config.max_segments, config.max_question_len, &mut rng))
        .collect();
    let batch: Vec<&Sample> = samples.iter().collect();
    let (_, grads) = model.batch_gradients(&batch)?;
    let mut analytic: Vec<Option<Tensor>> = vec![None; model.params.len()];
    for (id, g) in grads {
        analytic[id.0] = Some(g);
    }
    let inert = model.structurally_inert();

    let mut groups: BTreeMap<String, GroupReport> = BTreeMap::new();
    let mut dead = Vec::new();
    let mut inert_names = Vec::new();
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let name = model.params.get(id).name.clone();
        let group = model.params.group_of(id).to_string();
        let len = model.params.value(id).len();
        let zero = Tensor::zeros(model.params.value(id).rows(), model.params.value(id).cols());
        let a = analytic[id.0].clone().unwrap_or(zero);
        let is_inert = inert.contains(&id);
        if is_inert {
            inert_names.push(name.clone());
        } else if a.data().iter().all(|&g| g == 0.0) {
            dead.push(name.clone());
        }
        let stride = if opts.max_entries == 0 || len <= opts.max_entries {
            1
        } else {
            len.div_ceil(opts.max_entries)
        };
        let report = groups.entry(group).or_default();
        report.tensors += 1;
        for k in (0..len).step_by(stride) {
            let orig = model.params.value(id).data()[k];
            model.params.value_mut(id).data_mut()[k] = orig + opts.step;
            let plus = model.batch_loss(&batch)?.losses.total;
            model.params.value_mut(id).data_mut()[k] = orig - opts.step;
            let minus = model.batch_loss(&batch)?.losses.total;
            model.params.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(a.data()[k], numeric, opts.floor);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = format!("{name}[{k}]");
                }
            }
        }
    }
    let passed = dead.is_empty() && groups.values().all(|g| g.max_rel_error <= opts.tolerance);
    Ok(GradcheckReport {
        groups,
        dead,
        inert: inert_names,
        tolerance: opts.tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_the_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
