//! Ablation variants and the paired-run comparison table.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::objectives::{CombineMode, InferenceConfig};
use crate::synthetic::subsample_segments;
use crate::train::{evaluate_predictions, predict_all, train, DataInfo, Metrics, RunManifest, TrainConfig};
use crate::types::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    WithoutTdpp,
    WithoutGpap,
    WithoutDpcl,
    WithoutAvfc,
    /// Which of `l_qa`, `l_vp`+`l_ap` and `l_c` are trained.
    Losses { preference: bool, contrastive: bool },
    Sharing { attn: bool, bias: bool },
    Combine(CombineMode),
    Segments(usize),
}

pub const VALID_NAMES: &str = "full, w/o TDPP, w/o GPAP, w/o DPCL, w/o AVFC, loss:qa, loss:qa+p, loss:qa+c, \
     loss:qa+p+c, share:attn+bias, share:attn, share:bias, share:none, combine:add, combine:mul, \
     combine:wadd, segments:<n>";

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::WithoutTdpp => write!(f, "w/o TDPP"),
            Variant::WithoutGpap => write!(f, "w/o GPAP"),
            Variant::WithoutDpcl => write!(f, "w/o DPCL"),
            Variant::WithoutAvfc => write!(f, "w/o AVFC"),
            Variant::Losses { preference, contrastive } => {
                write!(f, "loss:qa")?;
                if *preference {
                    write!(f, "+p")?;
                }
                if *contrastive {
                    write!(f, "+c")?;
                }
                Ok(())
            }
            Variant::Sharing { attn, bias } => match (attn, bias) {
                (true, true) => write!(f, "share:attn+bias"),
                (true, false) => write!(f, "share:attn"),
                (false, true) => write!(f, "share:bias"),
                (false, false) => write!(f, "share:none"),
            },
            Variant::Combine(CombineMode::Add) => write!(f, "combine:add"),
            Variant::Combine(CombineMode::Mul) => write!(f, "combine:mul"),
            Variant::Combine(CombineMode::WAdd) => write!(f, "combine:wadd"),
            Variant::Segments(n) => write!(f, "segments:{n}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownVariant {
            name: s.to_string(),
            valid: VALID_NAMES.to_string(),
        };
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "full" => Variant::Full,
            "w/o tdpp" | "wo-tdpp" => Variant::WithoutTdpp,
            "w/o gpap" | "wo-gpap" => Variant::WithoutGpap,
            "w/o dpcl" | "wo-dpcl" => Variant::WithoutDpcl,
            "w/o avfc" | "wo-avfc" => Variant::WithoutAvfc,
            "loss:qa" => Variant::Losses {
                preference: false,
                contrastive: false,
            },
            "loss:qa+p" => Variant::Losses {
                preference: true,
                contrastive: false,
            },
            "loss:qa+c" => Variant::Losses {
                preference: false,
                contrastive: true,
            },
            "loss:qa+p+c" => Variant::Losses {
                preference: true,
                contrastive: true,
            },
            "share:attn+bias" => Variant::Sharing { attn: true, bias: true },
            "share:attn" => Variant::Sharing { attn: true, bias: false },
            "share:bias" => Variant::Sharing { attn: false, bias: true },
            "share:none" => Variant::Sharing { attn: false, bias: false },
            other => {
                if let Some(mode) = other.strip_prefix("combine:") {
                    Variant::Combine(mode.parse().map_err(|_| unknown())?)
                } else if let Some(n) = other.strip_prefix("segments:") {
                    match n.parse::<usize>() {
                        Ok(n) if n > 0 => Variant::Segments(n),
                        _ => return Err(unknown()),
                    }
                } else {
                    return Err(unknown());
                }
            }
        })
    }
}

impl Variant {
    /// The model configuration this variant trains.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match *self {
            Variant::WithoutTdpp => c.tdpp = false,
            Variant::WithoutGpap => c.gpap = false,
            Variant::WithoutDpcl => c.lambda_c = 0.0,
            Variant::WithoutAvfc => c.avfc = false,
            Variant::Losses { preference, contrastive } => {
                if !preference {
                    c.lambda_vp = 0.0;
                    c.lambda_ap = 0.0;
                }
                if !contrastive {
                    c.lambda_c = 0.0;
                }
            }
            Variant::Sharing { attn, bias } => {
                c.attn_shared = attn;
                c.bias_shared = bias;
            }
            Variant::Full | Variant::Combine(_) | Variant::Segments(_) => {}
        }
        c
    }

    /// Decoders whose loss is not trained do not vote.
    pub fn inference(&self) -> InferenceConfig {
        match *self {
            Variant::Combine(combine) => InferenceConfig {
                combine,
                ..InferenceConfig::default()
            },
            Variant::Losses { preference: false, .. } => InferenceConfig {
                enable_ap: false,
                enable_vp: false,
                ..InferenceConfig::default()
            },
            _ => InferenceConfig::default(),
        }
    }

    pub fn segments(&self) -> Option<usize> {
        match *self {
            Variant::Segments(n) => Some(n),
            _ => None,
        }
    }

    /// How the variant rewires the model, for run manifests.
    pub fn describe(&self) -> &'static str {
        match self {
            Variant::Full => "all paths and losses",
            Variant::WithoutTdpp => "fused feature replaced by the mean-pooled context; no focus scan or key fusion",
            Variant::WithoutGpap => "preference path, its decoders and the contrastive loss removed",
            Variant::WithoutDpcl => "contrastive weight set to 0",
            Variant::WithoutAvfc => "no focus scan; initial templates feed key fusion directly",
            Variant::Losses { .. } => "loss weights of the excluded terms set to 0",
            Variant::Sharing { .. } => "attention/bias sharing across scan steps as named",
            Variant::Combine(_) => "full model; only the inference combination changes",
            Variant::Segments(_) => "sequences subsampled uniformly in time to the named length; labels unchanged",
        }
    }
}

/// Variant lists for the named suites. The short codes in parentheses of the
/// error message are accepted as aliases.
pub fn suite(name: &str) -> Result<Vec<Variant>> {
    let names: &[&str] = match name {
        "components" | "table6" => &["full", "w/o TDPP", "w/o GPAP", "w/o DPCL", "w/o AVFC"],
        "sharing" | "table7" => &["share:attn+bias", "share:attn", "share:bias", "share:none"],
        "combine" | "table9" => &["combine:add", "combine:mul", "combine:wadd"],
        "losses" | "table10" => &["loss:qa", "loss:qa+p", "loss:qa+c", "loss:qa+p+c"],
        "segments" | "sweept" | "sweepT" => &["segments:2", "segments:4", "segments:8", "segments:12", "segments:16"],
        _ => {
            return Err(Error::UnknownVariant {
                name: name.to_string(),
                valid: "components (table6), sharing (table7), combine (table9), losses (table10), segments (sweepT)".into(),
            })
        }
    };
    names.iter().map(|n| n.parse()).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub description: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub manifest: RunManifest,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn mean_of(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.mean)
    }
}

fn prepare(data: &[Sample], segments: Option<usize>) -> Result<Vec<Sample>> {
    match segments {
        None => Ok(data.to_vec()),
        Some(n) => data.iter().map(|s| subsample_segments(s, n)).collect(),
    }
}

/// Trains every variant once per seed and scores it on `test`. Variants
/// that train the same configuration on the same data share one run.
pub fn ablate(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_data: &[Sample],
    test_data: &[Sample],
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let mut cache: HashMap<(String, Option<usize>, u64), (Vec<Prediction>, RunManifest)> = HashMap::new();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for v in variants {
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = v.apply(base);
            config.seed = seed;
            let key = (config.to_json(), v.segments(), seed);
            let test = prepare(test_data, v.segments())?;
            if !cache.contains_key(&key) {
                let tr = prepare(train_data, v.segments())?;
                let tc = TrainConfig { seed, ..*train_cfg };
                let (trainer, mut manifest) = train(&config, &tc, &tr, DataInfo::of("ablation", &tr))?;
                manifest.variant = Some(v.to_string());
                manifest.flags.insert("variant".into(), v.describe().into());
                let preds = predict_all(&trainer.model, &test)?;
                cache.insert(key.clone(), (preds, manifest));
            }
            let (preds, manifest) = &cache[&key];
            let metrics = evaluate_predictions(&test, preds, &v.inference())?;
            log::info!("{v} seed {seed}: accuracy {:.4}", metrics.accuracy);
            accuracies.push(metrics.accuracy);
            runs.push(AblationRun {
                variant: v.to_string(),
                seed,
                metrics,
                manifest: manifest.clone(),
            });
        }
        rows.push(AblationRow {
            variant: v.to_string(),
            description: v.describe().to_string(),
            seeds: seeds.to_vec(),
            mean: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
            accuracies,
        });
    }
    Ok(AblationTable { rows, runs })
}
