//! Samples, feature sequences and question types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Audio, Modality::Visual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Audio => Modality::Visual,
            Modality::Visual => Modality::Audio,
        }
    }
}

/// Which modality a question is about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QaScope {
    Audio,
    Visual,
    AudioVisual,
}

impl QaScope {
    pub fn as_str(self) -> &'static str {
        match self {
            QaScope::Audio => "A-QA",
            QaScope::Visual => "V-QA",
            QaScope::AudioVisual => "AV-QA",
        }
    }
}

impl From<Modality> for QaScope {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Audio => QaScope::Audio,
            Modality::Visual => QaScope::Visual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    Counting,
    Existence,
    Localization,
    Comparative,
    Temporal,
}

impl Subtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Subtype::Counting => "counting",
            Subtype::Existence => "existence",
            Subtype::Localization => "localization",
            Subtype::Comparative => "comparative",
            Subtype::Temporal => "temporal",
        }
    }
}

/// Question type tag, written `"<scope>/<subtype>"`, e.g. `"A-QA/counting"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QType {
    pub scope: QaScope,
    pub subtype: Subtype,
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.scope.as_str(), self.subtype.as_str())
    }
}

impl FromStr for QType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::format("qtype", format!("unrecognised question type {s:?}"));
        let (scope, subtype) = s.split_once('/').ok_or_else(bad)?;
        let scope = match scope {
            "A-QA" => QaScope::Audio,
            "V-QA" => QaScope::Visual,
            "AV-QA" => QaScope::AudioVisual,
            _ => return Err(bad()),
        };
        let subtype = match subtype {
            "counting" => Subtype::Counting,
            "existence" => Subtype::Existence,
            "localization" => Subtype::Localization,
            "comparative" => Subtype::Comparative,
            "temporal" => Subtype::Temporal,
            _ => return Err(bad()),
        };
        Ok(QType { scope, subtype })
    }
}

impl Serialize for QType {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One modality's per-segment features, `T×width`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub data: Tensor,
}

impl FeatureSequence {
    pub fn new(modality: Modality, data: Tensor) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Shape(format!("{} sequence has no segments", modality.as_str())));
        }
        if !data.is_finite() {
            return Err(Error::Numeric(format!("{} features contain non-finite values", modality.as_str())));
        }
        Ok(Self { modality, data })
    }

    pub fn segments(&self) -> usize {
        self.data.rows()
    }

    pub fn width(&self) -> usize {
        self.data.cols()
    }
}

/// Word-level (`L×width`) and sentence-level (`1×width`) question features.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionFeatures {
    pub word: Tensor,
    pub sentence: Tensor,
}

impl QuestionFeatures {
    pub fn new(word: Tensor, sentence: Tensor) -> Result<Self> {
        if word.rows() == 0 {
            return Err(Error::Shape("question has no word tokens".into()));
        }
        if sentence.rows() != 1 || sentence.cols() != word.cols() {
            return Err(Error::Shape(format!(
                "sentence feature must be 1x{}, got {}x{}",
                word.cols(),
                sentence.rows(),
                sentence.cols()
            )));
        }
        if !word.is_finite() || !sentence.is_finite() {
            return Err(Error::Numeric("question features contain non-finite values".into()));
        }
        Ok(Self { word, sentence })
    }

    pub fn tokens(&self) -> usize {
        self.word.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub audio: FeatureSequence,
    pub visual: FeatureSequence,
    pub question: QuestionFeatures,
    /// Ground-truth answer index; every decoder is trained against it.
    pub answer: usize,
    pub qtype: QType,
}

impl Sample {
    pub fn segments(&self) -> usize {
        self.audio.segments()
    }

    pub fn features(&self, m: Modality) -> &FeatureSequence {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    /// Checks the sample against a model configuration.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.audio.segments() != self.visual.segments() {
            return Err(Error::Shape(format!(
                "audio has {} segments but visual has {}",
                self.audio.segments(),
                self.visual.segments()
            )));
        }
        if self.segments() > config.max_segments {
            return Err(Error::Config(format!(
                "{} segments exceed max_segments {}",
                self.segments(),
                config.max_segments
            )));
        }
        if self.question.tokens() > config.max_question_len {
            return Err(Error::Config(format!(
                "{} question tokens exceed max_question_len {}",
                self.question.tokens(),
                config.max_question_len
            )));
        }
        let widths = [
            ("audio", self.audio.width(), config.audio_width),
            ("visual", self.visual.width(), config.visual_width),
            ("text", self.question.word.cols(), config.text_width),
        ];
        for (name, got, want) in widths {
            if got != want {
                return Err(Error::Shape(format!("{name} width {got} does not match configured {want}")));
            }
        }
        if self.answer >= config.num_answers {
            return Err(Error::Range(format!(
                "answer {} outside [0, {})",
                self.answer, config.num_answers
            )));
        }
        Ok(())
    }
}
