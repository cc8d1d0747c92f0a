//! Model configuration, serialised as one flat JSON object.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of two readings of the contrastive denominator to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// Negatives are sample `i`'s fused feature against sample `k`'s
    /// preference features.
    CrossPair,
    /// Negatives are other samples' positive scores, as the formula is
    /// literally written.
    Literal,
}

/// Row order of the concatenated multimodal context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextOrder {
    AudioVisualWord,
    VisualAudioWord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model width `D`.
    pub dim: usize,
    /// Template length `M`.
    pub template_len: usize,
    /// Maximum segment count `T_max`.
    pub max_segments: usize,
    /// Maximum question token count `L_max`.
    pub max_question_len: usize,
    /// Answer vocabulary size `C`.
    pub num_answers: usize,
    pub num_heads: usize,
    /// Raw input widths; each stream has its own projection to `dim`.
    pub audio_width: usize,
    pub visual_width: usize,
    pub text_width: usize,
    /// Contrastive temperature.
    pub tau: f64,
    pub lambda_qa: f64,
    pub lambda_vp: f64,
    pub lambda_ap: f64,
    pub lambda_c: f64,
    /// Focus-sampling attention blocks shared across time steps.
    pub attn_shared: bool,
    /// Focus-sampling biases shared across time steps.
    pub bias_shared: bool,
    /// Use one bias tensor for both additions in a focus step.
    pub tie_focus_bias: bool,
    /// Feed-forward sublayers inside attention blocks.
    pub ffn: bool,
    pub context_order: ContextOrder,
    pub contrastive_mode: ContrastiveMode,
    /// Temporal dynamic perception path. When off, the fused feature is
    /// the mean-pooled context.
    pub tdpp: bool,
    /// Global preference activation path, its decoders and losses.
    pub gpap: bool,
    /// Focus scan. When off, the initial templates feed fusion directly.
    pub avfc: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            template_len: 8,
            max_segments: 60,
            max_question_len: 16,
            num_answers: 42,
            num_heads: 8,
            audio_width: 128,
            visual_width: 768,
            text_width: 768,
            tau: 0.1,
            lambda_qa: 1.0,
            lambda_vp: 1.0,
            lambda_ap: 1.0,
            lambda_c: 1.0,
            attn_shared: true,
            bias_shared: false,
            tie_focus_bias: false,
            ffn: true,
            context_order: ContextOrder::AudioVisualWord,
            contrastive_mode: ContrastiveMode::CrossPair,
            tdpp: true,
            gpap: true,
            avfc: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by gradient checks and oracle tests.
    pub fn tiny() -> Self {
        Self {
            dim: 8,
            template_len: 2,
            max_segments: 4,
            max_question_len: 3,
            num_answers: 5,
            num_heads: 2,
            audio_width: 8,
            visual_width: 8,
            text_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("template_len", self.template_len),
            ("max_segments", self.max_segments),
            ("max_question_len", self.max_question_len),
            ("num_answers", self.num_answers),
            ("num_heads", self.num_heads),
            ("audio_width", self.audio_width),
            ("visual_width", self.visual_width),
            ("text_width", self.text_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by num_heads {}",
                self.dim, self.num_heads
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, l) in self.lambdas_named() {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {l}")));
            }
        }
        Ok(())
    }

    pub fn lambdas(&self) -> [f64; 4] {
        [self.lambda_qa, self.lambda_vp, self.lambda_ap, self.lambda_c]
    }

    fn lambdas_named(&self) -> [(&'static str, f64); 4] {
        [
            ("lambda_qa", self.lambda_qa),
            ("lambda_vp", self.lambda_vp),
            ("lambda_ap", self.lambda_ap),
            ("lambda_c", self.lambda_c),
        ]
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
