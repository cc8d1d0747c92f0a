//! Named parameter tensors, their gradient accumulators, and the
//! architecture declaration that decides which tensors exist.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation for templates and focus biases.
pub const TEMPLATE_INIT_STD: f64 = 0.02;

/// Width multiplier of the feed-forward sublayer inside attention blocks.
pub const FFN_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Per-stream input projections to the model width.
    Projection,
    Focus,
    Fusion,
    Preference,
    DecoderMultimodal,
    DecoderAudio,
    DecoderVisual,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Projection,
        ParamGroup::Focus,
        ParamGroup::Fusion,
        ParamGroup::Preference,
        ParamGroup::DecoderMultimodal,
        ParamGroup::DecoderAudio,
        ParamGroup::DecoderVisual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Projection => "projection",
            ParamGroup::Focus => "focus",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Preference => "preference",
            ParamGroup::DecoderMultimodal => "decoder_multimodal",
            ParamGroup::DecoderAudio => "decoder_audio",
            ParamGroup::DecoderVisual => "decoder_visual",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with variance `1 / fan_in`, where fan-in is the row count.
    FanIn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        let mut index = HashMap::with_capacity(specs.len());
        for spec in specs {
            let value = match spec.init {
                Init::Zeros => Tensor::zeros(spec.rows, spec.cols),
                Init::Ones => Tensor::filled(spec.rows, spec.cols, 1.0),
                Init::Normal(std) => Tensor::random_normal(spec.rows, spec.cols, std, &mut rng),
                Init::FanIn => {
                    Tensor::random_normal(spec.rows, spec.cols, 1.0 / (spec.rows as f64).sqrt(), &mut rng)
                }
            };
            let id = ParamId(params.len());
            if index.insert(spec.name.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate parameter name {}", spec.name)));
            }
            params.push(Param {
                name: spec.name.clone(),
                group: spec.group,
                grad: Tensor::zeros(spec.rows, spec.cols),
                value,
            });
        }
        Ok(Self { params, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|id| &self.params[id.0].value)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|id| &mut self.params[id.0].value)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.scale_assign(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }
}

/// Declares every tensor the configured architecture uses, in a fixed order.
pub fn declare(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut d = Declarer {
        specs: Vec::new(),
        dim: config.dim,
        ffn: config.ffn,
    };
    let dim = config.dim;
    let m = config.template_len;

    use ParamGroup::*;
    d.linear("proj.audio", Projection, config.audio_width, dim);
    d.linear("proj.visual", Projection, config.visual_width, dim);
    d.linear("proj.word", Projection, config.text_width, dim);
    d.linear("proj.sentence", Projection, config.text_width, dim);

    d.block("fusion.context", Fusion, false);
    if config.tdpp {
        for modality in ["audio", "visual"] {
            d.tensor(format!("focus.{modality}.template"), Focus, m, dim, Init::Normal(TEMPLATE_INIT_STD));
            if config.avfc {
                let steps: Vec<Option<usize>> = if config.attn_shared {
                    vec![None]
                } else {
                    (0..config.max_segments).map(Some).collect()
                };
                for step in steps {
                    let p = focus_block_prefix(modality, step);
                    d.block(&format!("{p}.sab1"), Focus, false);
                    d.block(&format!("{p}.sab2"), Focus, false);
                    d.block(&format!("{p}.cab"), Focus, true);
                }
                let slots: &[&str] = if config.tie_focus_bias {
                    &["inner"]
                } else {
                    &["inner", "outer"]
                };
                for slot in slots {
                    if config.bias_shared {
                        d.tensor(focus_bias_name(modality, slot, None), Focus, m, dim, Init::Normal(TEMPLATE_INIT_STD));
                    } else {
                        for k in 0..config.max_segments {
                            d.tensor(focus_bias_name(modality, slot, Some(k)), Focus, m, dim, Init::Normal(TEMPLATE_INIT_STD));
                        }
                    }
                }
            }
            d.linear(&format!("fusion.{modality}.linear"), Fusion, dim, dim);
            d.block(&format!("fusion.{modality}.sab"), Fusion, false);
        }
        d.linear("fusion.out", Fusion, dim, dim);
    }

    if config.gpap {
        for modality in ["audio", "visual"] {
            d.block(&format!("preference.{modality}.sab"), Preference, false);
            d.block(&format!("preference.{modality}.cab"), Preference, true);
            d.linear(&format!("preference.{modality}.mlp.fc1"), Preference, dim, dim);
            d.linear(&format!("preference.{modality}.mlp.fc2"), Preference, dim, dim);
        }
    }

    d.block("decoder.multimodal.block0", DecoderMultimodal, false);
    d.block("decoder.multimodal.block1", DecoderMultimodal, false);
    d.norm("decoder.multimodal.ln_f", DecoderMultimodal);
    d.linear("decoder.multimodal.head", DecoderMultimodal, dim, config.num_answers);
    if config.gpap {
        for (modality, group) in [("audio", DecoderAudio), ("visual", DecoderVisual)] {
            d.block(&format!("decoder.{modality}.block0"), group, false);
            d.norm(&format!("decoder.{modality}.ln_f"), group);
            d.linear(&format!("decoder.{modality}.head"), group, dim, config.num_answers);
        }
    }
    d.specs
}

pub(crate) fn focus_block_prefix(modality: &str, step: Option<usize>) -> String {
    match step {
        None => format!("focus.{modality}"),
        Some(k) => format!("focus.{modality}.step{k}"),
    }
}

pub(crate) fn focus_bias_name(modality: &str, slot: &str, step: Option<usize>) -> String {
    match step {
        None => format!("focus.{modality}.bias.{slot}"),
        Some(k) => format!("focus.{modality}.bias.{slot}.{k}"),
    }
}

struct Declarer {
    specs: Vec<ParamSpec>,
    dim: usize,
    ffn: bool,
}

impl Declarer {
    fn tensor(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, init: Init) {
        self.specs.push(ParamSpec {
            name,
            group,
            rows,
            cols,
            init,
        });
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, fan_in: usize, fan_out: usize) {
        self.tensor(format!("{prefix}.w"), group, fan_in, fan_out, Init::FanIn);
        self.tensor(format!("{prefix}.b"), group, 1, fan_out, Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, group: ParamGroup) {
        self.tensor(format!("{prefix}.g"), group, 1, self.dim, Init::Ones);
        self.tensor(format!("{prefix}.b"), group, 1, self.dim, Init::Zeros);
    }

    fn block(&mut self, prefix: &str, group: ParamGroup, cross: bool) {
        let dim = self.dim;
        self.norm(&format!("{prefix}.ln1"), group);
        if cross {
            self.norm(&format!("{prefix}.ln_kv"), group);
        }
        // Keys carry no bias: a shared key offset shifts every score in a
        // row equally and never receives gradient.
        self.linear(&format!("{prefix}.attn.q"), group, dim, dim);
        self.tensor(format!("{prefix}.attn.k.w"), group, dim, dim, Init::FanIn);
        self.linear(&format!("{prefix}.attn.v"), group, dim, dim);
        self.linear(&format!("{prefix}.attn.o"), group, dim, dim);
        if self.ffn {
            self.norm(&format!("{prefix}.ln2"), group);
            self.linear(&format!("{prefix}.ffn.fc1"), group, dim, FFN_EXPANSION * dim);
            self.linear(&format!("{prefix}.ffn.fc2"), group, FFN_EXPANSION * dim, dim);
        }
    }
}
