//! Audio-visual focus capture: a learnable `M×D` template scans a feature
//! sequence one segment at a time.
//!
//! One focus step at time `k`, for segment feature `f` (`1×D`, repeated to
//! `M` rows) and previous template `c`:
//!
//! ```text
//! tp1 = repeat(f) + c
//! tp2 = SAB2(SAB1(tp1) + bias_inner) + bias_outer
//! c'  = CAB(query = tp2, key/value = repeat(f))
//! ```
//!
//! The scan is a left fold over `k = 0..T-1` starting from the template
//! parameter; its final state is the focus feature.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{cab, sab, AttentionBlock};
use crate::params::{focus_bias_name, focus_block_prefix, ParamId, ParameterStore};
use crate::types::Modality;

/// The three attention blocks used by one focus step.
#[derive(Clone, Copy, Debug)]
pub struct FocusBlocks {
    pub sab1: AttentionBlock,
    pub sab2: AttentionBlock,
    pub cab: AttentionBlock,
}

impl FocusBlocks {
    fn lookup(store: &ParameterStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            sab1: AttentionBlock::lookup(store, &format!("{prefix}.sab1"), heads, false)?,
            sab2: AttentionBlock::lookup(store, &format!("{prefix}.sab2"), heads, false)?,
            cab: AttentionBlock::lookup(store, &format!("{prefix}.cab"), heads, true)?,
        })
    }
}

/// Learned focus biases for one modality. Holds one entry when biases
/// are shared across time steps, otherwise one per step up to `T_max`.
/// When the two additions are tied, `inner` and `outer` alias.
#[derive(Clone, Debug)]
pub struct BiasBank {
    inner: Vec<ParamId>,
    outer: Vec<ParamId>,
    shared: bool,
}

impl BiasBank {
    fn lookup(store: &ParameterStore, config: &ModelConfig, modality: &str) -> Result<Self> {
        let steps: Vec<Option<usize>> = if config.bias_shared {
            vec![None]
        } else {
            (0..config.max_segments).map(Some).collect()
        };
        let fetch = |slot: &str| -> Result<Vec<ParamId>> {
            steps.iter().map(|k| store.id(&focus_bias_name(modality, slot, *k))).collect()
        };
        let inner = fetch("inner")?;
        let outer = if config.tie_focus_bias { inner.clone() } else { fetch("outer")? };
        Ok(Self {
            inner,
            outer,
            shared: config.bias_shared,
        })
    }

    /// `(inner, outer)` bias parameters for step `k`.
    pub fn at(&self, k: usize) -> Result<(ParamId, ParamId)> {
        if self.shared {
            return Ok((self.inner[0], self.outer[0]));
        }
        match (self.inner.get(k), self.outer.get(k)) {
            (Some(i), Some(o)) => Ok((*i, *o)),
            _ => Err(Error::Config(format!(
                "step {k} has no unshared focus bias; only {} steps are allocated",
                self.inner.len()
            ))),
        }
    }
}

#[derive(Clone, Debug)]
enum StepBlocks {
    Shared(FocusBlocks),
    PerStep(Vec<FocusBlocks>),
}

/// Focus-capture parameters for one modality.
#[derive(Clone, Debug)]
pub struct FocusBranch {
    pub modality: Modality,
    pub template: ParamId,
    blocks: Option<StepBlocks>,
    biases: Option<BiasBank>,
    template_len: usize,
}

/// Intermediates of one focus step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub tp1: Var,
    pub tp2: Var,
    pub template: Var,
    /// First head's CAB attention weights (`M×M`); kept for inspection.
    pub cross_weights: Var,
}

/// Per-step intermediates of a scan. `steps[k].template` is the template
/// after consuming segment `k`.
#[derive(Clone, Debug, Default)]
pub struct ScanTrace {
    pub steps: Vec<StepOutput>,
}

impl FocusBranch {
    pub fn lookup(store: &ParameterStore, config: &ModelConfig, modality: Modality) -> Result<Self> {
        let name = modality.as_str();
        let template = store.id(&format!("focus.{name}.template"))?;
        let (blocks, biases) = if config.avfc {
            let blocks = if config.attn_shared {
                StepBlocks::Shared(FocusBlocks::lookup(store, &focus_block_prefix(name, None), config.num_heads)?)
            } else {
                StepBlocks::PerStep(
                    (0..config.max_segments)
                        .map(|k| FocusBlocks::lookup(store, &focus_block_prefix(name, Some(k)), config.num_heads))
                        .collect::<Result<_>>()?,
                )
            };
            (Some(blocks), Some(BiasBank::lookup(store, config, name)?))
        } else {
            (None, None)
        };
        Ok(Self {
            modality,
            template,
            blocks,
            biases,
            template_len: config.template_len,
        })
    }

    /// Whether the branch has scan parameters (it does not when the focus
    /// scan is ablated away).
    pub fn scans(&self) -> bool {
        self.blocks.is_some()
    }

    pub fn blocks_at(&self, k: usize) -> Result<FocusBlocks> {
        match &self.blocks {
            None => Err(Error::Config("focus scan is disabled in this configuration".into())),
            Some(StepBlocks::Shared(b)) => Ok(*b),
            Some(StepBlocks::PerStep(v)) => v.get(k).copied().ok_or_else(|| {
                Error::Config(format!("step {k} has no unshared focus blocks; only {} allocated", v.len()))
            }),
        }
    }

    pub fn biases_at(&self, k: usize) -> Result<(ParamId, ParamId)> {
        self.biases
            .as_ref()
            .ok_or_else(|| Error::Config("focus scan is disabled in this configuration".into()))?
            .at(k)
    }

    /// One focus step on segment `k` of `feats` (`T×D`).
    pub fn step(&self, g: &mut Graph, feats: Var, k: usize, template_prev: Var) -> Result<StepOutput> {
        let t = g.value(feats).rows();
        if k >= t {
            return Err(Error::Range(format!("focus step {k} on a sequence of {t} segments")));
        }
        let blocks = self.blocks_at(k)?;
        let (inner, outer) = self.biases_at(k)?;
        let feat = g.slice_rows(feats, k, 1);
        focus_step(g, feat, template_prev, (inner, outer), &blocks, self.template_len)
    }

    /// Left fold of [`FocusBranch::step`] over every segment.
    pub fn scan(&self, g: &mut Graph, feats: Var) -> Result<(Var, ScanTrace)> {
        let t = g.value(feats).rows();
        if t == 0 {
            return Err(Error::Shape("focus scan over an empty sequence".into()));
        }
        let mut template = g.param(self.template);
        let mut trace = ScanTrace::default();
        for k in 0..t {
            let out = self.step(g, feats, k, template)?;
            template = out.template;
            trace.steps.push(out);
        }
        Ok((template, trace))
    }
}

/// One focus-sampling update of an `M×D` template from a `1×D` segment feature.
pub fn focus_step(
    g: &mut Graph,
    feat: Var,
    template_prev: Var,
    (bias_inner, bias_outer): (ParamId, ParamId),
    blocks: &FocusBlocks,
    template_len: usize,
) -> Result<StepOutput> {
    let (m, d) = g.value(template_prev).shape();
    if m != template_len || g.value(feat).shape() != (1, d) {
        return Err(Error::Shape(format!(
            "focus step: template {m}x{d} (expected {template_len} rows), feature {:?}",
            g.value(feat).shape()
        )));
    }
    let repeated = g.repeat_rows(feat, m);
    let tp1 = g.add(repeated, template_prev);
    let inner = g.param(bias_inner);
    let outer = g.param(bias_outer);
    let h = sab(g, tp1, &blocks.sab1)?.out;
    let h = g.add(h, inner);
    let h = sab(g, h, &blocks.sab2)?.out;
    let tp2 = g.add(h, outer);
    let crossed = cab(g, tp2, repeated, &blocks.cab)?;
    Ok(StepOutput {
        tp1,
        tp2,
        template: crossed.out,
        cross_weights: crossed.weights[0],
    })
}

/// Focus features of both modalities (`M×D` each).
#[derive(Clone, Copy, Debug)]
pub struct FocusFeatures {
    pub audio: Var,
    pub visual: Var,
}

/// Scans both modalities with their own templates, biases and blocks.
/// `audio` and `visual` are the projected `T×D` feature sequences.
pub fn run_focus_capture(
    g: &mut Graph,
    audio_branch: &FocusBranch,
    visual_branch: &FocusBranch,
    audio: Var,
    visual: Var,
) -> Result<(FocusFeatures, [ScanTrace; 2])> {
    let (a, ta) = audio_branch.scan(g, audio)?;
    let (v, tv) = visual_branch.scan(g, visual)?;
    Ok((FocusFeatures { audio: a, visual: v }, [ta, tv]))
}
