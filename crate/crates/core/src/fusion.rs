//! Audio-visual key fusion.
//!
//! ```text
//! Fc   = SAB(concat_rows(audio, visual, word))
//! O_a  = pool_sum(SAB_a(Fc + pool_sum(Linear_a(focus_a))))
//! O_v  = pool_sum(SAB_v(Fc + pool_sum(Linear_v(focus_v))))
//! F_fu = max_seq(Linear(concat_rows(O_a, O_v, Fc)))
//! ```
//!
//! The `M×D` focus projection is sum-pooled to one row before being
//! broadcast over the `S_c` context rows, and the final max runs over the
//! sequence axis so the fused feature is `1×D`.

use crate::config::ContextOrder;
use crate::error::{Error, Result};
use crate::focus::FocusFeatures;
use crate::graph::{Graph, Var};
use crate::kernels::{pool_sum, reduce_max_seq, sab, Attended, AttentionBlock, Linear};
use crate::params::ParameterStore;

#[derive(Clone, Copy, Debug)]
pub struct ContextBuilder {
    pub block: AttentionBlock,
    pub order: ContextOrder,
}

impl ContextBuilder {
    pub fn lookup(store: &ParameterStore, heads: usize, order: ContextOrder) -> Result<Self> {
        Ok(Self {
            block: AttentionBlock::lookup(store, "fusion.context", heads, false)?,
            order,
        })
    }

    /// `Fc` over the `(2T+L)×D` concatenation of the three streams.
    pub fn build(&self, g: &mut Graph, audio: Var, visual: Var, word: Var) -> Result<Attended> {
        let d = g.value(audio).cols();
        if g.value(visual).cols() != d || g.value(word).cols() != d {
            return Err(Error::Shape("context streams have different widths".into()));
        }
        let rows = match self.order {
            ContextOrder::AudioVisualWord => [audio, visual, word],
            ContextOrder::VisualAudioWord => [visual, audio, word],
        };
        let cat = g.concat_rows(&rows);
        sab(g, cat, &self.block)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KeyFusion {
    pub audio_linear: Linear,
    pub visual_linear: Linear,
    pub audio_sab: AttentionBlock,
    pub visual_sab: AttentionBlock,
    pub out: Linear,
}

/// Fusion outputs: `O_a`, `O_v` (`1×D` each) and `F_fu` (`1×D`).
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub o_audio: Var,
    pub o_visual: Var,
    pub fused: Var,
}

impl KeyFusion {
    pub fn lookup(store: &ParameterStore, heads: usize) -> Result<Self> {
        Ok(Self {
            audio_linear: Linear::lookup(store, "fusion.audio.linear")?,
            visual_linear: Linear::lookup(store, "fusion.visual.linear")?,
            audio_sab: AttentionBlock::lookup(store, "fusion.audio.sab", heads, false)?,
            visual_sab: AttentionBlock::lookup(store, "fusion.visual.sab", heads, false)?,
            out: Linear::lookup(store, "fusion.out")?,
        })
    }

    fn branch(&self, g: &mut Graph, focus: Var, context: Var, linear: &Linear, block: &AttentionBlock) -> Result<Var> {
        if g.value(focus).cols() != g.value(context).cols() {
            return Err(Error::Shape("focus feature and context widths differ".into()));
        }
        let projected = linear.forward(g, focus);
        let pooled = pool_sum(g, projected)?;
        let guided = g.add_row(context, pooled);
        let enhanced = sab(g, guided, block)?.out;
        pool_sum(g, enhanced)
    }

    pub fn fuse(&self, g: &mut Graph, focus: FocusFeatures, context: Var) -> Result<Fused> {
        if g.value(context).rows() == 0 {
            return Err(Error::Shape("empty context".into()));
        }
        let o_audio = self.branch(g, focus.audio, context, &self.audio_linear, &self.audio_sab)?;
        let o_visual = self.branch(g, focus.visual, context, &self.visual_linear, &self.visual_sab)?;
        let stacked = g.concat_rows(&[o_audio, o_visual, context]);
        let projected = self.out.forward(g, stacked);
        let fused = reduce_max_seq(g, projected)?;
        Ok(Fused {
            o_audio,
            o_visual,
            fused,
        })
    }
}
