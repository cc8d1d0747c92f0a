//! Global preference activation: each modality's raw sequence is enhanced
//! on its own and under word-level question guidance,
//! `O^g = SAB(F) + CAB(query = F, key/value = words)`, then `F^p = MLP(O^g)`.
//! Audio and visual branches share no parameters.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{cab, mlp, sab, AttentionBlock, Mlp};
use crate::params::ParameterStore;
use crate::types::Modality;

#[derive(Clone, Copy, Debug)]
pub struct PreferenceBranch {
    pub modality: Modality,
    pub sab: AttentionBlock,
    pub cab: AttentionBlock,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Activated {
    /// `O^g`, `T×D`.
    pub enhanced: Var,
    /// `F^p`, `T×D`.
    pub preference: Var,
    /// Per-head `T×L` cross-attention weights over question tokens.
    pub word_attention: Vec<Var>,
}

impl PreferenceBranch {
    pub fn lookup(store: &ParameterStore, modality: Modality, heads: usize) -> Result<Self> {
        let p = format!("preference.{}", modality.as_str());
        Ok(Self {
            modality,
            sab: AttentionBlock::lookup(store, &format!("{p}.sab"), heads, false)?,
            cab: AttentionBlock::lookup(store, &format!("{p}.cab"), heads, true)?,
            mlp: Mlp::lookup(store, &format!("{p}.mlp"))?,
        })
    }

    pub fn activate(&self, g: &mut Graph, store: &ParameterStore, feats: Var, word: Var) -> Result<Activated> {
        if g.value(feats).cols() != g.value(word).cols() {
            return Err(Error::Shape("feature and word widths differ".into()));
        }
        let own = sab(g, feats, &self.sab)?.out;
        let guided = cab(g, feats, word, &self.cab)?;
        let enhanced = g.add(own, guided.out);
        let preference = mlp(g, enhanced, &self.mlp, store)?;
        Ok(Activated {
            enhanced,
            preference,
            word_attention: guided.weights,
        })
    }
}
