//! Answer decoders, the four training losses and the inference combiner.

use serde::{Deserialize, Serialize};

use crate::config::{ContrastiveMode, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::kernels::{sab, AttentionBlock, Linear, Norm};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Lower clamp on a probability before taking its log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Multimodal decoder: `[F_fu; sentence]` through two pre-norm transformer
/// blocks and a final norm, mean-pooled, then a linear head to the answer
/// logits.
#[derive(Clone, Copy, Debug)]
pub struct MultimodalDecoder {
    pub blocks: [AttentionBlock; 2],
    pub norm: Norm,
    pub head: Linear,
}

impl MultimodalDecoder {
    pub fn lookup(store: &ParameterStore, heads: usize) -> Result<Self> {
        Ok(Self {
            blocks: [
                AttentionBlock::lookup(store, "decoder.multimodal.block0", heads, false)?,
                AttentionBlock::lookup(store, "decoder.multimodal.block1", heads, false)?,
            ],
            norm: Norm::lookup(store, "decoder.multimodal.ln_f")?,
            head: Linear::lookup(store, "decoder.multimodal.head")?,
        })
    }

    pub fn decode(&self, g: &mut Graph, fused: Var, sentence: Var) -> Result<Var> {
        check_row(g, fused, "fused feature")?;
        check_row(g, sentence, "sentence feature")?;
        let tokens = g.concat_rows(&[fused, sentence]);
        let h = sab(g, tokens, &self.blocks[0])?.out;
        let h = sab(g, h, &self.blocks[1])?.out;
        let h = self.norm.forward(g, h);
        let pooled = g.mean_rows(h);
        Ok(self.head.forward(g, pooled))
    }
}

/// Audio or visual decoder: `[sentence; F^p]` through one transformer
/// block and a final norm, mean-pooled, then a linear head.
#[derive(Clone, Copy, Debug)]
pub struct PreferenceDecoder {
    pub block: AttentionBlock,
    pub norm: Norm,
    pub head: Linear,
}

impl PreferenceDecoder {
    pub fn lookup(store: &ParameterStore, modality: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            block: AttentionBlock::lookup(store, &format!("decoder.{modality}.block0"), heads, false)?,
            norm: Norm::lookup(store, &format!("decoder.{modality}.ln_f"))?,
            head: Linear::lookup(store, &format!("decoder.{modality}.head"))?,
        })
    }

    pub fn decode(&self, g: &mut Graph, preference: Var, sentence: Var) -> Result<Var> {
        check_row(g, sentence, "sentence feature")?;
        if g.value(preference).cols() != g.value(sentence).cols() {
            return Err(Error::Shape("preference and sentence widths differ".into()));
        }
        let tokens = g.concat_rows(&[sentence, preference]);
        let h = sab(g, tokens, &self.block)?.out;
        let h = self.norm.forward(g, h);
        let pooled = g.mean_rows(h);
        Ok(self.head.forward(g, pooled))
    }
}

fn check_row(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).rows() != 1 {
        return Err(Error::Shape(format!("{what} must be a single row, got {:?}", g.value(v).shape())));
    }
    Ok(())
}

/// A probability vector over the answer vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution(Vec<f64>);

impl AnswerDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Numeric("probabilities must be non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub logits: Vec<f64>,
    pub probs: AnswerDistribution,
}

impl DecoderOutput {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut p = logits.to_vec();
        softmax_in_place(&mut p);
        Self {
            logits: logits.to_vec(),
            probs: AnswerDistribution(p),
        }
    }
}

/// `-ln p[y]`, with `p[y]` clamped from below at [`PROB_CLAMP`].
pub fn loss_nll(output: &DecoderOutput, y: usize) -> Result<f64> {
    let p = output
        .probs
        .probs()
        .get(y)
        .ok_or_else(|| Error::Range(format!("answer {y} outside [0, {})", output.probs.probs().len())))?;
    Ok(-p.max(PROB_CLAMP).ln())
}

/// Contrastive loss between fused features and the sequence-means of the
/// preference features, built on `g` so gradients reach every input.
///
/// For sample `i`, the positive score is
/// `exp(cos(fu_i, v_i)/τ) + exp(cos(fu_i, a_i)/τ)`. Every other sample `k`
/// contributes a negative: in [`ContrastiveMode::CrossPair`] it is
/// `exp(cos(fu_i, v_k)/τ) + exp(cos(fu_i, a_k)/τ)`; in
/// [`ContrastiveMode::Literal`] it is sample `k`'s own positive score.
pub fn contrastive_on_graph(
    g: &mut Graph,
    fused: &[Var],
    visual_mean: &[Var],
    audio_mean: &[Var],
    tau: f64,
    mode: ContrastiveMode,
) -> Result<Var> {
    let n = fused.len();
    if n == 0 || visual_mean.len() != n || audio_mean.len() != n {
        return Err(Error::Shape("contrastive loss needs equal, non-empty batches".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let inv_tau = 1.0 / tau;
    let score = |g: &mut Graph, i: usize, k: usize| {
        let cv = g.cosine(fused[i], visual_mean[k]);
        let cv = g.scale(cv, inv_tau);
        let ev = g.exp(cv);
        let ca = g.cosine(fused[i], audio_mean[k]);
        let ca = g.scale(ca, inv_tau);
        let ea = g.exp(ca);
        g.add(ev, ea)
    };
    let positives: Vec<Var> = (0..n).map(|i| score(g, i, i)).collect();
    let mut total: Option<Var> = None;
    for i in 0..n {
        let mut denom = positives[i];
        for k in (0..n).filter(|&k| k != i) {
            let neg = match mode {
                ContrastiveMode::CrossPair => score(g, i, k),
                ContrastiveMode::Literal => positives[k],
            };
            denom = g.add(denom, neg);
        }
        let ratio = g.div(positives[i], denom);
        let term = g.ln(ratio);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    Ok(g.scale(total.expect("n >= 1"), -1.0 / n as f64))
}

/// Value-only contrastive loss. `pref_visual[i]` and `pref_audio[i]` are
/// `T×D` preference features, averaged over their rows here.
pub fn loss_contrastive(
    fused: &[Tensor],
    pref_visual: &[Tensor],
    pref_audio: &[Tensor],
    tau: f64,
    mode: ContrastiveMode,
) -> Result<f64> {
    let mut g = Graph::standalone();
    let fu: Vec<Var> = fused.iter().map(|t| g.constant(t.clone())).collect();
    let mean = |g: &mut Graph, t: &Tensor| {
        let v = g.constant(t.clone());
        g.mean_rows(v)
    };
    let vm: Vec<Var> = pref_visual.iter().map(|t| mean(&mut g, t)).collect();
    let am: Vec<Var> = pref_audio.iter().map(|t| mean(&mut g, t)).collect();
    let loss = contrastive_on_graph(&mut g, &fu, &vm, &am, tau, mode)?;
    Ok(g.value(loss).item())
}

/// The four loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_qa: f64,
    pub l_vp: f64,
    pub l_ap: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> [f64; 4] {
        [self.l_qa, self.l_vp, self.l_ap, self.l_c]
    }
}

/// Weighted sum of `[l_qa, l_vp, l_ap, l_c]` with `[λ_qa, λ_vp, λ_ap, λ_c]`.
pub fn loss_total(parts: [f64; 4], lambdas: [f64; 4]) -> LossBreakdown {
    let [l_qa, l_vp, l_ap, l_c] = parts;
    let total = parts.iter().zip(&lambdas).map(|(l, w)| l * w).sum();
    LossBreakdown {
        l_qa,
        l_vp,
        l_ap,
        l_c,
        total,
    }
}

pub fn loss_total_for(parts: [f64; 4], config: &ModelConfig) -> LossBreakdown {
    loss_total(parts, config.lambdas())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    Add,
    Mul,
    /// Weights proportional to each distribution's maximum probability.
    WAdd,
}

impl std::str::FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Ok(CombineMode::Add),
            "mul" => Ok(CombineMode::Mul),
            "wadd" | "w-add" => Ok(CombineMode::WAdd),
            _ => Err(Error::Config(format!("unknown combine mode {s:?} (add, mul, wadd)"))),
        }
    }
}

/// Inference-time decoder switches and combination rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub enable_qa: bool,
    pub enable_ap: bool,
    pub enable_vp: bool,
    pub combine: CombineMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            enable_qa: true,
            enable_ap: true,
            enable_vp: true,
            combine: CombineMode::Add,
        }
    }
}

/// Combines the enabled decoder distributions and takes the argmax (lowest
/// index on ties). Decoders absent from the model are skipped.
pub fn infer(
    qa: &AnswerDistribution,
    ap: Option<&AnswerDistribution>,
    vp: Option<&AnswerDistribution>,
    ic: &InferenceConfig,
) -> Result<(usize, Vec<f64>)> {
    let mut enabled: Vec<&[f64]> = Vec::with_capacity(3);
    if ic.enable_qa {
        enabled.push(qa.probs());
    }
    for (on, dist) in [(ic.enable_ap, ap), (ic.enable_vp, vp)] {
        if let (true, Some(d)) = (on, dist) {
            enabled.push(d.probs());
        }
    }
    if enabled.is_empty() {
        return Err(Error::Config("every decoder is disabled at inference".into()));
    }
    let combined = combine_scores(&enabled, ic.combine)?;
    Ok((argmax(&combined), combined))
}

/// Combines per-decoder score vectors of equal length. The inputs need not
/// be normalised.
pub fn combine_scores(scores: &[&[f64]], mode: CombineMode) -> Result<Vec<f64>> {
    let c = scores.first().map_or(0, |s| s.len());
    if c == 0 || scores.iter().any(|p| p.len() != c) {
        return Err(Error::Shape("decoder distributions have different lengths".into()));
    }
    Ok(match mode {
        CombineMode::Add => (0..c).map(|j| scores.iter().map(|p| p[j]).sum()).collect(),
        CombineMode::Mul => (0..c).map(|j| scores.iter().map(|p| p[j]).product()).collect(),
        CombineMode::WAdd => {
            let peaks: Vec<f64> = scores.iter().map(|p| p.iter().copied().fold(0.0, f64::max)).collect();
            let norm: f64 = peaks.iter().sum();
            (0..c)
                .map(|j| scores.iter().zip(&peaks).map(|(p, w)| w / norm * p[j]).sum())
                .collect()
        }
    })
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> AnswerDistribution {
        AnswerDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn nll_examples() {
        let perfect = DecoderOutput {
            logits: vec![],
            probs: dist(&[0.0, 1.0]),
        };
        assert_eq!(loss_nll(&perfect, 1).unwrap(), 0.0);
        let uniform = DecoderOutput::from_logits(&[0.0; 42]);
        assert!((loss_nll(&uniform, 7).unwrap() - 42f64.ln()).abs() < 1e-12);
        let half = DecoderOutput {
            logits: vec![],
            probs: dist(&[0.5, 0.25, 0.25]),
        };
        assert!((loss_nll(&half, 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let zero = DecoderOutput {
            logits: vec![],
            probs: dist(&[0.0, 1.0]),
        };
        assert!((loss_nll(&zero, 0).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(loss_nll(&zero, 2).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = DecoderOutput::from_logits(&[0.3, -1.2, 2.0]);
        let b = DecoderOutput::from_logits(&[5.3, 3.8, 7.0]);
        for (x, y) in a.probs.probs().iter().zip(b.probs.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.probs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_single_sample_is_exactly_zero() {
        let fu = Tensor::row_vector(&[1.0, 2.0, 3.0]);
        let p = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let l = loss_contrastive(&[fu], &[p.clone()], &[p], 0.1, ContrastiveMode::CrossPair).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn contrastive_two_sample_constructed_case() {
        // fu_i aligned with its own preference means, orthogonal to the other's
        let e0 = Tensor::row_vector(&[1.0, 0.0]);
        let e1 = Tensor::row_vector(&[0.0, 1.0]);
        let l = loss_contrastive(
            &[e0.clone(), e1.clone()],
            &[e0.clone(), e1.clone()],
            &[e0, e1],
            1.0,
            ContrastiveMode::CrossPair,
        )
        .unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn zero_norm_vectors_count_as_orthogonal() {
        let z = Tensor::row_vector(&[0.0, 0.0]);
        let e = Tensor::row_vector(&[1.0, 0.0]);
        let l = loss_contrastive(&[z.clone(), e.clone()], &[z.clone(), e.clone()], &[z, e], 1.0, ContrastiveMode::CrossPair)
            .unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn total_weights_parts() {
        assert_eq!(loss_total([1.0, 2.0, 3.0, 4.0], [1.0; 4]).total, 10.0);
        assert_eq!(loss_total([1.5, 2.0, 3.0, 4.0], [1.0, 0.0, 0.0, 0.0]).total, 1.5);
        let lo = loss_total([1.0, 2.0, 3.0, 4.0], [0.4, 1.0, 1.0, 1.0]).total;
        let hi = loss_total([1.0, 2.0, 3.0, 4.0], [1.6, 1.0, 1.0, 1.0]).total;
        assert!(lo < hi);
    }

    #[test]
    fn add_combination_example() {
        let a = dist(&[0.5, 0.3, 0.2]);
        let b = dist(&[0.1, 0.6, 0.3]);
        let c = dist(&[0.2, 0.5, 0.3]);
        let (ans, combined) = infer(&a, Some(&b), Some(&c), &InferenceConfig::default()).unwrap();
        assert_eq!(ans, 1);
        for (x, y) in combined.iter().zip([0.8, 1.4, 0.8]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_source_and_all_disabled() {
        let a = dist(&[0.2, 0.7, 0.1]);
        let b = dist(&[0.9, 0.05, 0.05]);
        let only_qa = InferenceConfig {
            enable_ap: false,
            enable_vp: false,
            ..Default::default()
        };
        assert_eq!(infer(&a, Some(&b), Some(&b), &only_qa).unwrap().0, 1);
        let none = InferenceConfig {
            enable_qa: false,
            enable_ap: false,
            enable_vp: false,
            combine: CombineMode::Add,
        };
        assert!(matches!(infer(&a, Some(&b), None, &none), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.3, 0.5, 0.5]), 1);
        let (ans, _) = infer(&dist(&[0.5, 0.5]), None, None, &InferenceConfig::default()).unwrap();
        assert_eq!(ans, 0);
    }

    #[test]
    fn combine_mode_parsing() {
        assert_eq!("W-ADD".parse::<CombineMode>().unwrap(), CombineMode::WAdd);
        assert_eq!("mul".parse::<CombineMode>().unwrap(), CombineMode::Mul);
        assert!("max".parse::<CombineMode>().is_err());
    }
}
