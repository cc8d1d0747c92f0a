//! The assembled dual-path model.
//!
//! A sample's forward pass runs on its own tape. The contrastive loss
//! couples samples, so batch gradients are computed in two phases: every
//! sample is run forward, the contrastive loss is evaluated on a small
//! batch tape whose leaves are copies of the fused and mean preference
//! features, and its leaf gradients then seed each sample's reverse sweep
//! together with that sample's likelihood terms. Per-sample parameter
//! gradients are reduced in ascending sample order.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::focus::{run_focus_capture, FocusBranch, FocusFeatures, ScanTrace};
use crate::fusion::{ContextBuilder, Fused, KeyFusion};
use crate::graph::{Graph, Var};
use crate::kernels::Linear;
use crate::objectives::{
    contrastive_on_graph, infer, loss_total_for, AnswerDistribution, DecoderOutput, InferenceConfig,
    LossBreakdown, MultimodalDecoder, PreferenceDecoder, PROB_CLAMP,
};
use crate::params::{declare, ParamId, ParameterStore};
use crate::preference::{Activated, PreferenceBranch};
use crate::tensor::Tensor;
use crate::types::Sample;

#[derive(Clone, Debug)]
struct Layout {
    proj_audio: Linear,
    proj_visual: Linear,
    proj_word: Linear,
    proj_sentence: Linear,
    context: ContextBuilder,
    focus: Option<[FocusBranch; 2]>,
    fusion: Option<KeyFusion>,
    preference: Option<[PreferenceBranch; 2]>,
    decoder: MultimodalDecoder,
    pref_decoders: Option<[PreferenceDecoder; 2]>,
}

impl Layout {
    fn resolve(config: &ModelConfig, store: &ParameterStore) -> Result<Self> {
        let h = config.num_heads;
        let focus = if config.tdpp {
            Some([
                FocusBranch::lookup(store, config, crate::types::Modality::Audio)?,
                FocusBranch::lookup(store, config, crate::types::Modality::Visual)?,
            ])
        } else {
            None
        };
        let (preference, pref_decoders) = if config.gpap {
            (
                Some([
                    PreferenceBranch::lookup(store, crate::types::Modality::Audio, h)?,
                    PreferenceBranch::lookup(store, crate::types::Modality::Visual, h)?,
                ]),
                Some([
                    PreferenceDecoder::lookup(store, "audio", h)?,
                    PreferenceDecoder::lookup(store, "visual", h)?,
                ]),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            proj_audio: Linear::lookup(store, "proj.audio")?,
            proj_visual: Linear::lookup(store, "proj.visual")?,
            proj_word: Linear::lookup(store, "proj.word")?,
            proj_sentence: Linear::lookup(store, "proj.sentence")?,
            context: ContextBuilder::lookup(store, h, config.context_order)?,
            fusion: if config.tdpp { Some(KeyFusion::lookup(store, h)?) } else { None },
            focus,
            preference,
            decoder: MultimodalDecoder::lookup(store, h)?,
            pref_decoders,
        })
    }
}

/// Options for a single forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Replace the focus features (audio, visual) instead of scanning.
    pub focus_override: Option<(Tensor, Tensor)>,
}

/// Tape handles for everything a forward pass produces.
pub struct SampleForward {
    pub audio: Var,
    pub visual: Var,
    pub word: Var,
    pub sentence: Var,
    pub context: Var,
    pub context_attention: Vec<Var>,
    pub focus: Option<FocusFeatures>,
    pub scans: Option<[ScanTrace; 2]>,
    pub fusion: Option<Fused>,
    pub fused: Var,
    /// Audio then visual.
    pub preference: Option<[Activated; 2]>,
    /// Sequence means of the preference features, audio then visual.
    pub preference_mean: Option<[Var; 2]>,
    pub logits_qa: Var,
    /// Audio then visual decoder logits.
    pub logits_pref: Option<[Var; 2]>,
    pub nll_qa: Var,
    pub nll_pref: Option<[Var; 2]>,
}

/// Decoder outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub qa: DecoderOutput,
    pub ap: Option<DecoderOutput>,
    pub vp: Option<DecoderOutput>,
}

impl Prediction {
    pub fn combine(&self, ic: &InferenceConfig) -> Result<(usize, Vec<f64>)> {
        infer(
            &self.qa.probs,
            self.ap.as_ref().map(|d| &d.probs),
            self.vp.as_ref().map(|d| &d.probs),
            ic,
        )
    }
}

/// Losses and predictions for a batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub losses: LossBreakdown,
    pub predictions: Vec<Prediction>,
}

/// Intermediates of one forward pass, materialised for export.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRecord {
    /// Template after each focus step, audio then visual.
    pub audio_templates: Vec<Tensor>,
    pub visual_templates: Vec<Tensor>,
    pub audio_tp1: Vec<Tensor>,
    pub audio_tp2: Vec<Tensor>,
    pub visual_tp1: Vec<Tensor>,
    pub visual_tp2: Vec<Tensor>,
    pub o_audio_l: Option<Tensor>,
    pub o_visual_l: Option<Tensor>,
    pub context: Tensor,
    pub fused: Tensor,
    pub o_audio_g: Option<Tensor>,
    pub o_visual_g: Option<Tensor>,
    /// Per-head `T×L` attention of audio and visual segments over question tokens.
    pub audio_word_attention: Vec<Tensor>,
    pub visual_word_attention: Vec<Tensor>,
    /// Per-head attention inside the context block.
    pub context_attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct AvMaster {
    pub config: ModelConfig,
    pub params: ParameterStore,
    layout: Layout,
}

impl AvMaster {
    /// Allocates and randomly initialises every declared tensor.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParameterStore::from_specs(&declare(&config), seed)?;
        Self::from_params(config, params)
    }

    /// Wraps an existing store, checking that it holds exactly the tensors
    /// the configuration declares, with matching shapes.
    pub fn from_params(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let specs = declare(&config);
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "configuration declares {} tensors, store holds {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let id = params.id(&spec.name).map_err(|_| Error::Shape(format!("missing tensor {}", spec.name)))?;
            let shape = params.value(id).shape();
            if shape != (spec.rows, spec.cols) {
                return Err(Error::Shape(format!(
                    "tensor {} is {}x{}, configuration expects {}x{}",
                    spec.name, shape.0, shape.1, spec.rows, spec.cols
                )));
            }
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn forward<'s>(&'s self, g: &mut Graph<'s>, sample: &Sample, opts: &ForwardOptions) -> Result<SampleForward> {
        sample.validate(&self.config)?;
        let l = &self.layout;
        let raw_audio = g.constant(sample.audio.data.clone());
        let raw_visual = g.constant(sample.visual.data.clone());
        let raw_word = g.constant(sample.question.word.clone());
        let raw_sentence = g.constant(sample.question.sentence.clone());
        let audio = l.proj_audio.forward(g, raw_audio);
        let visual = l.proj_visual.forward(g, raw_visual);
        let word = l.proj_word.forward(g, raw_word);
        let sentence = l.proj_sentence.forward(g, raw_sentence);

        let ctx = l.context.build(g, audio, visual, word)?;
        let context = ctx.out;

        let (focus, scans, fusion, fused) = match (&l.focus, &l.fusion) {
            (Some([fa, fv]), Some(fusion)) => {
                let (focus, scans) = if let Some((oa, ov)) = &opts.focus_override {
                    let m = (self.config.template_len, self.config.dim);
                    if oa.shape() != m || ov.shape() != m {
                        return Err(Error::Shape("focus override must be M x D".into()));
                    }
                    let focus = FocusFeatures {
                        audio: g.constant(oa.clone()),
                        visual: g.constant(ov.clone()),
                    };
                    (focus, None)
                } else if fa.scans() {
                    let (focus, scans) = run_focus_capture(g, fa, fv, audio, visual)?;
                    (focus, Some(scans))
                } else {
                    let focus = FocusFeatures {
                        audio: g.param(fa.template),
                        visual: g.param(fv.template),
                    };
                    (focus, None)
                };
                let fused = fusion.fuse(g, focus, context)?;
                (Some(focus), scans, Some(fused), fused.fused)
            }
            _ => {
                let pooled = g.mean_rows(context);
                (None, None, None, pooled)
            }
        };

        let logits_qa = l.decoder.decode(g, fused, sentence)?;
        let nll_qa = g.nll(logits_qa, sample.answer, PROB_CLAMP);

        let (preference, preference_mean, logits_pref, nll_pref) = match (&l.preference, &l.pref_decoders) {
            (Some([pa, pv]), Some([da, dv])) => {
                let act_a = pa.activate(g, &self.params, audio, word)?;
                let act_v = pv.activate(g, &self.params, visual, word)?;
                let mean_a = g.mean_rows(act_a.preference);
                let mean_v = g.mean_rows(act_v.preference);
                let la = da.decode(g, act_a.preference, sentence)?;
                let lv = dv.decode(g, act_v.preference, sentence)?;
                let na = g.nll(la, sample.answer, PROB_CLAMP);
                let nv = g.nll(lv, sample.answer, PROB_CLAMP);
                (Some([act_a, act_v]), Some([mean_a, mean_v]), Some([la, lv]), Some([na, nv]))
            }
            _ => (None, None, None, None),
        };

        Ok(SampleForward {
            audio,
            visual,
            word,
            sentence,
            context,
            context_attention: ctx.weights,
            focus,
            scans,
            fusion,
            fused,
            preference,
            preference_mean,
            logits_qa,
            logits_pref,
            nll_qa,
            nll_pref,
        })
    }

    fn prediction_of(g: &Graph, f: &SampleForward) -> Prediction {
        let out = |v: Var| DecoderOutput::from_logits(g.value(v).row(0));
        Prediction {
            qa: out(f.logits_qa),
            ap: f.logits_pref.map(|[a, _]| out(a)),
            vp: f.logits_pref.map(|[_, v]| out(v)),
        }
    }

    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        self.predict_with(sample, &ForwardOptions::default())
    }

    pub fn predict_with(&self, sample: &Sample, opts: &ForwardOptions) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, sample, opts)?;
        Ok(Self::prediction_of(&g, &f))
    }

    /// Focus templates after every scan step, as `(audio, visual)` pairs.
    pub fn focus_trajectory(&self, sample: &Sample) -> Result<Vec<(Tensor, Tensor)>> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, sample, &ForwardOptions::default())?;
        let [ta, tv] = f
            .scans
            .ok_or_else(|| Error::Config("focus trajectory needs an enabled focus scan".into()))?;
        Ok(ta
            .steps
            .iter()
            .zip(&tv.steps)
            .map(|(a, v)| (g.value(a.template).clone(), g.value(v.template).clone()))
            .collect())
    }

    pub fn trace(&self, sample: &Sample) -> Result<TraceRecord> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, sample, &ForwardOptions::default())?;
        let vals = |vs: &[Var]| vs.iter().map(|v| g.value(*v).clone()).collect::<Vec<_>>();
        let scan_vals = |i: usize, pick: fn(&crate::focus::StepOutput) -> Var| -> Vec<Tensor> {
            f.scans
                .as_ref()
                .map(|s| s[i].steps.iter().map(|st| g.value(pick(st)).clone()).collect())
                .unwrap_or_default()
        };
        Ok(TraceRecord {
            audio_templates: scan_vals(0, |s| s.template),
            visual_templates: scan_vals(1, |s| s.template),
            audio_tp1: scan_vals(0, |s| s.tp1),
            audio_tp2: scan_vals(0, |s| s.tp2),
            visual_tp1: scan_vals(1, |s| s.tp1),
            visual_tp2: scan_vals(1, |s| s.tp2),
            o_audio_l: f.fusion.map(|x| g.value(x.o_audio).clone()),
            o_visual_l: f.fusion.map(|x| g.value(x.o_visual).clone()),
            context: g.value(f.context).clone(),
            fused: g.value(f.fused).clone(),
            o_audio_g: f.preference.as_ref().map(|p| g.value(p[0].enhanced).clone()),
            o_visual_g: f.preference.as_ref().map(|p| g.value(p[1].enhanced).clone()),
            audio_word_attention: f.preference.as_ref().map(|p| vals(&p[0].word_attention)).unwrap_or_default(),
            visual_word_attention: f.preference.as_ref().map(|p| vals(&p[1].word_attention)).unwrap_or_default(),
            context_attention: vals(&f.context_attention),
        })
    }

    /// Batch losses without gradients.
    pub fn batch_loss(&self, batch: &[&Sample]) -> Result<BatchOutcome> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut fwd = Vec::with_capacity(batch.len());
        for s in batch {
            let mut g = Graph::new(&self.params);
            let f = self.forward(&mut g, s, &ForwardOptions::default())?;
            fwd.push(self.sample_terms(&g, &f));
        }
        let l_c = self.contrastive_value(&fwd)?;
        Ok(self.outcome(&fwd, l_c))
    }

    fn sample_terms(&self, g: &Graph, f: &SampleForward) -> SampleTerms {
        SampleTerms {
            nll_qa: g.value(f.nll_qa).item(),
            nll_pref: f.nll_pref.map(|[a, v]| [g.value(a).item(), g.value(v).item()]),
            fused: g.value(f.fused).clone(),
            pref_mean: f
                .preference_mean
                .map(|[a, v]| [g.value(a).clone(), g.value(v).clone()]),
            prediction: Self::prediction_of(g, f),
        }
    }

    fn contrastive_graph(&self, terms: &[SampleTerms]) -> Result<Option<ContrastiveTape>> {
        if !self.config.gpap {
            return Ok(None);
        }
        let mut g = Graph::standalone();
        let mut fused = Vec::with_capacity(terms.len());
        let mut audio = Vec::with_capacity(terms.len());
        let mut visual = Vec::with_capacity(terms.len());
        for t in terms {
            let [a, v] = t.pref_mean.as_ref().expect("preference path enabled");
            fused.push(g.leaf(t.fused.clone()));
            audio.push(g.leaf(a.clone()));
            visual.push(g.leaf(v.clone()));
        }
        let loss = contrastive_on_graph(&mut g, &fused, &visual, &audio, self.config.tau, self.config.contrastive_mode)?;
        Ok(Some(ContrastiveTape {
            graph: g,
            loss,
            fused,
            audio,
            visual,
        }))
    }

    fn contrastive_value(&self, terms: &[SampleTerms]) -> Result<f64> {
        Ok(self
            .contrastive_graph(terms)?
            .map_or(0.0, |t| t.graph.value(t.loss).item()))
    }

    fn outcome(&self, terms: &[SampleTerms], l_c: f64) -> BatchOutcome {
        let n = terms.len() as f64;
        let l_qa = terms.iter().map(|t| t.nll_qa).sum::<f64>() / n;
        let (l_ap, l_vp) = if self.config.gpap {
            (
                terms.iter().map(|t| t.nll_pref.unwrap()[0]).sum::<f64>() / n,
                terms.iter().map(|t| t.nll_pref.unwrap()[1]).sum::<f64>() / n,
            )
        } else {
            (0.0, 0.0)
        };
        BatchOutcome {
            losses: loss_total_for([l_qa, l_vp, l_ap, l_c], &self.config),
            predictions: terms.iter().map(|t| t.prediction.clone()).collect(),
        }
    }

    /// Runs forward and backward over a batch and adds the gradient of the
    /// weighted total loss into the store's gradient buffers.
    pub fn accumulate_gradients(&mut self, batch: &[&Sample]) -> Result<BatchOutcome> {
        let (outcome, grads) = self.batch_gradients(batch)?;
        for (id, g) in grads {
            self.params.accumulate_grad(id, &g);
        }
        Ok(outcome)
    }

    /// Batch losses and the gradient of the weighted total with respect to
    /// every parameter, without touching the store.
    pub fn batch_gradients(&self, batch: &[&Sample]) -> Result<(BatchOutcome, Vec<(ParamId, Tensor)>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = batch.len() as f64;
        let [lqa, lvp, lap, lc] = self.config.lambdas();
        let mut tapes = Vec::with_capacity(batch.len());
        let mut terms = Vec::with_capacity(batch.len());
        for s in batch {
            let mut g = Graph::new(&self.params);
            let f = self.forward(&mut g, s, &ForwardOptions::default())?;
            terms.push(self.sample_terms(&g, &f));
            tapes.push((g, f));
        }

        let contrastive = self.contrastive_graph(&terms)?;
        let l_c = contrastive.as_ref().map_or(0.0, |t| t.graph.value(t.loss).item());
        let leaf_grads = match &contrastive {
            Some(t) if lc > 0.0 => Some(t.graph.backward(&[(t.loss, Tensor::scalar(lc))])),
            _ => None,
        };

        let mut buffer: Vec<Option<Tensor>> = vec![None; self.params.len()];
        for (i, (g, f)) in tapes.iter().enumerate() {
            let mut seeds = Vec::with_capacity(6);
            if lqa > 0.0 {
                seeds.push((f.nll_qa, Tensor::scalar(lqa / n)));
            }
            if let Some([na, nv]) = f.nll_pref {
                if lap > 0.0 {
                    seeds.push((na, Tensor::scalar(lap / n)));
                }
                if lvp > 0.0 {
                    seeds.push((nv, Tensor::scalar(lvp / n)));
                }
            }
            if let (Some(lg), Some(t), Some([ma, mv])) = (&leaf_grads, &contrastive, f.preference_mean) {
                for (node, leaf) in [(f.fused, t.fused[i]), (ma, t.audio[i]), (mv, t.visual[i])] {
                    if let Some(d) = lg.wrt(leaf) {
                        seeds.push((node, d.clone()));
                    }
                }
            }
            if seeds.is_empty() {
                continue;
            }
            let grads = g.backward(&seeds);
            for (id, grad) in grads.params() {
                match &mut buffer[id.0] {
                    Some(acc) => acc.add_assign(grad),
                    slot @ None => *slot = Some(grad.clone()),
                }
            }
        }
        let grads = buffer
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (ParamId(i), g)))
            .collect();
        Ok((self.outcome(&terms, l_c), grads))
    }

    /// Parameters whose gradient is zero by construction: the focus
    /// cross-attention attends over `M` identical copies of the segment
    /// feature, so its attention weights are constant and the query-side
    /// normalisation and the query/key projections never receive gradient.
    pub fn structurally_inert(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some(branches) = &self.layout.focus {
            for b in branches.iter().filter(|b| b.scans()) {
                for k in 0..self.config.max_segments {
                    let Ok(blocks) = b.blocks_at(k) else { break };
                    let c = blocks.cab;
                    out.extend([c.ln1.gain, c.ln1.bias, c.q.w, c.q.b, c.k]);
                    if self.config.attn_shared {
                        break;
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

struct SampleTerms {
    nll_qa: f64,
    nll_pref: Option<[f64; 2]>,
    fused: Tensor,
    pref_mean: Option<[Tensor; 2]>,
    prediction: Prediction,
}

struct ContrastiveTape {
    graph: Graph<'static>,
    loss: Var,
    fused: Vec<Var>,
    audio: Vec<Var>,
    visual: Vec<Var>,
}

/// Convenience: combined answer for a prediction under the default
/// inference configuration.
pub fn answer_of(p: &Prediction) -> usize {
    p.combine(&InferenceConfig::default()).map(|(a, _)| a).unwrap_or(0)
}

/// Exposed for tests that need to compare per-decoder distributions.
pub fn distributions(p: &Prediction) -> Vec<&AnswerDistribution> {
    let mut v = vec![&p.qa.probs];
    v.extend(p.ap.as_ref().map(|d| &d.probs));
    v.extend(p.vp.as_ref().map(|d| &d.probs));
    v
}
