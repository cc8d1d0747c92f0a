//! Scalar-loop reference implementation of the full forward pass and the
//! loss terms. Nothing here touches the tape or the GEMM path: matrices are
//! `Vec<Vec<f64>>` and every product is an explicit triple loop.

#![allow(dead_code)]

use avmaster::params::ParameterStore;
use avmaster::types::Sample;
use avmaster::{ModelConfig, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub struct Oracle<'a> {
    pub store: &'a ParameterStore,
    pub config: &'a ModelConfig,
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    let mut out = vec![vec![0.0; n]; a.len()];
    for i in 0..a.len() {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter().map(|row| row.iter().zip(r).map(|(x, y)| x + y).collect()).collect()
}

pub fn sum_rows(a: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; a[0].len()];
    for row in a {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    sum_rows(a).into_iter().map(|v| v / a.len() as f64).collect()
}

fn max_rows(a: &Mat) -> Vec<f64> {
    let mut out = a[0].clone();
    for row in &a[1..] {
        for (o, v) in out.iter_mut().zip(row) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

impl<'a> Oracle<'a> {
    pub fn new(store: &'a ParameterStore, config: &'a ModelConfig) -> Self {
        Self { store, config }
    }

    fn p(&self, name: &str) -> Mat {
        mat(self.store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.store.by_name(name).is_some()
    }

    pub fn linear(&self, prefix: &str, x: &Mat) -> Mat {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        add_row(&matmul(x, &w), &b[0])
    }

    pub fn layer_norm(&self, prefix: &str, x: &Mat) -> Mat {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = (var + 1e-5).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / sd * g[0][j] + b[0][j])
                    .collect()
            })
            .collect()
    }

    fn mha(&self, prefix: &str, q_in: &Mat, kv_in: &Mat) -> Mat {
        let d = self.config.dim;
        let heads = self.config.num_heads;
        let hd = d / heads;
        let q = self.linear(&format!("{prefix}.attn.q"), q_in);
        let k = matmul(kv_in, &self.p(&format!("{prefix}.attn.k.w")));
        let v = self.linear(&format!("{prefix}.attn.v"), kv_in);
        let mut merged = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..q.len() {
                let scores: Vec<f64> = (0..k.len())
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for c in cols.clone() {
                    merged[i][c] = (0..v.len()).map(|j| a[j] * v[j][c]).sum();
                }
            }
        }
        self.linear(&format!("{prefix}.attn.o"), &merged)
    }

    fn ffn(&self, prefix: &str, y: &Mat) -> Mat {
        if !self.has(&format!("{prefix}.ln2.g")) {
            return y.clone();
        }
        let h = self.layer_norm(&format!("{prefix}.ln2"), y);
        let h = self.linear(&format!("{prefix}.ffn.fc1"), &h);
        let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        add(y, &self.linear(&format!("{prefix}.ffn.fc2"), &h))
    }

    pub fn sab(&self, prefix: &str, x: &Mat) -> Mat {
        let h = self.layer_norm(&format!("{prefix}.ln1"), x);
        let y = add(x, &self.mha(prefix, &h, &h));
        self.ffn(prefix, &y)
    }

    pub fn cab(&self, prefix: &str, q: &Mat, kv: &Mat) -> Mat {
        let hq = self.layer_norm(&format!("{prefix}.ln1"), q);
        let hkv = self.layer_norm(&format!("{prefix}.ln_kv"), kv);
        let y = add(q, &self.mha(prefix, &hq, &hkv));
        self.ffn(prefix, &y)
    }

    pub fn relu_mlp(&self, prefix: &str, x: &Mat) -> Mat {
        let h = self.linear(&format!("{prefix}.fc1"), x);
        let h: Mat = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        self.linear(&format!("{prefix}.fc2"), &h)
    }

    fn step_prefix(&self, modality: &str, k: usize) -> String {
        if self.config.attn_shared {
            format!("focus.{modality}")
        } else {
            format!("focus.{modality}.step{k}")
        }
    }

    fn bias(&self, modality: &str, slot: &str, k: usize) -> Mat {
        let slot = if self.config.tie_focus_bias { "inner" } else { slot };
        if self.config.bias_shared {
            self.p(&format!("focus.{modality}.bias.{slot}"))
        } else {
            self.p(&format!("focus.{modality}.bias.{slot}.{k}"))
        }
    }

    /// One focus step: template update from segment `k` of `feats`.
    pub fn focus_step(&self, modality: &str, k: usize, feats: &Mat, template: &Mat) -> Mat {
        let p = self.step_prefix(modality, k);
        let repeated: Mat = vec![feats[k].clone(); template.len()];
        let tp1 = add(&repeated, template);
        let h = self.sab(&format!("{p}.sab1"), &tp1);
        let h = add(&h, &self.bias(modality, "inner", k));
        let h = self.sab(&format!("{p}.sab2"), &h);
        let tp2 = add(&h, &self.bias(modality, "outer", k));
        self.cab(&format!("{p}.cab"), &tp2, &repeated)
    }

    /// Templates after every step.
    pub fn focus_scan(&self, modality: &str, feats: &Mat) -> Vec<Mat> {
        let mut template = self.p(&format!("focus.{modality}.template"));
        let mut out = Vec::new();
        for k in 0..feats.len() {
            template = self.focus_step(modality, k, feats, &template);
            out.push(template.clone());
        }
        out
    }

    pub fn context(&self, audio: &Mat, visual: &Mat, word: &Mat) -> Mat {
        let mut cat = audio.clone();
        cat.extend(visual.iter().cloned());
        cat.extend(word.iter().cloned());
        self.sab("fusion.context", &cat)
    }

    fn fusion_branch(&self, modality: &str, focus: &Mat, context: &Mat) -> Vec<f64> {
        let projected = self.linear(&format!("fusion.{modality}.linear"), focus);
        let guided = add_row(context, &sum_rows(&projected));
        sum_rows(&self.sab(&format!("fusion.{modality}.sab"), &guided))
    }

    pub fn key_fusion(&self, focus_a: &Mat, focus_v: &Mat, context: &Mat) -> Vec<f64> {
        let oa = self.fusion_branch("audio", focus_a, context);
        let ov = self.fusion_branch("visual", focus_v, context);
        let mut stacked = vec![oa, ov];
        stacked.extend(context.iter().cloned());
        max_rows(&self.linear("fusion.out", &stacked))
    }

    pub fn preference(&self, modality: &str, feats: &Mat, word: &Mat) -> Mat {
        let p = format!("preference.{modality}");
        let own = self.sab(&format!("{p}.sab"), feats);
        let guided = self.cab(&format!("{p}.cab"), feats, word);
        self.relu_mlp(&format!("{p}.mlp"), &add(&own, &guided))
    }

    pub fn multimodal_decoder(&self, fused: &[f64], sentence: &[f64]) -> Vec<f64> {
        let tokens = vec![fused.to_vec(), sentence.to_vec()];
        let h = self.sab("decoder.multimodal.block0", &tokens);
        let h = self.sab("decoder.multimodal.block1", &h);
        let h = self.layer_norm("decoder.multimodal.ln_f", &h);
        self.linear("decoder.multimodal.head", &vec![mean_rows(&h)]).remove(0)
    }

    pub fn preference_decoder(&self, modality: &str, pref: &Mat, sentence: &[f64]) -> Vec<f64> {
        let mut tokens = vec![sentence.to_vec()];
        tokens.extend(pref.iter().cloned());
        let p = format!("decoder.{modality}");
        let h = self.sab(&format!("{p}.block0"), &tokens);
        let h = self.layer_norm(&format!("{p}.ln_f"), &h);
        self.linear(&format!("{p}.head"), &vec![mean_rows(&h)]).remove(0)
    }

    pub fn forward(&self, s: &Sample) -> OracleForward {
        let c = self.config;
        let audio = self.linear("proj.audio", &mat(&s.audio.data));
        let visual = self.linear("proj.visual", &mat(&s.visual.data));
        let word = self.linear("proj.word", &mat(&s.question.word));
        let sentence = self.linear("proj.sentence", &mat(&s.question.sentence)).remove(0);
        let context = match c.context_order {
            avmaster::config::ContextOrder::AudioVisualWord => self.context(&audio, &visual, &word),
            avmaster::config::ContextOrder::VisualAudioWord => self.context(&visual, &audio, &word),
        };
        let fused = if c.tdpp {
            let (fa, fv) = if c.avfc {
                (
                    self.focus_scan("audio", &audio).pop().unwrap(),
                    self.focus_scan("visual", &visual).pop().unwrap(),
                )
            } else {
                (self.p("focus.audio.template"), self.p("focus.visual.template"))
            };
            self.key_fusion(&fa, &fv, &context)
        } else {
            mean_rows(&context)
        };
        let logits_qa = self.multimodal_decoder(&fused, &sentence);
        let (pref, logits_pref) = if c.gpap {
            let pa = self.preference("audio", &audio, &word);
            let pv = self.preference("visual", &visual, &word);
            let la = self.preference_decoder("audio", &pa, &sentence);
            let lv = self.preference_decoder("visual", &pv, &sentence);
            (Some([mean_rows(&pa), mean_rows(&pv)]), Some([la, lv]))
        } else {
            (None, None)
        };
        OracleForward {
            fused,
            pref_mean: pref,
            logits_qa,
            logits_pref,
        }
    }
}

pub struct OracleForward {
    pub fused: Vec<f64>,
    /// `[audio, visual]` mean preference features.
    pub pref_mean: Option<[Vec<f64>; 2]>,
    pub logits_qa: Vec<f64>,
    /// `[audio, visual]` decoder logits.
    pub logits_pref: Option<[Vec<f64>; 2]>,
}

pub fn nll(logits: &[f64], target: usize) -> f64 {
    -softmax(logits)[target].max(1e-12).ln()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cross-pair InfoNCE: every sample's fused feature against every sample's
/// mean visual and audio preference.
pub fn contrastive(fused: &[Vec<f64>], visual: &[Vec<f64>], audio: &[Vec<f64>], tau: f64) -> f64 {
    let n = fused.len();
    let score = |i: usize, k: usize| (cosine(&fused[i], &visual[k]) / tau).exp() + (cosine(&fused[i], &audio[k]) / tau).exp();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|k| score(i, k)).sum();
        total += (score(i, i) / denom).ln();
    }
    -total / n as f64
}

/// `[l_qa, l_vp, l_ap, l_c]` and the weighted total over a batch.
pub fn batch_losses(oracle: &Oracle, batch: &[&Sample]) -> ([f64; 4], f64) {
    let c = oracle.config;
    let n = batch.len() as f64;
    let outs: Vec<OracleForward> = batch.iter().map(|s| oracle.forward(s)).collect();
    let l_qa = outs.iter().zip(batch).map(|(o, s)| nll(&o.logits_qa, s.answer)).sum::<f64>() / n;
    let (l_vp, l_ap, l_c) = if c.gpap {
        let pref = |o: &OracleForward, i: usize| o.logits_pref.as_ref().unwrap()[i].clone();
        let l_ap = outs.iter().zip(batch).map(|(o, s)| nll(&pref(o, 0), s.answer)).sum::<f64>() / n;
        let l_vp = outs.iter().zip(batch).map(|(o, s)| nll(&pref(o, 1), s.answer)).sum::<f64>() / n;
        let fused: Vec<Vec<f64>> = outs.iter().map(|o| o.fused.clone()).collect();
        let audio: Vec<Vec<f64>> = outs.iter().map(|o| o.pref_mean.as_ref().unwrap()[0].clone()).collect();
        let visual: Vec<Vec<f64>> = outs.iter().map(|o| o.pref_mean.as_ref().unwrap()[1].clone()).collect();
        (l_vp, l_ap, contrastive(&fused, &visual, &audio, c.tau))
    } else {
        (0.0, 0.0, 0.0)
    };
    let parts = [l_qa, l_vp, l_ap, l_c];
    let lambdas = [c.lambda_qa, c.lambda_vp, c.lambda_ap, c.lambda_c];
    (parts, parts.iter().zip(&lambdas).map(|(l, w)| l * w).sum())
}

/// A model whose every parameter is moved off its initial value, so zero
/// biases and unit gains do not hide mistakes.
pub fn perturbed_model(config: &ModelConfig, seed: u64) -> avmaster::AvMaster {
    use rand::{Rng, SeedableRng};
    let mut model = avmaster::AvMaster::init(config.clone(), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.value_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    model
}

pub fn random_samples(config: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| avmaster::gradcheck::random_sample(config, config.max_segments, config.max_question_len, &mut rng))
        .collect()
}

/// Largest absolute deviation between the tape forward pass and the
/// oracle over fused features, preference means, every logit vector, the
/// per-step focus templates and the batch loss terms.
pub fn oracle_deviation(model: &avmaster::AvMaster, batch: &[&Sample]) -> f64 {
    use avmaster::graph::Graph;
    use avmaster::model::ForwardOptions;
    let oracle = Oracle::new(&model.params, &model.config);
    let mut worst = 0.0f64;
    let row = |t: &Tensor| vec![t.row(0).to_vec()];
    for s in batch {
        let mut g = Graph::new(&model.params);
        let f = model.forward(&mut g, s, &ForwardOptions::default()).unwrap();
        let o = oracle.forward(s);
        worst = worst.max(max_abs_diff(&row(g.value(f.fused)), &vec![o.fused.clone()]));
        worst = worst.max(max_abs_diff(&row(g.value(f.logits_qa)), &vec![o.logits_qa.clone()]));
        if let (Some(lp), Some(op)) = (f.logits_pref, &o.logits_pref) {
            for i in 0..2 {
                worst = worst.max(max_abs_diff(&row(g.value(lp[i])), &vec![op[i].clone()]));
            }
        }
        if let (Some(pm), Some(om)) = (f.preference_mean, &o.pref_mean) {
            for i in 0..2 {
                worst = worst.max(max_abs_diff(&row(g.value(pm[i])), &vec![om[i].clone()]));
            }
        }
        if let Some(scans) = &f.scans {
            let feats = [
                oracle.linear("proj.audio", &mat(&s.audio.data)),
                oracle.linear("proj.visual", &mat(&s.visual.data)),
            ];
            for (i, modality) in ["audio", "visual"].into_iter().enumerate() {
                let want = oracle.focus_scan(modality, &feats[i]);
                assert_eq!(want.len(), scans[i].steps.len());
                for (step, w) in scans[i].steps.iter().zip(&want) {
                    worst = worst.max(max_abs_diff(&mat(g.value(step.template)), w));
                }
            }
        }
    }
    let got = model.batch_loss(batch).unwrap().losses;
    let (parts, total) = batch_losses(&oracle, batch);
    for (a, b) in got.parts().iter().zip(parts) {
        worst = worst.max((a - b).abs());
    }
    worst.max((got.total - total).abs())
}

/// The planted task at the tiny configuration's shapes.
pub fn tiny_task(seed: u64) -> (avmaster::synthetic::Task, ModelConfig) {
    use avmaster::synthetic::{Task, TaskSpec};
    let spec = TaskSpec {
        segments: 4,
        dim: 8,
        window: (0, 3),
        seed,
        ..TaskSpec::default()
    };
    let mut config = ModelConfig::tiny();
    spec.fit(&mut config);
    (Task::new(spec).unwrap(), config)
}
