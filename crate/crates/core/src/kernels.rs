//! Differentiable building blocks: the self-attention block (SAB), the
//! cross-attention block (CAB), the two-layer MLP and sequence reductions.
//!
//! Both attention blocks are single pre-norm transformer layers:
//!
//! ```text
//! SAB(x)     = y + FFN(LN2(y)),  y = x + MHA(LN1(x), LN1(x))
//! CAB(q, kv) = y + FFN(LN2(y)),  y = q + MHA(LN1(q), LNkv(kv))
//! ```
//!
//! There are no positional encodings: an SAB is equivariant to row
//! permutations and a CAB is invariant to permutations of its key/value rows.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParameterStore};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn lookup(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: store.id(&format!("{prefix}.w"))?,
            b: store.id(&format!("{prefix}.b"))?,
        })
    }

    pub fn in_width(&self, store: &ParameterStore) -> usize {
        store.value(self.w).rows()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn lookup(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: store.id(&format!("{prefix}.g"))?,
            bias: store.id(&format!("{prefix}.b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Parameters of one SAB or CAB.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    pub ln1: Norm,
    /// Present on cross-attention blocks only.
    pub ln_kv: Option<Norm>,
    pub q: Linear,
    /// Key projection weight; keys have no bias.
    pub k: ParamId,
    pub v: Linear,
    pub o: Linear,
    pub ffn: Option<FeedForward>,
    pub heads: usize,
    pub dim: usize,
}

/// Block output plus the per-head attention weight matrices (`Sq×Sk`).
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl AttentionBlock {
    pub fn lookup(store: &ParameterStore, prefix: &str, heads: usize, cross: bool) -> Result<Self> {
        let ln1 = Norm::lookup(store, &format!("{prefix}.ln1"))?;
        let dim = store.value(ln1.gain).cols();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{prefix}: width {dim} not divisible into {heads} heads")));
        }
        let ffn = match store.id(&format!("{prefix}.ln2.g")) {
            Ok(_) => Some(FeedForward {
                norm: Norm::lookup(store, &format!("{prefix}.ln2"))?,
                fc1: Linear::lookup(store, &format!("{prefix}.ffn.fc1"))?,
                fc2: Linear::lookup(store, &format!("{prefix}.ffn.fc2"))?,
            }),
            Err(_) => None,
        };
        Ok(Self {
            ln1,
            ln_kv: if cross {
                Some(Norm::lookup(store, &format!("{prefix}.ln_kv"))?)
            } else {
                None
            },
            q: Linear::lookup(store, &format!("{prefix}.attn.q"))?,
            k: store.id(&format!("{prefix}.attn.k.w"))?,
            v: Linear::lookup(store, &format!("{prefix}.attn.v"))?,
            o: Linear::lookup(store, &format!("{prefix}.attn.o"))?,
            ffn,
            heads,
            dim,
        })
    }

    fn attention(&self, g: &mut Graph, q_in: Var, kv_in: Var) -> Attended {
        let q = self.q.forward(g, q_in);
        let wk = g.param(self.k);
        let k = g.matmul(kv_in, wk);
        let v = self.v.forward(g, kv_in);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores);
            weights.push(a);
            heads.push(g.matmul(a, vh));
        }
        let merged = if self.heads == 1 { heads[0] } else { g.concat_cols(&heads) };
        Attended {
            out: self.o.forward(g, merged),
            weights,
        }
    }

    fn feed_forward(&self, g: &mut Graph, x: Var) -> Var {
        match &self.ffn {
            None => x,
            Some(f) => {
                let h = f.norm.forward(g, x);
                let h = f.fc1.forward(g, h);
                let h = g.gelu(h);
                let h = f.fc2.forward(g, h);
                g.add(x, h)
            }
        }
    }
}

fn check_input(g: &Graph, x: Var, dim: usize, what: &str) -> Result<()> {
    let t = g.value(x);
    if t.rows() == 0 {
        return Err(Error::Shape(format!("{what}: empty sequence")));
    }
    if t.cols() != dim {
        return Err(Error::Shape(format!("{what}: width {} does not match block width {dim}", t.cols())));
    }
    if !t.is_finite() {
        return Err(Error::Numeric(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Self-attention block over an `S×D` sequence.
pub fn sab(g: &mut Graph, x: Var, block: &AttentionBlock) -> Result<Attended> {
    check_input(g, x, block.dim, "sab")?;
    let h = block.ln1.forward(g, x);
    let att = block.attention(g, h, h);
    let y = g.add(x, att.out);
    Ok(Attended {
        out: block.feed_forward(g, y),
        weights: att.weights,
    })
}

/// Cross-attention block: queries from `query` (`Sq×D`), keys and values
/// from `kv` (`Sk×D`).
pub fn cab(g: &mut Graph, query: Var, kv: Var, block: &AttentionBlock) -> Result<Attended> {
    check_input(g, query, block.dim, "cab query")?;
    check_input(g, kv, block.dim, "cab key/value")?;
    let norm_kv = block.ln_kv.ok_or_else(|| Error::Config("cab called with a self-attention block".into()))?;
    let hq = block.ln1.forward(g, query);
    let hkv = norm_kv.forward(g, kv);
    let att = block.attention(g, hq, hkv);
    let y = g.add(query, att.out);
    Ok(Attended {
        out: block.feed_forward(g, y),
        weights: att.weights,
    })
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn lookup(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            fc1: Linear::lookup(store, &format!("{prefix}.fc1"))?,
            fc2: Linear::lookup(store, &format!("{prefix}.fc2"))?,
        })
    }
}

pub fn mlp(g: &mut Graph, x: Var, params: &Mlp, store: &ParameterStore) -> Result<Var> {
    let width = params.fc1.in_width(store);
    if g.value(x).cols() != width {
        return Err(Error::Shape(format!("mlp: width {} does not match {width}", g.value(x).cols())));
    }
    let h = params.fc1.forward(g, x);
    let h = g.relu(h);
    Ok(params.fc2.forward(g, h))
}

/// Column-wise sum over the sequence axis.
pub fn pool_sum(g: &mut Graph, x: Var) -> Result<Var> {
    if g.value(x).rows() == 0 {
        return Err(Error::Shape("pool_sum: empty sequence".into()));
    }
    Ok(g.sum_rows(x))
}

/// Column-wise maximum over the sequence axis; ties go to the lowest row.
pub fn reduce_max_seq(g: &mut Graph, x: Var) -> Result<Var> {
    if g.value(x).rows() == 0 {
        return Err(Error::Shape("reduce_max_seq: empty sequence".into()));
    }
    Ok(g.max_rows(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamGroup, ParamSpec};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block_store(dim: usize, cross: bool) -> ParameterStore {
        let mut specs = Vec::new();
        let mut t = |name: &str, rows, cols, init| {
            specs.push(ParamSpec {
                name: name.into(),
                group: ParamGroup::Fusion,
                rows,
                cols,
                init,
            })
        };
        t("b.ln1.g", 1, dim, Init::Ones);
        t("b.ln1.b", 1, dim, Init::Zeros);
        if cross {
            t("b.ln_kv.g", 1, dim, Init::Ones);
            t("b.ln_kv.b", 1, dim, Init::Zeros);
        }
        for p in ["q", "v", "o"] {
            t(&format!("b.attn.{p}.w"), dim, dim, Init::FanIn);
            t(&format!("b.attn.{p}.b"), 1, dim, Init::Normal(0.1));
        }
        t("b.attn.k.w", dim, dim, Init::FanIn);
        ParameterStore::from_specs(&specs, 4).unwrap()
    }

    #[test]
    fn singleton_softmax_puts_all_weight_on_one_row() {
        let store = block_store(8, true);
        let block = AttentionBlock::lookup(&store, "b", 2, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::random_normal(3, 8, 1.0, &mut rng));
        let kv = g.constant(Tensor::random_normal(1, 8, 1.0, &mut rng));
        let out = cab(&mut g, q, kv, &block).unwrap();
        for w in out.weights {
            assert!(g.value(w).data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn zero_query_projection_gives_uniform_attention() {
        let mut store = block_store(8, false);
        *store.by_name_mut("b.attn.q.w").unwrap() = Tensor::zeros(8, 8);
        *store.by_name_mut("b.attn.q.b").unwrap() = Tensor::zeros(1, 8);
        let block = AttentionBlock::lookup(&store, "b", 2, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::random_normal(4, 8, 1.0, &mut rng));
        let out = sab(&mut g, x, &block).unwrap();
        for w in out.weights {
            assert!(g.value(w).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn identical_kv_rows_make_attention_output_constant() {
        let store = block_store(8, true);
        let block = AttentionBlock::lookup(&store, "b", 2, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = Tensor::random_normal(1, 8, 1.0, &mut rng);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut g = Graph::new(&store);
            let q = g.constant(Tensor::random_normal(2, 8, 1.0, &mut rng));
            let r = g.constant(row.clone());
            let kv = g.repeat_rows(r, 2);
            let hq = block.ln1.forward(&mut g, q);
            let hkv = block.ln_kv.unwrap().forward(&mut g, kv);
            let att = block.attention(&mut g, hq, hkv);
            let v = g.value(att.out).clone();
            assert!(v.row(0).iter().zip(v.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
            outs.push(v);
        }
        assert!(outs[0].max_abs_diff(&outs[1]) < 1e-12);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let store = block_store(8, false);
        let block = AttentionBlock::lookup(&store, "b", 2, false).unwrap();
        let mut g = Graph::new(&store);
        let wrong = g.constant(Tensor::zeros(2, 4));
        assert!(matches!(sab(&mut g, wrong, &block), Err(Error::Shape(_))));
        let nan = g.constant(Tensor::filled(2, 8, f64::NAN));
        assert!(matches!(sab(&mut g, nan, &block), Err(Error::Numeric(_))));
        let empty = g.constant(Tensor::zeros(0, 8));
        assert!(pool_sum(&mut g, empty).is_err());
        assert!(reduce_max_seq(&mut g, empty).is_err());
        assert!(matches!(cab(&mut g, wrong, wrong, &block), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let s = pool_sum(&mut g, x).unwrap();
        let m = reduce_max_seq(&mut g, x).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        assert_eq!(g.value(m).data(), &[3.0, 4.0]);
        let one = g.constant(Tensor::row_vector(&[7.0, -1.0]));
        let s = pool_sum(&mut g, one).unwrap();
        let m = reduce_max_seq(&mut g, one).unwrap();
        assert_eq!(g.value(s).data(), &[7.0, -1.0]);
        assert_eq!(g.value(m).data(), &[7.0, -1.0]);
    }
}
