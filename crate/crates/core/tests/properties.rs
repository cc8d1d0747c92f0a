mod common;

use avmaster::archive::{decode_tensor, encode_tensor, Dtype};
use avmaster::graph::Graph;
use avmaster::kernels::{cab, sab, AttentionBlock};
use avmaster::config::ContrastiveMode;
use avmaster::objectives::{infer, loss_contrastive, loss_total, AnswerDistribution, CombineMode, InferenceConfig};
use avmaster::{ModelConfig, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn setup(seed: u64, rows: usize) -> (avmaster::AvMaster, Tensor, Vec<usize>) {
    let config = ModelConfig::tiny();
    let model = common::perturbed_model(&config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::random_normal(rows, config.dim, 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..rows).collect();
    perm.shuffle(&mut rng);
    (model, x, perm)
}

fn probs(seed: u64, c: usize) -> AnswerDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::random_normal(1, c, 2.0, &mut rng);
    AnswerDistribution::new(common::softmax(logits.row(0))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sab_is_permutation_equivariant(seed in 0u64..1000, rows in 1usize..7) {
        let (model, x, perm) = setup(seed, rows);
        let block = AttentionBlock::lookup(&model.params, "fusion.context", model.config.num_heads, false).unwrap();
        let mut g = Graph::new(&model.params);
        let a = g.constant(x.clone());
        let b = g.constant(permute_rows(&x, &perm));
        let ya = sab(&mut g, a, &block).unwrap();
        let yb = sab(&mut g, b, &block).unwrap();
        let want = permute_rows(g.value(ya.out), &perm);
        prop_assert!(want.max_abs_diff(g.value(yb.out)) < 1e-12);
        for w in ya.weights {
            for r in 0..rows {
                prop_assert!((g.value(w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cab_ignores_key_value_order(seed in 0u64..1000, rows in 1usize..7) {
        let (model, kv, perm) = setup(seed, rows);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let q = Tensor::random_normal(3, model.config.dim, 1.0, &mut rng);
        let block = AttentionBlock::lookup(&model.params, "preference.audio.cab", model.config.num_heads, true).unwrap();
        let mut g = Graph::new(&model.params);
        let qv = g.constant(q);
        let a = g.constant(kv.clone());
        let b = g.constant(permute_rows(&kv, &perm));
        let ya = cab(&mut g, qv, a, &block).unwrap().out;
        let yb = cab(&mut g, qv, b, &block).unwrap().out;
        prop_assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
    }

    #[test]
    fn loss_total_is_the_weighted_sum(parts in prop::array::uniform4(0.0f64..10.0), lambdas in prop::array::uniform4(0.0f64..2.0)) {
        let b = loss_total(parts, lambdas);
        let want: f64 = parts.iter().zip(&lambdas).map(|(l, w)| l * w).sum();
        prop_assert!((b.total - want).abs() < 1e-12);
        prop_assert_eq!(b.parts(), parts);
    }

    #[test]
    fn contrastive_loss_is_positive_and_zero_for_one_sample(seed in 0u64..1000, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fused: Vec<Tensor> = (0..n).map(|_| Tensor::random_normal(1, 6, 1.0, &mut rng)).collect();
        let pv: Vec<Tensor> = (0..n).map(|_| Tensor::random_normal(4, 6, 1.0, &mut rng)).collect();
        let pa: Vec<Tensor> = (0..n).map(|_| Tensor::random_normal(4, 6, 1.0, &mut rng)).collect();
        let l = loss_contrastive(&fused, &pv, &pa, 0.1, ContrastiveMode::CrossPair).unwrap();
        let row = |t: &Tensor| t.row(0).to_vec();
        let mean = |t: &Tensor| common::mean_rows(&common::mat(t));
        let want = common::contrastive(
            &fused.iter().map(row).collect::<Vec<_>>(),
            &pv.iter().map(mean).collect::<Vec<_>>(),
            &pa.iter().map(mean).collect::<Vec<_>>(),
            0.1,
        );
        prop_assert!((l - want).abs() < 1e-10);
        if n == 1 {
            prop_assert!(l.abs() < 1e-12);
        } else {
            prop_assert!(l > 0.0);
        }
    }

    #[test]
    fn combined_scores_are_consistent(seed in 0u64..1000, c in 2usize..8) {
        let (qa, ap, vp) = (probs(seed, c), probs(seed + 1, c), probs(seed + 2, c));
        for combine in [CombineMode::Add, CombineMode::Mul, CombineMode::WAdd] {
            let ic = InferenceConfig { combine, ..InferenceConfig::default() };
            let (answer, scores) = infer(&qa, Some(&ap), Some(&vp), &ic).unwrap();
            prop_assert!(answer < c);
            prop_assert!(scores.iter().all(|&s| s <= scores[answer]));
            if combine == CombineMode::WAdd {
                prop_assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let only_qa = InferenceConfig { enable_ap: false, enable_vp: false, ..InferenceConfig::default() };
        let (answer, scores) = infer(&qa, Some(&ap), Some(&vp), &only_qa).unwrap();
        prop_assert_eq!(scores, qa.probs().to_vec());
        prop_assert_eq!(answer, avmaster::objectives::argmax(qa.probs()));
    }

    #[test]
    fn archive_tensors_round_trip(rows in 0usize..6, cols in 0usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::random_normal(rows, cols, 3.0, &mut rng);
        let (back, dtype) = decode_tensor(&encode_tensor(&t, Dtype::F64), "t").unwrap();
        prop_assert_eq!(dtype, Dtype::F64);
        prop_assert_eq!(&back, &t);
        let (back32, _) = decode_tensor(&encode_tensor(&t, Dtype::F32), "t").unwrap();
        prop_assert_eq!(back32, t.round_to_f32());
    }
}
