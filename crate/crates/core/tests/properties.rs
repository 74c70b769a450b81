use std::collections::BTreeSet;
use std::sync::Arc;

use codistill_core::data::{gen_classification, make_shards, unigram, ClassificationSpec};
use codistill_core::losses::{entropy, kl_div, soft_ce};
use codistill_core::metrics::{ensemble_predict, prediction_churn};
use codistill_core::nn::{codec, init_params, softmax, PayloadDtype};
use codistill_core::{Architecture, Matrix, ShardMode};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-30.0f64..30.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn logits_and_probs() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..5, 2usize..7).prop_flat_map(|(r, c)| {
        let probs = prop::collection::vec(0.0f64..1.0, r * c).prop_map(move |v| {
            let mut m = Matrix::from_vec(r, c, v).unwrap();
            for i in 0..r {
                let row = m.row_mut(i);
                row[0] += 1e-3;
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            m
        });
        (matrix(r, c), probs)
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(m in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let p = softmax(&m);
        for row in p.iter_rows() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn kl_is_soft_ce_minus_entropy_and_nonnegative((z, t) in logits_and_probs()) {
        let kl = kl_div(&t, &z).unwrap();
        let ce = soft_ce(&t, &z).unwrap();
        let h: f64 = t.iter_rows().map(entropy).sum::<f64>() / t.rows() as f64;
        prop_assert!(kl.loss >= -1e-12);
        prop_assert!((kl.loss - (ce.loss - h)).abs() < 1e-10);
        prop_assert_eq!(kl.grad.as_slice(), ce.grad.as_slice());
    }

    #[test]
    fn codec_round_trips(seed in any::<u64>(), step in any::<u64>(), id in any::<u32>(), hidden in 0usize..12) {
        let hidden = if hidden == 0 { vec![] } else { vec![hidden] };
        let arch = Arc::new(Architecture::classifier(3, hidden, 4).unwrap());
        let params = init_params(arch.clone(), seed);
        let bytes = codec::encode(&params, step, id, PayloadDtype::F64);
        let (header, back) = codec::decode(&bytes, &arch).unwrap();
        prop_assert_eq!(header.step, step);
        prop_assert_eq!(header.model_id, id);
        prop_assert_eq!(back.values(), params.values());

        let bytes = codec::encode(&params, step, id, PayloadDtype::F32);
        let (_, back) = codec::decode(&bytes, &arch).unwrap();
        for (a, b) in back.values().iter().zip(params.values()) {
            prop_assert_eq!(*a, (*b as f32) as f64);
        }
    }

    #[test]
    fn truncated_checkpoints_never_decode(seed in any::<u64>(), cut in 1usize..200) {
        let arch = Arc::new(Architecture::classifier(3, vec![5], 4).unwrap());
        let bytes = codec::encode(&init_params(arch.clone(), seed), 1, 0, PayloadDtype::F64);
        let cut = cut.min(bytes.len());
        prop_assert!(codec::decode(&bytes[..bytes.len() - cut], &arch).is_err());
    }

    #[test]
    fn disjoint_shards_partition(n in 1usize..400, k in 1usize..9, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let plan = make_shards(n, ShardMode::Disjoint, k, seed).unwrap();
        let mut seen = BTreeSet::new();
        let sizes: Vec<usize> = plan.shards.iter().map(Vec::len).collect();
        for s in &plan.shards {
            for &i in s {
                prop_assert!(seen.insert(i), "index {} twice", i);
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(plan, make_shards(n, ShardMode::Disjoint, k, seed).unwrap());
    }

    #[test]
    fn shared_shards_hold_everything(n in 1usize..200, k in 1usize..6) {
        prop_assume!(k <= n);
        let plan = make_shards(n, ShardMode::Shared, k, 0).unwrap();
        for s in &plan.shards {
            prop_assert_eq!(s.clone(), (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn unigram_is_a_distribution(seed in any::<u64>(), k in 1usize..8) {
        let data = gen_classification(&ClassificationSpec::new(seed, 50, 2, k, 1.0)).unwrap();
        let u = unigram(&data);
        prop_assert!(u.iter().all(|&p| p >= 0.0));
        prop_assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn churn_is_a_pseudometric(seeds in prop::array::uniform3(any::<u64>())) {
        let data = gen_classification(&ClassificationSpec::new(seeds[0], 60, 3, 3, 0.5)).unwrap();
        let arch = Arc::new(Architecture::classifier(3, vec![4], 3).unwrap());
        let [a, b, c] = seeds.map(|s| init_params(arch.clone(), s));
        let ab = prediction_churn(&a, &b, &data).unwrap();
        let ba = prediction_churn(&b, &a, &data).unwrap();
        let bc = prediction_churn(&b, &c, &data).unwrap();
        let ac = prediction_churn(&a, &c, &data).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(prediction_churn(&a, &a, &data).unwrap(), 0.0);
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn ensemble_rows_sum_to_one(s1 in any::<u64>(), s2 in any::<u64>()) {
        let data = gen_classification(&ClassificationSpec::new(s1, 40, 3, 5, 0.5)).unwrap();
        let arch = Arc::new(Architecture::classifier(3, vec![6], 5).unwrap());
        let members = [init_params(arch.clone(), s1), init_params(arch.clone(), s2)];
        let p = ensemble_predict(&members, &data.full_batch().unwrap()).unwrap();
        for row in p.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
